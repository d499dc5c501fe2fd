"""Command-line front end: ``dvd <command> [flags]``.

Value precedence is flag > ``--config`` file > built-in default. The config
file is flat ``key=value`` text; keys are flag names with or without the
leading dashes, and ``-`` and ``_`` are interchangeable. Outputs go to
``--out``, else ``$DVD_OUT_DIR``, else ``./runs``.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import adaptation as ad
from . import pipeline as pl
from .checkpoint import read_checkpoint, save_checkpoint
from .databench import (
    FeatureDataset, ShiftSpec, gen_openset_variant, gen_two_domain_shift, load_feature_file,
    save_feature_file, source_free,
)
from .errors import ContractError, DataError, DvdError, ParameterError
from .featurebank import FeatureBank
from .training import DvdTrainConfig, SourceTrainConfig, TrainLog, accuracy, train_dvd, train_source_classifier

OUT_ENV = "DVD_OUT_DIR"


def _csv_floats(text):
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _csv_ints(text):
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _csv_words(text):
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


def _opt_int(text):
    return None if str(text).lower() in ("", "none") else int(text)


# (flag, type, default, help). Defaults here are the built-in layer of the
# precedence chain; argparse itself sees None so unset flags are detectable.
COMMON = [("--seed", int, 0, "random seed")]
SHIFT = [
    ("--classes", int, 4, "class count C"),
    ("--theta", float, 45.0, "rotation angle in degrees, [0, 360)"),
    ("--translation", _csv_floats, (0.0, 0.0), "target translation, comma separated"),
    ("--scale", float, 1.0, "target scale factor"),
    ("--cluster-scale", float, 0.5, "per-class cluster standard deviation"),
    ("--samples-per-class", int, 200, "samples per class per domain"),
    ("--target-noise", float, 0.0, "extra Gaussian noise on target features"),
    ("--openset-unknown", int, 0, "classes present only in the target (0 = closed set)"),
]
PRETRAIN = [
    ("--source", str, None, "labeled source DVDF file"),
    ("--epochs", int, 150, "training epochs"),
    ("--lr", float, 3e-3, "learning rate"),
    ("--momentum", float, 0.9, "SGD momentum"),
    ("--batch-size", int, 128, "mini-batch size"),
    ("--latent-dim", int, 16, "encoder output width"),
    ("--encoder-hidden", _csv_ints, (64, 64), "encoder hidden widths"),
]
TRAINDVD = [
    ("--source", str, None, "labeled source DVDF file"),
    ("--gs", str, None, "source encoder checkpoint"),
    ("--f", str, None, "classifier head checkpoint"),
    ("--k-s-dif", int, 15, "source vicinity size"),
    ("--epochs", int, 4, "training epochs"),
    ("--lambda-ce", float, 1.0, "weight of the classification term"),
    ("--alpha-mode", str, "discrete", "discrete | uniform"),
    ("--steps", int, 16, "transport steps T"),
    ("--hidden", _csv_ints, (256, 256), "drift network hidden widths"),
    ("--lr", float, 3e-3, "learning rate"),
    ("--momentum", float, 0.9, "SGD momentum"),
    ("--batch-size", int, 128, "mini-batch size"),
    ("--prior", str, "full", "full | baseline | input-noise | latent-noise | centroid"),
]
ADAPT = [
    ("--target", str, None, "target DVDF file (labels are never read)"),
    ("--gs", str, None, "source encoder checkpoint"),
    ("--f", str, None, "classifier head checkpoint"),
    ("--d", str, None, "drift model checkpoint"),
    ("--k-t-dif", int, 15, "target vicinity size for the prior"),
    ("--k-t", int, 6, "neighbours blended into each positive key"),
    ("--tau", float, 0.13, "contrastive temperature"),
    ("--epochs", int, 6, "adaptation epochs"),
    ("--lr", float, 3e-3, "learning rate"),
    ("--momentum", float, 0.9, "SGD momentum"),
    ("--batch-size", int, 128, "mini-batch size"),
    ("--positive", str, "dvd", "dvd | no-silga | mean-pool | augment"),
    ("--prior", str, "full", "prior used for target cues"),
    ("--denominator", str, "literal", "literal | standard"),
    ("--infer-steps", _opt_int, None, "transport steps at inference (default: the model's T)"),
    ("--drift-noise", float, 0.0, "stochastic drift scale (0 = deterministic)"),
    ("--monitor", str, None, "labeled copy of the target, used only to log accuracy"),
]
EVAL = [
    ("--data", str, None, "DVDF file with labels or hidden labels"),
    ("--encoder", str, None, "encoder checkpoint (Gs or Gt)"),
    ("--f", str, None, "classifier head checkpoint"),
    ("--d", str, None, "drift model checkpoint (open-set filtering only)"),
    ("--openset", int, 0, "1 = score known/unknown with confidence filtering"),
    ("--tau-conf", float, 0.5, "confidence threshold for the known decision"),
    ("--k", int, 5, "neighbours for drift cues"),
]
TRANSFORM = [
    ("--data", str, None, "DVDF file to classify"),
    ("--encoder", str, None, "encoder checkpoint"),
    ("--f", str, None, "classifier head checkpoint"),
    ("--d", str, None, "drift model checkpoint"),
    ("--k", int, 5, "neighbours for the cue and its aggregation"),
]
ABLATE = [
    ("--variants", _csv_words, ("full", "mean-pool", "augment-only"), "comma-separated variant names"),
    ("--seeds", _csv_ints, (0, 1, 2, 3, 4), "comma-separated seeds"),
    ("--k-t-dif", int, pl.DESK_K_T_DIF, "target vicinity size"),
    ("--epochs", int, 6, "adaptation epochs"),
]

COMMANDS = {
    "gen": (COMMON + SHIFT, "generate the synthetic two-domain benchmark"),
    "pretrain": (COMMON + PRETRAIN, "train the source encoder and classifier head"),
    "traindvd": (COMMON + TRAINDVD, "train the drift model on source features"),
    "adapt": (COMMON + ADAPT, "adapt the encoder on the unlabeled target"),
    "eval": (COMMON + EVAL, "score an encoder and head on a labeled file"),
    "transform": (COMMON + TRANSFORM, "classify through drift cues without training"),
    "ablate": (COMMON + SHIFT + ABLATE, "run benchmark variants over several seeds"),
}


class UsageError(ParameterError):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dvd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (opts, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key=value file of flag values")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")
        for flag, typ, default, help_ in opts:
            p.add_argument(flag, type=typ, default=None, help=f"{help_} (default: {default})")
    return parser


def read_config(path) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.lstrip("-").replace("-", "_")] = value
    return values


def resolve(args: argparse.Namespace, config: dict) -> argparse.Namespace:
    """Fill unset flags from the config file, then from built-in defaults."""
    opts, _ = COMMANDS[args.command]
    for flag, typ, default, _ in opts:
        dest = flag.lstrip("-").replace("-", "_")
        if getattr(args, dest) is not None:
            continue
        if dest in config:
            try:
                setattr(args, dest, typ(config[dest]))
            except ValueError as exc:
                raise UsageError(f"config value for {dest}: {exc}") from None
        else:
            setattr(args, dest, default)
    return args


def _need(args, *names):
    missing = [n for n in names if getattr(args, n) in (None, "")]
    if missing:
        raise UsageError("missing required flag(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def out_dir(args) -> Path:
    base = args.out or os.environ.get(OUT_ENV) or "runs"
    path = Path(base)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_metrics(out: Path, command: str, seed: int, rows: list[dict]) -> Path:
    """One CSV per run id (timestamp + seed); the content depends only on the rows."""
    mdir = out / "metrics"
    mdir.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%dT%H%M%S")
    path = mdir / f"{command}-{stamp}-s{seed}.csv"
    n = 1
    while path.exists():
        path = mdir / f"{command}-{stamp}-s{seed}-{n}.csv"
        n += 1
    fields = []
    for row in rows:
        fields += [k for k in row if k not in fields]
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})
    return path


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _shift_spec(args) -> ShiftSpec:
    spec = ShiftSpec(
        n_classes=args.classes, theta=args.theta, translation=tuple(args.translation), scale=args.scale,
        cluster_scale=args.cluster_scale, samples_per_class=args.samples_per_class, seed=args.seed,
        target_noise=args.target_noise,
    )
    spec.validate()
    return spec


def _say(msg: str):
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    spec = _shift_spec(args)
    out = out_dir(args)
    if args.openset_unknown:
        source, target, test = gen_openset_variant(spec, args.openset_unknown)
    else:
        source, target, test = gen_two_domain_shift(spec)
    if spec.theta == 0 and spec.scale == 1.0 and not any(spec.translation) and spec.target_noise == 0:
        _say("note: no shift (theta=0 with identity translation and scale); target matches source")
    for name, ds in (("source", source), ("target", target), ("test", test)):
        path = out / f"{name}.dvdf"
        save_feature_file(ds, path)
        _say(f"wrote {path}")
    return 0


def cmd_pretrain(args) -> int:
    _need(args, "source")
    source = load_feature_file(args.source, mode="labeled")
    if source.labels is None:
        raise DataError(f"{args.source} carries no labels")
    cfg = SourceTrainConfig(
        n_classes=source.n_classes, encoder_hidden=tuple(args.encoder_hidden), latent_dim=args.latent_dim,
        lr=args.lr, momentum=args.momentum, batch_size=min(args.batch_size, len(source)),
        epochs=args.epochs, seed=args.seed,
    )
    encoder, head, log = train_source_classifier(source, cfg)
    out = out_dir(args)
    save_checkpoint(encoder, out / "Gs.ckpt", "Gs", frozen=True)
    save_checkpoint(head, out / "F.ckpt", "F", frozen=True)
    metrics = write_metrics(out, "pretrain", args.seed, log.rows)
    acc = log.rows[-1].get("train_accuracy", float("nan")) if log.rows else float("nan")
    _say(f"source train accuracy {acc:.4f}")
    _say(f"wrote {out / 'Gs.ckpt'}, {out / 'F.ckpt'}, {metrics}")
    return 0


def _frozen_checkpoint(path, role):
    model, _, frozen = read_checkpoint(path, expect=role)
    if not frozen:
        raise ContractError(f"{path} ({role}) is not flagged frozen")
    return model


def cmd_traindvd(args) -> int:
    _need(args, "source", "gs", "f")
    encoder = _frozen_checkpoint(args.gs, "Gs")
    head = _frozen_checkpoint(args.f, "F")
    source = load_feature_file(args.source, mode="labeled")
    z = encoder(source.features)
    cfg = DvdTrainConfig(
        k_s_dif=args.k_s_dif, epochs=args.epochs, lambda_ce=args.lambda_ce, alpha_mode=args.alpha_mode,
        T=args.steps, hidden=tuple(args.hidden), lr=args.lr, momentum=args.momentum,
        batch_size=min(args.batch_size, len(source)), seed=args.seed, prior=args.prior,
    )
    log = TrainLog()
    drift = train_dvd(
        FeatureBank(z, "source"), FeatureDataset(z, source.labels, domain="source"), head, cfg,
        encoder=encoder, inputs=source.features, log=log,
    )
    out = out_dir(args)
    save_checkpoint(drift, out / "D.ckpt", "D", frozen=True)
    metrics = write_metrics(out, "traindvd", args.seed, log.rows)
    _say(f"wrote {out / 'D.ckpt'}, {metrics}")
    return 0


def cmd_adapt(args) -> int:
    _need(args, "target", "gs", "f", "d")
    encoder, _, gs_frozen = read_checkpoint(args.gs, expect="Gs")
    head = _frozen_checkpoint(args.f, "F")
    drift = _frozen_checkpoint(args.d, "D")
    monitor = None
    with source_free():
        target = load_feature_file(args.target, mode="unlabeled")
        scored = load_feature_file(args.monitor, mode="full") if args.monitor else None
    if scored is not None:
        labels = scored.hidden_labels if scored.has_hidden_labels else scored.labels
        if labels is None:
            raise DataError(f"{args.monitor} carries no labels to monitor with")
        monitor = lambda enc: accuracy(head(enc(scored.features)), labels)  # noqa: E731
    cfg = ad.AdaptConfig(
        k_t_dif=args.k_t_dif, k_t=args.k_t, tau=args.tau, lr=args.lr, momentum=args.momentum,
        batch_size=min(args.batch_size, len(target)), epochs=args.epochs, seed=args.seed,
        positive=args.positive, prior=args.prior, denominator=args.denominator,
        infer_T=args.infer_steps, drift_noise=args.drift_noise,
    )
    log = TrainLog()
    encoder.frozen = True
    adapted = ad.adapt_target(target, encoder, head, drift, cfg, monitor=monitor, log=log)
    out = out_dir(args)
    save_checkpoint(adapted, out / "Gt.ckpt", "Gt", frozen=gs_frozen)
    rows = [{"epoch": r["epoch"], "L_cls": r["L_cls"], "target_accuracy": r.get("target_accuracy", "")} for r in log.rows]
    metrics = write_metrics(out, "adapt", args.seed, rows)
    if monitor is not None:
        _say(f"adapted target accuracy {monitor(adapted):.4f}")
    _say(f"wrote {out / 'Gt.ckpt'}, {metrics}")
    return 0


def _scoring_labels(ds: FeatureDataset):
    if ds.labels is not None:
        return ds.labels
    if ds.has_hidden_labels:
        return ds.hidden_labels
    raise DataError("evaluation file carries no labels")


def cmd_eval(args) -> int:
    _need(args, "data", "encoder", "f")
    encoder = read_checkpoint(args.encoder, expect="G")[0]
    head = _frozen_checkpoint(args.f, "F")
    data = load_feature_file(args.data, mode="full")
    scored = FeatureDataset(data.features, _scoring_labels(data))
    if args.openset:
        _need(args, "d")
        drift = _frozen_checkpoint(args.d, "D")
        bank = FeatureBank(encoder(scored.features), "target")
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, 29]))
        known = ad.dvd_ct_known(
            scored.features, encoder, head, drift, bank, args.k, args.tau_conf, rng, exclude=np.arange(len(scored))
        )
        closed = ad.evaluate(encoder, head, scored, "openset")
        ct = ad.evaluate(encoder, head, scored, "openset", known=known)
        row = {f"closed_{k}": v for k, v in closed.items()} | {f"ct_{k}": v for k, v in ct.items()}
        _say(f"H-score closed {closed['h_score']:.4f}  confidence-filtered {ct['h_score']:.4f}")
    else:
        res = ad.evaluate(encoder, head, scored, "closed")
        row = {"accuracy": res["accuracy"], "macro_accuracy": res["macro_accuracy"]}
        row |= {f"class_{c}": v for c, v in res["per_class"].items()}
        _say(f"accuracy {res['accuracy']:.4f}")
    metrics = write_metrics(out_dir(args), "eval", args.seed, [row])
    _say(f"wrote {metrics}")
    return 0


def cmd_transform(args) -> int:
    _need(args, "data", "encoder", "f", "d")
    encoder = read_checkpoint(args.encoder, expect="G")[0]
    head = _frozen_checkpoint(args.f, "F")
    drift = _frozen_checkpoint(args.d, "D")
    data = load_feature_file(args.data, mode="full")
    bank = FeatureBank(encoder(data.features), "target" if data.domain == "target" else "source")
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 13]))
    probs = ad.transform_inference(data.features, encoder, head, drift, bank, args.k, rng)
    row = {"n": len(data)}
    if data.labels is not None or data.has_hidden_labels:
        labels = _scoring_labels(data)
        row["plain_accuracy"] = accuracy(head(encoder(data.features)), labels)
        row["transform_accuracy"] = accuracy(probs, labels)
        _say(f"plain accuracy {row['plain_accuracy']:.4f}  transformed {row['transform_accuracy']:.4f}")
    out = out_dir(args)
    pred_path = out / "transform_predictions.csv"
    with open(pred_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "prediction", "confidence"])
        for i, p in enumerate(probs):
            w.writerow([i, int(np.argmax(p)), repr(float(p.max()))])
    metrics = write_metrics(out, "transform", args.seed, [row])
    _say(f"wrote {pred_path}, {metrics}")
    return 0


def cmd_ablate(args) -> int:
    unknown = [v for v in args.variants if v not in pl.ABLATIONS]
    if unknown:
        raise UsageError(f"unknown variant(s) {unknown}; choose from {sorted(pl.ABLATIONS)}")
    base = pl.BenchmarkConfig()
    base = replace(
        base,
        shift=_shift_spec(args),
        adapt=replace(base.adapt, k_t_dif=args.k_t_dif, epochs=args.epochs),
    )
    rows = []
    for seed in args.seeds:
        cfg = replace(base, seed=seed)
        stage = pl.pretrain_stage(cfg)
        source_only = pl.target_accuracy(stage, stage.encoder)
        drifts = {}
        for name in args.variants:
            prior = pl.ABLATIONS[name][0]
            enc_t, drifts[prior] = pl.run_ablation(stage, name, cfg, drift=drifts.get(prior))
            acc = pl.target_accuracy(stage, enc_t)
            rows.append({"variant": name, "seed": seed, "source_only": source_only, "accuracy": acc})
            _say(f"seed {seed}  {name:<20s} {acc:.4f}  (source only {source_only:.4f})")
    out = out_dir(args)
    table = out / "ablation.csv"
    with open(table, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["variant", "seed", "source_only", "accuracy"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})
    metrics = write_metrics(out, "ablate", args.seeds[0] if args.seeds else 0, rows)
    _say(f"wrote {table}, {metrics}")
    return 0


HANDLERS = {
    "gen": cmd_gen, "pretrain": cmd_pretrain, "traindvd": cmd_traindvd, "adapt": cmd_adapt,
    "eval": cmd_eval, "transform": cmd_transform, "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return 2 if exc.code else 0
    try:
        config = read_config(args.config) if args.config else {}
        resolve(args, config)
        return HANDLERS[args.command](args)
    except DvdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.exit_code == 2:
            parser.print_usage(sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
