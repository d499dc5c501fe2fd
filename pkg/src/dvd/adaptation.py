"""Target-side adaptation with a frozen head and drift model.

Per batch, every target feature gets a positive key: a drift-transported
sample from its vicinity prior, averaged with that sample's nearest target
neighbours. The encoder is then trained with a contrastive loss over
softmax predictions of the frozen head.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import driftnet as dn
from .databench import source_free
from .errors import ContractError, EmptyInputError, ParameterError
from .featurebank import FeatureBank, knn_batch
from .training import PRIOR_VARIANTS, TrainLog, start_states

POSITIVES = ("dvd", "no-silga", "mean-pool", "augment")
DENOMINATORS = ("literal", "standard")
NEGATIVES = ("live", "detached")


@dataclass
class AdaptConfig:
    k_t_dif: int = 15
    k_t: int = 6
    tau: float = 0.13
    lr: float = 3e-3
    momentum: float = 0.9
    batch_size: int = 128
    epochs: int = 6
    refresh_every: int = 1
    seed: int = 0
    positive: str = "dvd"
    prior: str = "full"
    denominator: str = "literal"
    reduction: str = "mean"  # "sum" steps on the summed batch loss
    negatives: str = "detached"  # "live" also back-propagates through p_j
    infer_T: int | None = None  # None -> the drift model's own T
    drift_noise: float = 0.0  # >0 selects the stochastic sampler
    augment_noise: float = 0.5
    input_noise: float = 0.5
    latent_noise: float = 0.5
    exclude_self: bool = True

    def validate(self, n_samples: int | None = None):
        if self.batch_size < 2:
            raise ParameterError("contrastive batches need m >= 2")
        if self.tau <= 0:
            raise ParameterError("temperature must be positive")
        if self.k_t_dif < 1 or self.k_t < 1:
            raise ParameterError("neighbour counts must be >= 1")
        if self.epochs < 0 or self.refresh_every < 1:
            raise ParameterError("epochs >= 0 and refresh_every >= 1 required")
        if self.positive not in POSITIVES:
            raise ParameterError(f"positive must be one of {POSITIVES}")
        if self.prior not in PRIOR_VARIANTS:
            raise ParameterError(f"prior must be one of {PRIOR_VARIANTS}")
        if self.denominator not in DENOMINATORS:
            raise ParameterError(f"denominator must be one of {DENOMINATORS}")
        if self.reduction not in ("sum", "mean"):
            raise ParameterError("reduction must be 'sum' or 'mean'")
        if self.negatives not in NEGATIVES:
            raise ParameterError(f"negatives must be one of {NEGATIVES}")
        if self.drift_noise < 0:
            raise ParameterError("drift noise must be non-negative")
        if n_samples is not None and n_samples < 2:
            raise EmptyInputError("adaptation needs at least two target samples")


def _check_frozen(head, drift):
    if not head.frozen:
        raise ContractError("classifier head must be frozen during adaptation")
    if drift is not None and not drift.frozen:
        raise ContractError("drift model must be frozen during adaptation")


def transport(drift, z0, T=None, noise: float = 0.0, rng=None):
    if noise > 0:
        return dn.sample_drift_stochastic(drift, z0, T, noise, rng)
    return dn.sample_drift(drift, z0, T)


def generate_source_cue(z_t, bank: FeatureBank, drift, k_t_dif: int, rng, exclude=None, T=None):
    """Sample from the vicinity prior of ``z_t`` in ``bank`` and transport it.

    ``z_t`` is a vector or a batch of rows; ``exclude`` skips the query's own
    bank entry (one index per row).
    """
    z = np.asarray(z_t, dtype=np.float32)
    single = z.ndim == 1
    zb = z[None, :] if single else z
    if exclude is not None:
        exclude = np.atleast_1d(exclude)
    z0 = start_states("full", zb, bank, k_t_dif, rng, exclude)
    out = transport(drift, z0, T)
    return out[0] if single else out


def silga(z1_t, bank: FeatureBank, k_t: int) -> np.ndarray:
    """``(z1 + sum of its k_t nearest bank entries) / (k_t + 1)``."""
    z = np.asarray(z1_t, dtype=np.float32)
    single = z.ndim == 1
    zb = z[None, :] if single else z
    idx = knn_batch(bank, zb, k_t)
    out = (zb.astype(np.float64) + bank.entries[idx].astype(np.float64).sum(axis=1)) / (k_t + 1)
    out = out.astype(np.float32)
    return out[0] if single else out


def mean_pool(z, bank: FeatureBank, k: int, exclude=None) -> np.ndarray:
    """Mean of the ``k`` nearest bank entries (no transport)."""
    idx = knn_batch(bank, np.atleast_2d(z), k, exclude)
    return bank.entries[idx].astype(np.float64).mean(axis=1).astype(np.float32)


def infonce_node(P: dc.Node, P_pos, tau: float, denominator: str = "literal", negatives: str = "live") -> dc.Node:
    """Contrastive loss over prediction rows ``P`` with constant positives ``P_pos``.

    ``-sum_i [p_i.p_pos_i / tau - log sum_{j != i} exp(p_i.p_j / tau)]``. The
    ``standard`` denominator also includes the positive pair. With
    ``negatives="detached"`` the p_j inside the denominators are treated as
    constants, so each row is pushed only by its own term; the loss value is
    unchanged.
    """
    m = P.value.shape[0]
    if m < 2:
        raise ParameterError("contrastive loss needs m >= 2")
    if denominator not in DENOMINATORS:
        raise ParameterError(f"denominator must be one of {DENOMINATORS}")
    if negatives not in NEGATIVES:
        raise ParameterError(f"negatives must be one of {NEGATIVES}")
    tape = P.tape
    pos_c = P_pos if isinstance(P_pos, dc.Node) else tape.constant(np.asarray(P_pos, dtype=P.value.dtype))
    inv_tau = 1.0 / tau
    pos = dc.scale(dc.row_sum(dc.mul(P, pos_c)), inv_tau)  # (m, 1)
    neg = dc.transpose(P) if negatives == "live" else tape.constant(P.value.T.copy())
    sims = dc.scale(dc.matmul(P, neg), inv_tau)  # (m, m)
    mask = ~np.eye(m, dtype=bool)
    if denominator == "standard":
        logits = dc.concat(pos, sims)
        mask = np.concatenate([np.ones((m, 1), dtype=bool), mask], axis=1)
    else:
        logits = sims
    lse = dc.masked_logsumexp(logits, mask)
    return dc.total(dc.sub(lse, pos))



def infonce_loss(P, P_pos, tau: float, denominator: str = "literal") -> float:
    P = np.asarray(P, dtype=np.float64)
    P_pos = np.asarray(P_pos, dtype=np.float64)
    if P.shape != P_pos.shape:
        raise ParameterError("P and P_pos must have the same shape")
    tape = dc.GradTape()
    return infonce_node(tape.constant(P), P_pos, tau, denominator).value.item()


def predict(encoder, head, x) -> np.ndarray:
    return dc.softmax_rows(head(encoder(x)).astype(np.float64))


@dataclass
class PositiveKeys:
    """Builds positive keys for one batch against a fixed bank snapshot."""

    cfg: AdaptConfig
    bank: FeatureBank
    drift: object
    encoder: dc.MlpNet
    rng: np.random.Generator

    def __call__(self, z, x, idx):
        cfg = self.cfg
        exclude = idx if cfg.exclude_self else None
        if cfg.positive == "augment":
            noisy = x + cfg.augment_noise * self.rng.standard_normal(x.shape).astype(np.float32)
            return self.encoder(noisy)
        if cfg.positive == "mean-pool":
            return mean_pool(z, self.bank, cfg.k_t, exclude)
        z0 = start_states(
            cfg.prior, z, self.bank, cfg.k_t_dif, self.rng, exclude, self.encoder, x,
            cfg.input_noise, cfg.latent_noise,
        )
        z1 = transport(self.drift, z0, cfg.infer_T, cfg.drift_noise, self.rng)
        if cfg.positive == "no-silga":
            return z1
        return silga(z1, self.bank, cfg.k_t)


def adapt_target(target, encoder_s: dc.MlpNet, head: dc.MlpNet, drift, cfg: AdaptConfig, monitor=None, log=None):
    """Fine-tune a copy of ``encoder_s`` on unlabeled ``target`` features.

    ``head`` and ``drift`` must be frozen and are never modified. ``monitor``,
    if given, is called as ``monitor(encoder)`` after each epoch and its
    return value is logged as the target accuracy. Runs inside a
    source-free region: loading any source-domain file raises.
    """
    x_all = np.asarray(getattr(target, "features", target), dtype=np.float32)
    cfg.validate(len(x_all))
    _check_frozen(head, drift if cfg.positive in ("dvd", "no-silga") else None)
    encoder = encoder_s.copy(frozen=False)
    log = log if log is not None else TrainLog()
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    m = min(cfg.batch_size, len(x_all))
    with source_free():
        bank = None
        for epoch in range(cfg.epochs):
            if bank is None or epoch % cfg.refresh_every == 0:
                gen = bank.generation + 1 if bank is not None else 0
                bank = FeatureBank(encoder(x_all), "target", gen)
            keys = PositiveKeys(cfg, bank, drift, encoder, rng)
            order = rng.permutation(len(x_all))
            losses = []
            for s in range(0, len(order) - m + 1, m):
                idx = order[s : s + m]
                xb = x_all[idx]
                tape = dc.GradTape()
                z = dc.apply(encoder, tape.constant(xb))
                z_pos = keys(z.value, xb, idx)
                P = dc.softmax(dc.apply(head, z))
                P_pos = dc.softmax_rows(head(z_pos))
                loss = infonce_node(P, P_pos, cfg.tau, cfg.denominator, cfg.negatives)
                if cfg.reduction == "mean":
                    loss = dc.scale(loss, 1.0 / m)
                grads = tape.backward(loss)
                dc.sgd_step(encoder, grads, cfg.lr, cfg.momentum)
                losses.append(loss.value.item())
            row = dict(epoch=epoch, L_cls=float(np.mean(losses)) if losses else float("nan"))
            if monitor is not None:
                row["target_accuracy"] = monitor(encoder)
            log.add(**row)
    encoder.frozen = encoder_s.frozen
    return encoder


def transform_inference(x, encoder, head, drift, bank: FeatureBank, k: int, rng, exclude=None, T=None):
    """Classify ``x`` through a drift cue aggregated with its ``k`` bank neighbours.

    No parameters change; the bank should hold ``encoder`` features of the
    evaluation pool. Returns softmax probabilities, one row per input.
    """
    _check_frozen(head, drift)
    z = encoder(np.atleast_2d(np.asarray(x, dtype=np.float32)))
    cue = generate_source_cue(z, bank, drift, k, rng, exclude, T)
    return dc.softmax_rows(head(silga(cue, bank, k)).astype(np.float64))


def ct_filter(pred, tau_conf: float):
    """Known/unknown decision by maximum softmax probability.

    A single probability vector returns ``"known"`` or ``"unknown"``; a batch
    returns a boolean array (True = known).
    """
    if not 0.0 <= tau_conf <= 1.0:
        raise ParameterError("confidence threshold must lie in [0, 1]")
    p = np.asarray(pred, dtype=np.float64)
    if p.ndim == 1:
        return "known" if p.max() >= tau_conf else "unknown"
    return p.max(axis=1) >= tau_conf


def dvd_ct_known(x, encoder, head, drift, bank: FeatureBank, k: int, tau_conf: float, rng, exclude=None):
    """Known mask from confidence of drift-generated features under the head."""
    z = encoder(np.asarray(x, dtype=np.float32))
    cue = generate_source_cue(z, bank, drift, k, rng, exclude)
    return ct_filter(dc.softmax_rows(head(cue).astype(np.float64)), tau_conf)


def h_score(known_acc: float, unknown_acc: float) -> float:
    if known_acc + unknown_acc == 0:
        return 0.0
    return 2 * known_acc * unknown_acc / (known_acc + unknown_acc)


def evaluate(encoder, head, data, mode: str = "closed", known=None, probs=None):
    """Classification metrics against ``data.labels``.

    ``closed``: overall and macro per-class accuracy. ``openset``: labels equal
    to ``head.out_width`` denote unknown classes; ``known`` is the per-sample
    known/unknown decision (all known if omitted). Known accuracy is the
    macro average over known classes of samples both accepted and correctly
    classified; unknown accuracy is the fraction of unknown samples rejected.
    """
    labels = getattr(data, "labels", None)
    if labels is None:
        raise ParameterError("evaluation needs labels")
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise EmptyInputError("empty evaluation set")
    if probs is None:
        probs = predict(encoder, head, data.features)
    pred = np.argmax(probs, axis=1)
    if mode == "closed":
        per_class = {int(c): float(np.mean(pred[labels == c] == c)) for c in np.unique(labels)}
        return dict(
            accuracy=float(np.mean(pred == labels)),
            per_class=per_class,
            macro_accuracy=float(np.mean(list(per_class.values()))),
        )
    if mode != "openset":
        raise ParameterError(f"unknown evaluation mode {mode!r}")
    n_known = head.out_width
    known = np.ones(len(labels), dtype=bool) if known is None else np.asarray(known, dtype=bool)
    is_unknown = labels >= n_known
    correct = known & (pred == labels)
    classes = [c for c in np.unique(labels[~is_unknown])]
    known_acc = float(np.mean([np.mean(correct[labels == c]) for c in classes])) if classes else 0.0
    unknown_acc = float(np.mean(~known[is_unknown])) if is_unknown.any() else 0.0
    return dict(known_accuracy=known_acc, unknown_accuracy=unknown_acc, h_score=h_score(known_acc, unknown_acc))
