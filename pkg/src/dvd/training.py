"""Source-side training: classifier pre-training and drift training.

Drift training samples a start state from each source feature's vicinity
prior, regresses the global transport vector ``z1 - z0`` at blend levels
along the schedule, and additionally pushes the fully transported state
through the frozen head with a cross-entropy term.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import driftnet as dn
from .errors import ContractError, DataError, ParameterError, ShapeError
from .featurebank import FeatureBank, knn_batch, vicinity_moments

PRIOR_VARIANTS = ("full", "baseline", "input-noise", "latent-noise", "centroid")
ALPHA_MODES = ("discrete", "uniform")


@dataclass
class SourceTrainConfig:
    n_classes: int = 4
    encoder_hidden: tuple = (64, 64)
    latent_dim: int = 16
    head_hidden: int = 32
    lr: float = 3e-3
    momentum: float = 0.9
    batch_size: int = 128
    epochs: int = 150
    seed: int = 0

    def validate(self, n_samples: int):
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ParameterError("lr must be positive and momentum in [0, 1)")
        if self.batch_size < 1 or self.batch_size > n_samples:
            raise ParameterError(f"batch size {self.batch_size} not in [1, {n_samples}]")
        if self.epochs < 0 or self.n_classes < 2 or self.latent_dim < 1:
            raise ParameterError("epochs >= 0, n_classes >= 2 and latent_dim >= 1 required")


@dataclass
class DvdTrainConfig:
    k_s_dif: int = 15
    epochs: int = 4
    lambda_ce: float = 1.0
    lambda_dif: float = 1.0
    alpha_mode: str = "discrete"
    T: int = dn.DEFAULT_T
    hidden: tuple = dn.DEFAULT_HIDDEN
    lr: float = 3e-3
    momentum: float = 0.9
    batch_size: int = 128
    seed: int = 0
    prior: str = "full"
    input_noise: float = 0.5  # absolute std in input space
    latent_noise: float = 0.5  # std as a fraction of the bank's feature std
    exclude_self: bool = True

    def validate(self):
        if self.k_s_dif < 1:
            raise ParameterError("k_s_dif must be >= 1")
        if not np.isfinite(self.lambda_ce) or self.lambda_ce < 0:
            raise ParameterError("lambda_ce must be finite and non-negative")
        if self.alpha_mode not in ALPHA_MODES:
            raise ParameterError(f"alpha_mode must be one of {ALPHA_MODES}")
        if self.prior not in PRIOR_VARIANTS:
            raise ParameterError(f"prior must be one of {PRIOR_VARIANTS}")
        if self.T < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ParameterError("T >= 1, epochs >= 0 and batch_size >= 1 required")


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def add(self, **row):
        self.rows.append(row)

    def __iter__(self):
        return iter(self.rows)


def _check_labels(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(f"labels must lie in [0, {n_classes})")
    return labels


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s : s + batch_size]


def accuracy(logits_or_probs, labels) -> float:
    return float(np.mean(np.argmax(logits_or_probs, axis=1) == np.asarray(labels)))


def build_classifier(cfg: SourceTrainConfig, in_dim: int, rng):
    enc_widths = [in_dim, *cfg.encoder_hidden, cfg.latent_dim]
    encoder = dc.MlpNet.init(
        enc_widths, ["relu"] * len(cfg.encoder_hidden) + ["identity"], rng
    )
    head = dc.MlpNet.init(
        [cfg.latent_dim, cfg.head_hidden, cfg.n_classes], ["relu", "identity"], rng
    )
    return encoder, head


def train_source_classifier(source, cfg: SourceTrainConfig):
    """Fit encoder + head on labeled source features with softmax cross-entropy.

    Returns ``(encoder, head, log)``; the log's last row holds the final
    training accuracy.
    """
    x = np.asarray(source.features, dtype=np.float32)
    if source.labels is None:
        raise DataError("source classifier training needs labels")
    y = _check_labels(source.labels, cfg.n_classes)
    cfg.validate(len(x))
    init_ss, shuffle_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    encoder, head = build_classifier(cfg, x.shape[1], np.random.default_rng(init_ss))
    rng = np.random.default_rng(shuffle_ss)
    log = TrainLog()
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in _batches(len(x), cfg.batch_size, rng):
            tape = dc.GradTape()
            z = dc.apply(encoder, tape.constant(x[idx]))
            loss = dc.softmax_cross_entropy(dc.apply(head, z), y[idx])
            grads = tape.backward(loss)
            dc.sgd_step(encoder, grads, cfg.lr, cfg.momentum)
            dc.sgd_step(head, grads, cfg.lr, cfg.momentum)
            total += loss.value.item() * len(idx)
        log.add(epoch=epoch, loss=total / len(x))
    acc = accuracy(head(encoder(x)), y)
    log.add(epoch=cfg.epochs, loss=float("nan"), train_accuracy=acc)
    return encoder, head, log


# ---------------------------------------------------------------------------
# Drift losses


def dvd_loss_node(model: dn.DriftModel, z0: dc.Node, z1: dc.Node, alpha) -> dc.Node:
    """Batch mean of ``||D(z_alpha, alpha) - (z1 - z0)||^2``.

    ``alpha`` is a scalar or one value per row; ``z0``/``z1`` are constants.
    """
    a = np.asarray(alpha, dtype=np.float64).reshape(-1, 1)
    za = ((1.0 - a) * z0.value + a * z1.value).astype(z0.value.dtype)
    pred = model.node(z0.tape.constant(za), alpha)
    resid = dc.sub(pred, dc.sub(z1, z0))
    return dc.scale(dc.total(dc.square(resid)), 1.0 / za.shape[0])


def dvd_loss(model: dn.DriftModel, z0, z1, alpha) -> float:
    a = np.asarray(alpha, dtype=np.float64)
    if np.any((a < 0) | (a > 1)):
        raise ParameterError("alpha outside [0, 1]")
    z0 = dc.tensor2(z0, model.net.dtype)
    z1 = dc.tensor2(z1, model.net.dtype)
    if z0.shape != z1.shape:
        raise ShapeError("z0 and z1 shapes differ")
    tape = dc.GradTape()
    return dvd_loss_node(model, tape.constant(z0), tape.constant(z1), alpha).value.item()


def ce_loss(head: dc.MlpNet, z_hat, labels) -> float:
    """Mean softmax cross-entropy of ``head(z_hat)``."""
    z = dc.tensor2(z_hat, head.dtype)
    labels = _check_labels(labels, head.out_width)
    tape = dc.GradTape()
    return dc.softmax_cross_entropy(dc.apply(head, tape.constant(z)), labels).value.item()


# ---------------------------------------------------------------------------
# Start states


def start_states(
    variant: str,
    z,
    bank: FeatureBank,
    k: int,
    rng,
    exclude=None,
    encoder=None,
    inputs=None,
    input_noise: float = 0.5,
    latent_noise: float = 0.5,
    moments=None,
):
    """Initial transport states for queries ``z`` under a prior-construction variant.

    ``full`` samples the vicinity Gaussian, ``centroid`` takes its mean,
    ``baseline`` uses ``z`` itself, ``latent-noise`` perturbs ``z`` and
    ``input-noise`` re-encodes perturbed ``inputs``.
    """
    z = np.asarray(z, dtype=np.float32)
    if variant in ("full", "centroid"):
        if moments is None:
            idx = knn_batch(bank, z, k, exclude)
            moments = vicinity_moments(bank.entries[idx])
        mu, var = moments
        if variant == "centroid":
            return mu.astype(np.float32)
        return (mu + np.sqrt(var) * rng.standard_normal(mu.shape)).astype(np.float32)
    if variant == "baseline":
        return z.copy()
    if variant == "latent-noise":
        sd = float(bank.entries.std())
        return (z + latent_noise * sd * rng.standard_normal(z.shape)).astype(np.float32)
    if variant == "input-noise":
        if encoder is None or inputs is None:
            raise ParameterError("input-noise prior needs the encoder and raw inputs")
        x = np.asarray(inputs, dtype=np.float32)
        return encoder(x + input_noise * rng.standard_normal(x.shape).astype(np.float32))
    raise ParameterError(f"unknown prior variant {variant!r}")


# ---------------------------------------------------------------------------
# Drift training


def train_dvd(
    bank: FeatureBank,
    source,
    head: dc.MlpNet,
    cfg: DvdTrainConfig,
    encoder: dc.MlpNet | None = None,
    inputs=None,
    log: TrainLog | None = None,
):
    """Train the drift model on source features.

    ``source`` provides ``features`` (encoded, aligned with ``bank``) and
    optional ``labels``; ``inputs`` are the raw source rows, needed only by
    the ``input-noise`` prior. ``head`` must be frozen and stays untouched.
    Returns the trained, frozen ``DriftModel``.
    """
    cfg.validate()
    if not head.frozen:
        raise ContractError("classifier head must be frozen before drift training")
    if encoder is not None and not encoder.frozen:
        raise ContractError("source encoder must be frozen before drift training")
    z1_all = np.asarray(getattr(source, "features", source), dtype=np.float32)
    labels = getattr(source, "labels", None)
    if labels is not None:
        labels = _check_labels(labels, head.out_width)
    if z1_all.shape[1] != bank.dim:
        raise ShapeError("source features do not match bank dimension")
    n = len(z1_all)
    init_ss, data_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    model = dn.DriftModel.init(bank.dim, np.random.default_rng(init_ss), cfg.hidden, cfg.T)
    rng = np.random.default_rng(data_ss)
    log = log if log is not None else TrainLog()

    exclude = np.arange(n) if cfg.exclude_self else None
    moments = None
    if cfg.prior in ("full", "centroid"):
        idx = knn_batch(bank, z1_all, cfg.k_s_dif, exclude)
        moments = vicinity_moments(bank.entries[idx])
    use_ce = cfg.lambda_ce > 0 and labels is not None
    alphas = dn.schedule(cfg.T)

    def step(z0b, z1b, yb, alpha):
        tape = dc.GradTape()
        c0, c1 = tape.constant(z0b), tape.constant(z1b)
        l_dif = dvd_loss_node(model, c0, c1, alpha)
        loss = dc.scale(l_dif, cfg.lambda_dif)
        l_ce = None
        if use_ce:
            logits = dc.apply(head, dn.sample_drift_node(model, c0))
            l_ce = dc.softmax_cross_entropy(logits, yb)
            loss = dc.add(loss, dc.scale(l_ce, cfg.lambda_ce))
        dc.sgd_step(model.net, tape.backward(loss), cfg.lr, cfg.momentum)
        return l_dif.value.item(), (l_ce.value.item() if l_ce is not None else float("nan"))

    for epoch in range(cfg.epochs):
        z0_all = start_states(
            cfg.prior, z1_all, bank, cfg.k_s_dif, rng, exclude, encoder, inputs,
            cfg.input_noise, cfg.latent_noise, moments,
        )
        difs, ces = [], []
        for idx in _batches(n, cfg.batch_size, rng):
            z0b, z1b = z0_all[idx], z1_all[idx]
            yb = labels[idx] if labels is not None else None
            if cfg.alpha_mode == "discrete":
                for a in alphas:
                    d, c = step(z0b, z1b, yb, a)
                    difs.append(d)
                    ces.append(c)
            else:
                d, c = step(z0b, z1b, yb, rng.uniform(0.0, 1.0, size=len(idx)))
                difs.append(d)
                ces.append(c)
        row = dict(epoch=epoch, L_dif=float(np.mean(difs)), L_ce=float(np.mean(ces)) if use_ce else float("nan"))
        if labels is not None:
            row["drifted_accuracy"] = accuracy(head(dn.sample_drift(model, z0_all)), labels)
        log.add(**row)
    model.frozen = True
    return model


def fit_pair(model: dn.DriftModel, z0, z1, steps: int, lr: float = 3e-3, momentum: float = 0.9) -> list[float]:
    """Regress ``model`` onto one ``(z0, z1)`` pair; returns the loss per step.

    Every step sees all ``T + 1`` blend levels of the model's schedule as a
    single batch.
    """
    alphas = dn.schedule(model.T)
    dt = model.net.dtype
    z0b = np.repeat(dc.tensor2(z0, dt), len(alphas), axis=0)
    z1b = np.repeat(dc.tensor2(z1, dt), len(alphas), axis=0)
    losses = []
    for _ in range(steps):
        tape = dc.GradTape()
        loss = dvd_loss_node(model, tape.constant(z0b), tape.constant(z1b), alphas)
        dc.sgd_step(model.net, tape.backward(loss), lr, momentum)
        losses.append(loss.value.item())
    return losses
