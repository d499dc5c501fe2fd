"""Drift-only latent transport: blending, the drift network and its samplers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import NumericError, ParameterError, ShapeError

DEFAULT_T = 16
DEFAULT_HIDDEN = (256, 256)
EMBED_FREQS = 4  # sin/cos at 2^0..2^3 -> 8 features


@dataclass(frozen=True)
class BlendState:
    z: np.ndarray
    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError(f"alpha={self.alpha} outside [0, 1]")


def blend(z0, z1, alpha: float) -> BlendState:
    """``(1 - alpha) * z0 + alpha * z1``; exact at both endpoints."""
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha={alpha} outside [0, 1]")
    z0 = np.asarray(z0)
    z1 = np.asarray(z1)
    if z0.shape != z1.shape:
        raise ShapeError(f"blend endpoints differ in shape: {z0.shape} vs {z1.shape}")
    if alpha == 0.0:
        z = z0.copy()
    elif alpha == 1.0:
        z = z1.copy()
    else:
        z = (1.0 - alpha) * z0 + alpha * z1
    return BlendState(z, float(alpha))


def embed_alpha(alpha, n: int, n_freqs: int = EMBED_FREQS, dtype=np.float32) -> np.ndarray:
    """Sinusoidal embedding of ``alpha`` for ``n`` rows: [sin(2^j pi a), cos(2^j pi a)]."""
    a = np.broadcast_to(np.asarray(alpha, dtype=np.float64).reshape(-1, 1), (n, 1))
    freqs = (2.0 ** np.arange(n_freqs)) * np.pi
    ang = a * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


def schedule(T: int) -> np.ndarray:
    """Uniform grid ``alpha_t = t / T`` for t = 0..T."""
    if T < 1:
        raise ParameterError("step count T must be >= 1")
    return np.arange(T + 1, dtype=np.float64) / T


class DriftModel:
    """Drift network ``D(z, alpha)`` mapping (z ++ embed(alpha)) to a transport vector."""

    def __init__(self, net: dc.MlpNet, T: int = DEFAULT_T, n_freqs: int = EMBED_FREQS):
        if T < 1:
            raise ParameterError("step count T must be >= 1")
        if net.in_width != net.out_width + 2 * n_freqs:
            raise ShapeError(
                f"drift net input {net.in_width} != dim {net.out_width} + embedding {2 * n_freqs}"
            )
        self.net = net
        self.T = int(T)
        self.n_freqs = int(n_freqs)

    @classmethod
    def init(cls, dim: int, rng, hidden=DEFAULT_HIDDEN, T: int = DEFAULT_T, n_freqs: int = EMBED_FREQS):
        widths = [dim + 2 * n_freqs, *hidden, dim]
        acts = ["relu"] * len(hidden) + ["identity"]
        return cls(dc.MlpNet.init(widths, acts, rng), T, n_freqs)

    @property
    def dim(self) -> int:
        return self.net.out_width

    @property
    def frozen(self) -> bool:
        return self.net.frozen

    @frozen.setter
    def frozen(self, value: bool):
        self.net.frozen = value

    def _inputs(self, z, alpha) -> np.ndarray:
        z = dc.tensor2(z, dtype=self.net.dtype)
        if z.shape[1] != self.dim:
            raise ShapeError(f"state dim {z.shape[1]} != drift dim {self.dim}")
        emb = embed_alpha(alpha, z.shape[0], self.n_freqs, dtype=z.dtype)
        return np.concatenate([z, emb], axis=1)

    def __call__(self, z, alpha) -> np.ndarray:
        """Batched drift for rows ``z`` at blend level(s) ``alpha``."""
        return dc.forward(self.net, self._inputs(z, alpha))

    def node(self, z: dc.Node, alpha) -> dc.Node:
        """Drift recorded on ``z``'s tape."""
        if z.value.shape[1] != self.dim:
            raise ShapeError(f"state dim {z.value.shape[1]} != drift dim {self.dim}")
        emb = z.tape.constant(embed_alpha(alpha, z.value.shape[0], self.n_freqs, z.value.dtype))
        return dc.apply(self.net, dc.concat(z, emb))

    def checksum(self) -> str:
        return self.net.checksum()

    def copy(self) -> "DriftModel":
        return DriftModel(self.net.copy(), self.T, self.n_freqs)


def drift_eval(model, state: BlendState) -> np.ndarray:
    z = np.asarray(state.z)
    out = model(z.reshape(1, -1) if z.ndim == 1 else z, state.alpha)
    return out[0] if z.ndim == 1 else out


def _steps(model, T_override):
    T = T_override if T_override is not None else getattr(model, "T", None)
    if T is None:
        raise ParameterError("step count required for a drift without a stored T")
    return schedule(int(T))


def sample_drift(model, z0, T_override: int | None = None) -> np.ndarray:
    """Deterministic transport of ``z0`` (a vector or a batch of rows).

    ``model`` is a ``DriftModel`` or any callable ``(z_batch, alpha) -> drift``.
    """
    alphas = _steps(model, T_override)
    z0 = np.asarray(z0)
    single = z0.ndim == 1
    # state carried in float64; drift evaluated at the network's precision
    z = np.array(z0.reshape(1, -1) if single else z0, dtype=np.float64)
    for t in range(len(alphas) - 1):
        d = np.asarray(model(z, alphas[t]), dtype=np.float64)
        z = z + (alphas[t + 1] - alphas[t]) * d
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite state after drift step {t}")
    z = z.astype(np.float32)
    return z[0] if single else z


def sample_drift_stochastic(model, z0, T: int | None, noise_scale: float, rng) -> np.ndarray:
    """As ``sample_drift`` plus ``noise_scale * sqrt(d_alpha) * eps`` per step."""
    if noise_scale < 0:
        raise ParameterError("noise scale must be non-negative")
    if noise_scale == 0:
        return sample_drift(model, z0, T)
    alphas = _steps(model, T)
    z0 = np.asarray(z0)
    single = z0.ndim == 1
    z = np.array(z0.reshape(1, -1) if single else z0, dtype=np.float64)
    for t in range(len(alphas) - 1):
        da = alphas[t + 1] - alphas[t]
        d = np.asarray(model(z, alphas[t]), dtype=np.float64)
        z = z + da * d + (noise_scale * np.sqrt(da)) * rng.standard_normal(z.shape)
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite state after drift step {t}")
    z = z.astype(np.float32)
    return z[0] if single else z


def sample_drift_node(model: DriftModel, z0: dc.Node, T_override: int | None = None) -> dc.Node:
    """Differentiable transport: every step is recorded on ``z0``'s tape."""
    alphas = _steps(model, T_override)
    z = z0
    for t in range(len(alphas) - 1):
        z = dc.add(z, dc.scale(model.node(z, alphas[t]), alphas[t + 1] - alphas[t]))
    return z
