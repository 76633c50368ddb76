"""DDPM machinery: noise schedules, forward corruption, loss and sampling.

Schedule arrays are indexed by timestep ``k = 0..K``; entry 0 of ``beta``
and ``sigma`` is a 0 placeholder so that ``alpha_bar[0] = 1``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ScheduleConfig
from .gnn import GnnParams, predict_noise

COSINE_OFFSET = 0.008
MAX_BETA = 0.999
SUPPORT = 0.5  # diffusion-space data lie in [-SUPPORT, SUPPORT]


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    K: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def descriptor(self) -> dict:
        return {"kind": self.kind, "K": self.K, "hash": self.digest()}

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.beta, self.alpha, self.alpha_bar, self.sigma):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def make_schedule(kind: str, K: int) -> NoiseSchedule:
    if K < 1:
        raise ValueError("schedule needs K >= 1")
    if kind == "linear":
        beta = np.concatenate(([0.0], np.linspace(1e-4, 2e-2, K)))
    elif kind == "cosine":
        steps = np.arange(K + 1, dtype=np.float64)
        f = np.cos((steps / K + COSINE_OFFSET) / (1 + COSINE_OFFSET) * np.pi / 2) ** 2
        ab = f / f[0]
        beta = np.concatenate(([0.0], np.minimum(1.0 - ab[1:] / ab[:-1], MAX_BETA)))
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    # posterior variance; sigma[1] = 0 since alpha_bar[0] = 1
    var = np.zeros(K + 1)
    var[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    return NoiseSchedule(kind, K, beta, alpha, alpha_bar, np.sqrt(var))


def schedule_from_config(cfg: ScheduleConfig) -> NoiseSchedule:
    return make_schedule(cfg.kind, cfg.n_steps)


def to_diffusion_space(x, p_max: float) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) / p_max - 0.5


def from_diffusion_space(y, p_max: float) -> np.ndarray:
    """Invert the affine map and project onto ``[0, p_max]``."""
    return np.clip((np.asarray(y, dtype=np.float64) + 0.5) * p_max, 0.0, p_max)


def _per_signal(coef: np.ndarray, like: np.ndarray) -> np.ndarray:
    # coef indexed per signal; append the node axis (and any missing ones)
    extra = like.ndim - coef.ndim
    return coef.reshape(coef.shape + (1,) * extra) if extra > 0 else coef


def q_sample(x0, k, epsilon, schedule: NoiseSchedule) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    epsilon = np.asarray(epsilon, dtype=np.float64)
    if x0.shape != epsilon.shape:
        raise ValueError("x0 and epsilon shapes differ")
    ab = schedule.alpha_bar[np.asarray(k)]
    return _per_signal(np.sqrt(ab), x0) * x0 + _per_signal(np.sqrt(1.0 - ab), x0) * epsilon


def snr(k, schedule: NoiseSchedule, definition: str = "marginal") -> np.ndarray:
    k = np.asarray(k)
    if definition == "marginal":
        ab = schedule.alpha_bar[k]
        with np.errstate(divide="ignore"):
            return ab / (1.0 - ab)
    if definition == "alpha_ratio":
        with np.errstate(divide="ignore"):
            return schedule.alpha[k] ** 2 / schedule.sigma[k] ** 2
    raise ValueError(f"unknown SNR definition {definition!r}")


def loss_weight(k, schedule: NoiseSchedule, cfg: ScheduleConfig | None = None) -> np.ndarray:
    """Clamped log-SNR weight ``omega(k)``."""
    cfg = cfg or ScheduleConfig(kind=schedule.kind, n_steps=schedule.K)
    with np.errstate(divide="ignore"):
        log_snr = np.log(snr(k, schedule, cfg.snr))
    return np.clip(log_snr, cfg.omega_min, cfg.omega_max)


@dataclass
class DiffusionBatch:
    """Training batch for one or more graphs.

    ``x0`` and ``epsilon`` have shape ``(G, S, N)``, ``k`` has ``(G, S)`` and
    ``gso`` is ``(G, N, N)``.
    """

    x0: np.ndarray
    k: np.ndarray
    epsilon: np.ndarray
    gso: np.ndarray

    def __post_init__(self):
        if self.x0.shape != self.epsilon.shape or self.x0.shape[:-1] != self.k.shape:
            raise ValueError("inconsistent batch shapes")
        if np.any(np.abs(self.x0) > 0.5 + 1e-12):
            raise ValueError("x0 outside the diffusion space [-1/2, 1/2]")
        if not np.all(np.isfinite(self.epsilon)):
            raise ValueError("non-finite noise")


def ddpm_loss(batch: DiffusionBatch, params: GnnParams, schedule: NoiseSchedule,
              cfg: ScheduleConfig | None = None,
              predictor: Callable | None = None) -> Tensor:
    """Weighted noise-prediction loss, averaged over signals.

    ``predictor(x_k, k, gso)`` overrides the GNN (used for testing).
    """
    x_k = q_sample(batch.x0, batch.k, batch.epsilon, schedule)
    gso = batch.gso
    if predictor is None:
        pred = predict_noise(x_k, batch.k, gso, params)
    else:
        pred = ad.as_tensor(predictor(x_k, batch.k, gso))
    resid = ad.sub(pred, batch.epsilon)
    per_signal = ad.reduce_sum(ad.mul(resid, resid), axis=-1)
    loss = ad.mean(ad.mul(per_signal, loss_weight(batch.k, schedule, cfg)))
    if not np.isfinite(loss.data):
        raise ad.NumericalError("non-finite diffusion loss")
    return loss


def ddpm_update(x_k, k: int, eps_hat, schedule: NoiseSchedule, noise, clip_x0: bool = True) -> np.ndarray:
    """One reverse step given the noise estimate; ``noise`` is ignored at k = 1.

    With ``clip_x0=False`` this is the textbook update
    ``(x_k - beta_k / sqrt(1 - abar_k) * eps_hat) / sqrt(alpha_k) + sigma_k w``.
    With ``clip_x0=True`` the same posterior mean is computed from the implied
    clean sample ``x0_hat``, clipped to the data support first; the two agree
    whenever ``x0_hat`` already lies inside it.
    """
    a, b, ab = schedule.alpha[k], schedule.beta[k], schedule.alpha_bar[k]
    if clip_x0:
        ab_prev = schedule.alpha_bar[k - 1]
        x0_hat = np.clip((x_k - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab), -SUPPORT, SUPPORT)
        mean = (np.sqrt(ab_prev) * b * x0_hat + np.sqrt(a) * (1.0 - ab_prev) * x_k) / (1.0 - ab)
    else:
        mean = (x_k - b / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)
    if k == 1:
        return mean
    return mean + schedule.sigma[k] * noise


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def ddpm_step(x_k, k: int, gso, params: GnnParams, schedule: NoiseSchedule, seed,
              clip_x0: bool = True) -> np.ndarray:
    if not 1 <= k <= schedule.K:
        raise ValueError("timestep outside [1, K]")
    x_k = np.asarray(x_k, dtype=np.float64)
    eps_hat = predict_noise(x_k, k, gso, params).data
    noise = _rng(seed).standard_normal(x_k.shape) if k > 1 else None
    return ddpm_update(x_k, k, eps_hat, schedule, noise, clip_x0)


def reverse_chain(gso, params: GnnParams, schedule: NoiseSchedule, seed,
                  shape: tuple[int, ...], clip_x0: bool = True) -> np.ndarray:
    """Run ``x_K ~ N(0, I)`` back to ``x_0``; batch dims lead ``shape``."""
    rng = _rng(seed)
    edges = getattr(gso, "edges", gso)
    x = rng.standard_normal(shape)
    for k in range(schedule.K, 0, -1):
        eps_hat = predict_noise(x, k, edges, params).data
        noise = rng.standard_normal(shape) if k > 1 else None
        x = ddpm_update(x, k, eps_hat, schedule, noise, clip_x0)
        if not np.all(np.isfinite(x)):
            raise ad.NumericalError(f"reverse chain diverged at k={k}")
    return x


def sample_policy(gso, params: GnnParams, schedule: NoiseSchedule, seed, p_max: float,
                  n_samples: int | None = None, clip_x0: bool = True) -> np.ndarray:
    """Power vector(s) in ``[0, p_max]^N`` drawn from the reverse chain.

    Returns shape ``(N,)``, or ``(n_samples, N)`` when ``n_samples`` is given;
    each row is an independent chain.
    """
    edges = getattr(gso, "edges", gso)
    n = edges.shape[-1]
    shape = (n,) if n_samples is None else (n_samples, n)
    y = reverse_chain(edges, params, schedule, seed, shape, clip_x0)
    return from_diffusion_space(y, p_max)
