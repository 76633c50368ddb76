"""Random interference networks, fading, graph shift operators and rates.

Gain matrices follow the convention ``gains[j, i]`` = power gain from
transmitter ``j`` to receiver ``i``; the diagonal holds the direct links.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .config import NetworkConfig


@dataclass(frozen=True)
class NetworkState:
    gains_h: np.ndarray  # (N, N) long-term power gains, linear
    tx_pos: np.ndarray  # (N, 2) meters
    rx_pos: np.ndarray  # (N, 2) meters
    seed: int

    @property
    def n(self) -> int:
        return self.gains_h.shape[0]

    def permuted(self, perm: np.ndarray) -> "NetworkState":
        """Relabel pairs so that new pair ``a`` is old pair ``perm[a]``."""
        perm = np.asarray(perm)
        return NetworkState(
            gains_h=self.gains_h[np.ix_(perm, perm)],
            tx_pos=self.tx_pos[perm],
            rx_pos=self.rx_pos[perm],
            seed=self.seed,
        )


@dataclass(frozen=True)
class FadingSample:
    gains_tilde: np.ndarray  # (N, N) instantaneous power gains, linear


@dataclass(frozen=True)
class Gso:
    edges: np.ndarray  # (N, N) in [0, 1], max entry 1
    norm_constant: float


def pathloss(d, config: NetworkConfig):
    """Dual-slope path-loss gain for distance(s) ``d`` in meters."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(~(d > 0)):
        raise ValueError("path loss requires strictly positive distances")
    bp = config.breakpoint_m
    e1, e2 = config.pathloss_exp_near, config.pathloss_exp_far
    c = config.pathloss_ref
    near = c * d ** (-e1)
    far = c * bp ** (e2 - e1) * d ** (-e2)
    out = np.where(d <= bp, near, far)
    return out if out.ndim else float(out)


def generate_network(config: NetworkConfig, seed: int) -> NetworkState:
    rng = np.random.default_rng(seed)
    n = config.n_pairs
    side = config.area_side
    tx = rng.uniform(0.0, side, size=(n, 2))
    dist = rng.uniform(config.rx_dist_min_m, config.rx_dist_max_m, size=n)
    angle = rng.uniform(0.0, 2.0 * np.pi, size=n)
    rx = tx + dist[:, None] * np.column_stack((np.cos(angle), np.sin(angle)))
    # d[j, i] = |tx_j - rx_i|
    d = np.linalg.norm(tx[:, None, :] - rx[None, :, :], axis=-1)
    if np.any(d <= 0):
        raise ValueError("degenerate geometry: a transmitter coincides with a receiver")
    shadow_db = rng.normal(0.0, config.shadowing_sigma_db, size=(n, n))
    gains = pathloss(d, config) * 10.0 ** (shadow_db / 10.0)
    return NetworkState(gains_h=gains, tx_pos=tx, rx_pos=rx, seed=int(seed))


def sample_fading(state: NetworkState, seed) -> FadingSample:
    """Rayleigh fading: unit-mean exponential scaling of every power gain.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    scale = rng.exponential(1.0, size=state.gains_h.shape)
    return FadingSample(gains_tilde=state.gains_h * scale)


def build_gso(state: NetworkState, config: NetworkConfig) -> Gso:
    raw = np.log2(1.0 + config.p_max * state.gains_h / config.noise_power)
    top = float(raw.max())
    if not top > 0:
        raise ValueError("degenerate channel: all GSO entries are zero")
    return Gso(edges=raw / top, norm_constant=top)


def check_power(x, p_max: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0) or np.any(x > p_max) or not np.all(np.isfinite(x)):
        raise ValueError("power vector outside [0, p_max]^N")
    return x


def instantaneous_rates(x, fading: FadingSample, config: NetworkConfig) -> np.ndarray:
    """Per-receiver rate in bps/Hz for power vector ``x`` (watts)."""
    x = check_power(x, config.p_max)
    g = fading.gains_tilde * (config.p_max / config.noise_power)
    return kernels.rates(x / config.p_max, g)
