"""Stochastic expert policy via Lagrangian dual descent on one network.

Each iteration draws a fading realization, maximizes the instantaneous
Lagrangian over powers (multi-start projected gradient ascent), and moves the
multipliers along the constraint slack. The post-burn-in primal iterates form
the expert buffer; sampling its rows uniformly is the expert distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .config import ExpertConfig, NetworkConfig
from .netgen import FadingSample, NetworkState, check_power, sample_fading


@dataclass
class DualState:
    lambdas: np.ndarray

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=np.float64)
        if np.any(self.lambdas < 0):
            raise ValueError("dual variables must be nonnegative")

    @classmethod
    def zeros(cls, n: int) -> "DualState":
        return cls(np.zeros(n))


@dataclass
class ExpertBuffer:
    samples: np.ndarray  # (B, N) watts, in iteration order
    network_id: int
    lambdas: np.ndarray  # final multipliers
    feasibility: np.ndarray  # running ergodic-rate estimate per receiver, post burn-in
    f_min: float
    lambda_trace: np.ndarray | None = field(default=None, repr=False)
    rate_trace: np.ndarray | None = field(default=None, repr=False)

    @property
    def capacity(self) -> int:
        return self.samples.shape[0]

    @property
    def feasible(self) -> bool:
        return bool(np.all(self.feasibility >= self.f_min))

    @property
    def satisfaction(self) -> float:
        return float(np.mean(self.feasibility >= self.f_min))

    def row_mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Uniform draws (with replacement) from the stored iterates."""
        return self.samples[rng.integers(0, self.capacity, size=size)]


def _scaled_gains(fading: FadingSample, net: NetworkConfig) -> np.ndarray:
    return fading.gains_tilde * (net.p_max / net.noise_power)


def _weights(lambdas: np.ndarray) -> np.ndarray:
    return 1.0 / lambdas.size + lambdas


def lagrangian_value(x, lambdas, rates, config: NetworkConfig) -> float:
    """Mean rate plus multiplier-weighted slack of the rate constraints."""
    lam = lambdas.lambdas if isinstance(lambdas, DualState) else np.asarray(lambdas, dtype=np.float64)
    r = np.asarray(rates, dtype=np.float64)
    return float(r.mean() + np.dot(lam, r - config.f_min))


def maximize_lagrangian(lambdas: DualState, fading: FadingSample, x_init,
                        expert: ExpertConfig, net: NetworkConfig,
                        rng: np.random.Generator | None = None) -> np.ndarray:
    """Best terminal point of projected gradient ascent from several starts.

    Starts, in order: ``x_init``, all-off, all-on, uniform random (the first
    ``n_restarts`` are used). Ascent runs in powers normalized by ``p_max``.
    """
    x_init = check_power(x_init, net.p_max)
    n = x_init.size
    g = _scaled_gains(fading, net)
    w = _weights(lambdas.lambdas)
    starts = [x_init / net.p_max, np.zeros(n), np.ones(n)]
    if expert.n_restarts > 3:
        rng = rng if rng is not None else np.random.default_rng(0)
        starts.append(rng.uniform(0.0, 1.0, size=n))
    best_u, best_val = None, -np.inf
    for u0 in starts[: expert.n_restarts]:
        u, val = kernels.ascent(u0, g, w, expert.eta_primal, expert.primal_steps)
        if val > best_val:
            best_u, best_val = u, val
    return np.clip(best_u * net.p_max, 0.0, net.p_max)


def dual_update(lambdas: DualState, rates, expert: ExpertConfig, net: NetworkConfig) -> DualState:
    r = np.asarray(rates, dtype=np.float64)
    return DualState(np.maximum(0.0, lambdas.lambdas - expert.eta_dual * (r - net.f_min)))


def run_expert(state: NetworkState, expert: ExpertConfig, net: NetworkConfig, seed: int,
               network_id: int = 0, keep_trace: bool = False) -> ExpertBuffer:
    fading_seq, restart_seq = np.random.SeedSequence(seed).spawn(2)
    fading_rng = np.random.default_rng(fading_seq)
    restart_rng = np.random.default_rng(restart_seq)
    n = state.n
    lam = DualState.zeros(n)
    x = np.zeros(n)
    iterates = np.empty((expert.t_total, n))
    rates = np.empty((expert.t_total, n))
    lam_trace = np.empty((expert.t_total + 1, n)) if keep_trace else None
    if keep_trace:
        lam_trace[0] = lam.lambdas
    for t in range(expert.t_total):
        fading = sample_fading(state, fading_rng)
        x = maximize_lagrangian(lam, fading, x, expert, net, restart_rng)
        r = kernels.rates(x / net.p_max, _scaled_gains(fading, net))
        lam = dual_update(lam, r, expert, net)
        iterates[t] = x
        rates[t] = r
        if keep_trace:
            lam_trace[t + 1] = lam.lambdas
    kept = iterates[expert.t_total - expert.buffer_capacity:]
    return ExpertBuffer(
        samples=kept.copy(),
        network_id=network_id,
        lambdas=lam.lambdas.copy(),
        feasibility=rates[expert.t_burn:].mean(axis=0),
        f_min=net.f_min,
        lambda_trace=lam_trace,
        rate_trace=rates if keep_trace else None,
    )
