"""Sequential policy execution under fresh fading, and the ergodic-rate metrics.

A rollout executes one power vector per time step; the running average of
instantaneous rates up to step ``tau`` estimates each receiver's ergodic rate.
Fading and policy randomness come from independent streams spawned from the
rollout seed, so every source sees the same fading sequence for a given seed.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .config import NetworkConfig
from .diffusion import NoiseSchedule, sample_policy
from .expert import ExpertBuffer
from .gnn import GnnParams
from .netgen import NetworkState, build_gso, sample_fading


# policy sources -------------------------------------------------------------

@dataclass
class FullPower:
    tag: str = "full_power"

    def powers(self, state: NetworkState, net: NetworkConfig, T: int, rng) -> np.ndarray:
        return np.full((T, state.n), net.p_max)


@dataclass
class AveragePower:
    buffer: ExpertBuffer
    tag: str = "average_power"

    def powers(self, state, net, T, rng):
        return np.tile(self.buffer.row_mean(), (T, 1))


@dataclass
class ExpertReplay:
    """Buffer rows in stored order (row ``s mod B`` at step ``s``), or uniform draws."""

    buffer: ExpertBuffer
    mode: str = "ordered"
    tag: str = "expert"

    def powers(self, state, net, T, rng):
        if self.mode == "uniform":
            return self.buffer.draw(rng, T)
        return self.buffer.samples[np.arange(T) % self.buffer.capacity]


@dataclass
class GdmPolicy:
    """One independent reverse chain per time step (chains run as one batch).

    ``cache_permute`` additionally shuffles the pre-generated samples.
    """

    params: GnnParams
    schedule: NoiseSchedule
    mode: str = "fresh"
    clip_x0: bool = True
    tag: str = "gdm"

    def powers(self, state, net, T, rng):
        gso = build_gso(state, net)
        x = sample_policy(gso, self.params, self.schedule, rng, net.p_max, n_samples=T,
                          clip_x0=self.clip_x0)
        if self.mode == "cache_permute":
            x = x[rng.permutation(T)]
        return x


# rollouts -------------------------------------------------------------------

@dataclass
class RolloutReport:
    tag: str
    network_id: int
    rates: np.ndarray  # (T, N) instantaneous
    running: np.ndarray  # (T, N); row tau-1 averages steps 0..tau-1
    powers: np.ndarray = field(repr=False)
    seed: int = 0
    flags: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.rates.shape[0]


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    fading_seq, policy_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(fading_seq), np.random.default_rng(policy_seq)


def rollout(source, state: NetworkState, T: int, seed: int, net: NetworkConfig,
            network_id: int = 0) -> RolloutReport:
    if T < 1:
        raise ValueError("rollout needs T >= 1")
    fading_rng, policy_rng = _streams(seed)
    x = np.asarray(source.powers(state, net, T, policy_rng), dtype=np.float64)
    if x.shape != (T, state.n) or np.any(x < 0) or np.any(x > net.p_max):
        raise ValueError(f"policy {source.tag} produced powers outside [0, p_max]^N")
    scale = net.p_max / net.noise_power
    rates = np.empty((T, state.n))
    for s in range(T):
        fading = sample_fading(state, fading_rng)
        rates[s] = kernels.rates(x[s] / net.p_max, fading.gains_tilde * scale)
    running = np.cumsum(rates, axis=0) / np.arange(1, T + 1)[:, None]
    flags = {"mode": getattr(source, "mode", "")}
    return RolloutReport(source.tag, network_id, rates, running, x, seed, flags)


# metrics --------------------------------------------------------------------

def nearest_rank(values, pct: float) -> float:
    """Nearest-rank percentile: the ceil(pct/100 * n)-th smallest value."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("percentile of an empty set")
    rank = max(1, math.ceil(pct / 100.0 * v.size))
    return float(v[rank - 1])


def _pooled(reports: Sequence[RolloutReport], tau: int) -> np.ndarray:
    return np.concatenate([r.running[tau - 1] for r in reports])


def metrics(reports, f_min: float, horizons: Sequence[int]) -> dict:
    """Mean, 5th percentile and constraint satisfaction of running rates.

    Receivers of all reports are pooled. Returns per-horizon summaries plus
    per-step trajectories of the mean and 5th percentile.
    """
    if isinstance(reports, RolloutReport):
        reports = [reports]
    T = min(r.T for r in reports)
    summary = {}
    for h in horizons:
        if not 1 <= h <= T:
            raise ValueError(f"horizon {h} outside [1, {T}]")
        pooled = _pooled(reports, h)
        summary[int(h)] = {
            "mean_rate": float(pooled.mean()),
            "p5_rate": nearest_rank(pooled, 5),
            "satisfaction": float(np.mean(pooled >= f_min)),
        }
    stacked = np.concatenate([r.running[:T] for r in reports], axis=1)
    return {
        "horizons": summary,
        "mean_trajectory": stacked.mean(axis=1),
        "p5_trajectory": np.array([nearest_rank(row, 5) for row in stacked]),
    }


def compare(reports_by_source: dict[str, list[RolloutReport]], f_min: float,
            horizons: Sequence[int]) -> list[dict]:
    """Aligned rows (source, horizon, mean, p5, satisfaction)."""
    keys = None
    for tag, reports in reports_by_source.items():
        k = sorted((r.network_id, r.seed) for r in reports)
        if keys is None:
            keys = k
        elif k != keys:
            raise ValueError(f"source {tag!r} was evaluated on a different network/seed set")
    rows = []
    for tag, reports in reports_by_source.items():
        m = metrics(reports, f_min, horizons)["horizons"]
        for h in horizons:
            rows.append({"source": tag, "horizon": int(h), **m[int(h)]})
    return rows


COMPARE_FIELDS = ["source", "horizon", "mean_rate", "p5_rate", "satisfaction"]


def write_comparison(rows: list[dict], out_dir, extra: dict | None = None) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "comparison.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARE_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    json_path = out_dir / "summary.json"
    json_path.write_text(json.dumps({"comparison": rows, **(extra or {})}, indent=1, sort_keys=True))
    return csv_path, json_path


def write_running_rates(report: RolloutReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "receiver", "running_rate"])
        for s in range(report.T):
            for i in range(report.running.shape[1]):
                w.writerow([s + 1, i, repr(float(report.running[s, i]))])


def write_slice(path, pairs: Sequence[tuple[int, int]], samples: dict[str, np.ndarray],
                p_max: float) -> None:
    """Scatter data for 2D slices: one row per (source, sample, node pair)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "sample", "node_i", "node_j", "power_i", "power_j"])
        for tag, x in samples.items():
            for s, row in enumerate(x):
                for i, j in pairs:
                    w.writerow([tag, s, i, j, repr(float(row[i] / p_max)), repr(float(row[j] / p_max))])
