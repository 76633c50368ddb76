"""Training loop for the noise predictor: Adam, cosine warm restarts,
periodic validation rollouts and best-checkpoint selection."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .config import GnnConfig, NetworkConfig, ScheduleConfig, TrainConfig, section_from_dict
from .diffusion import DiffusionBatch, NoiseSchedule, ddpm_loss, make_schedule, to_diffusion_space
from .evaluation import ExpertReplay, GdmPolicy, metrics, rollout
from .expert import ExpertBuffer
from .gnn import GnnParams, init_params
from .io import IntegrityError, decode_array, encode_array, read_artifact, write_artifact
from .netgen import NetworkState, build_gso
from .seeding import derive_seed

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "gdmpolicy.checkpoint"


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, theta) -> "AdamState":
        theta = np.asarray(theta, dtype=np.float64)
        return cls(np.zeros_like(theta), np.zeros_like(theta), 0)


def adam_step(theta, grad, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> tuple[np.ndarray, AdamState]:
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise ad.NumericalError("non-finite gradient passed to Adam")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    theta = np.asarray(theta, dtype=np.float64) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return theta, AdamState(m, v, t)


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Cosine annealing with warm restarts; cycles of length T_0, T_0*T_mult, ..."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    t_cur, period = float(epoch), float(cfg.t_0)
    while t_cur >= period:
        t_cur -= period
        period *= cfg.t_mult
    return cfg.lr_min + (cfg.lr_init - cfg.lr_min) * (1.0 + math.cos(math.pi * t_cur / period)) / 2.0


# checkpoints --------------------------------------------------------------

@dataclass
class Checkpoint:
    params: GnnParams
    schedule_cfg: ScheduleConfig
    train_cfg: TrainConfig
    epoch: int
    metric: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)

    @property
    def gnn_cfg(self) -> GnnConfig:
        return self.params.config

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.schedule_cfg.kind, self.schedule_cfg.n_steps)


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    sched = ckpt.schedule()
    body = {
        "gnn": dataclasses.asdict(ckpt.gnn_cfg),
        "schedule": {"config": dataclasses.asdict(ckpt.schedule_cfg), **sched.descriptor()},
        "train": dataclasses.asdict(ckpt.train_cfg),
        "epoch": ckpt.epoch,
        "metric": ckpt.metric,
        "rng": ckpt.rng_state,
        "manifest": [{"name": n, "shape": list(s), "offset": o} for n, s, o in ckpt.params.manifest()],
        "params": encode_array(ckpt.params.flat()),
    }
    return write_artifact(path, CHECKPOINT_FORMAT, body)


def load_checkpoint(path) -> Checkpoint:
    body = read_artifact(path, CHECKPOINT_FORMAT)
    gnn_cfg = section_from_dict(GnnConfig, body["gnn"])
    sched_cfg = section_from_dict(ScheduleConfig, body["schedule"]["config"])
    if make_schedule(sched_cfg.kind, sched_cfg.n_steps).digest() != body["schedule"]["hash"]:
        raise IntegrityError(f"{path}: recomputed noise schedule does not match stored hash")
    params = init_params(gnn_cfg, 0)
    expected = [(n, list(s), o) for n, s, o in params.manifest()]
    stored = [(e["name"], e["shape"], e["offset"]) for e in body["manifest"]]
    if expected != stored:
        raise IntegrityError(f"{path}: parameter manifest does not match the GNN config")
    params.set_flat(decode_array(body["params"]))
    return Checkpoint(params, sched_cfg, section_from_dict(TrainConfig, body["train"]),
                      int(body["epoch"]), body["metric"], body["rng"])


# data ---------------------------------------------------------------------

@dataclass
class GraphSample:
    """One training/validation network with its GSO and expert buffer."""

    network_id: int
    state: NetworkState
    edges: np.ndarray
    buffer: ExpertBuffer


def make_graph_samples(ids: Sequence[int], states: Sequence[NetworkState],
                       buffers: dict[int, ExpertBuffer], net: NetworkConfig) -> list[GraphSample]:
    out = []
    for i in ids:
        if i not in buffers:
            raise KeyError(f"no expert buffer for network {i}")
        out.append(GraphSample(i, states[i], build_gso(states[i], net).edges, buffers[i]))
    return out


def draw_batch(graphs: Sequence[GraphSample], signals: int, schedule: NoiseSchedule,
               p_max: float, rng: np.random.Generator) -> DiffusionBatch:
    x0 = np.stack([to_diffusion_space(g.buffer.draw(rng, signals), p_max) for g in graphs])
    k = rng.integers(1, schedule.K + 1, size=x0.shape[:2])
    eps = rng.standard_normal(x0.shape)
    return DiffusionBatch(x0=x0, k=k, epsilon=eps, gso=np.stack([g.edges for g in graphs]))


# validation ---------------------------------------------------------------

def validate(params: GnnParams, schedule: NoiseSchedule, graphs: Sequence[GraphSample],
             T: int, seed: int, net: NetworkConfig, source: str = "gdm",
             clip_x0: bool = True) -> dict:
    """Rollout metrics at horizon ``T`` pooled over ``graphs``.

    ``source="expert"`` replays the buffers instead of sampling the model.
    """
    reports = []
    for g in graphs:
        if source == "gdm":
            policy = GdmPolicy(params, schedule, clip_x0=clip_x0)
        elif source == "expert":
            policy = ExpertReplay(g.buffer)
        else:
            raise ValueError(f"unknown validation source {source!r}")
        reports.append(rollout(policy, g.state, T, derive_seed(seed, "validate", g.network_id), net,
                               network_id=g.network_id))
    m = metrics(reports, net.f_min, [T])["horizons"][T]
    return {"mean_rate": m["mean_rate"], "p5_rate": m["p5_rate"], "satisfaction": m["satisfaction"]}


def _better(a: dict, b: dict | None) -> bool:
    # higher p5, then higher mean; ties keep the earlier checkpoint
    if b is None:
        return True
    return (a["p5_rate"], a["mean_rate"]) > (b["p5_rate"], b["mean_rate"])


# training -----------------------------------------------------------------

@dataclass
class TrainResult:
    best: Checkpoint
    trace: list[dict]
    final_params: GnnParams
    diverged: bool = False


TRACE_FIELDS = ["epoch", "loss", "lr", "val_mean_rate", "val_p5", "val_feas_frac"]


def _clip(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if not math.isfinite(norm):
        return grad  # adam_step raises on it
    return grad * (max_norm / norm) if norm > max_norm else grad


def loss_and_grad(params: GnnParams, batch: DiffusionBatch, schedule: NoiseSchedule,
                  sched_cfg: ScheduleConfig) -> tuple[float, np.ndarray]:
    params.zero_grad()
    with ad.Tape() as tape:
        loss = ddpm_loss(batch, params, schedule, sched_cfg)
    tape.backward(loss)
    return float(loss.data), params.flat_grad()


def train(train_graphs: Sequence[GraphSample], val_graphs: Sequence[GraphSample],
          gnn_cfg: GnnConfig, sched_cfg: ScheduleConfig, cfg: TrainConfig,
          net: NetworkConfig, seed: int, validate_fn=None) -> TrainResult:
    """Fit the noise predictor; returns the best validated checkpoint and the trace.

    ``validate_fn(params, epoch)`` overrides the rollout-based validation.
    """
    if not train_graphs:
        raise ValueError("no training graphs")
    rng = np.random.default_rng(derive_seed(seed, "train.batches"))
    params = init_params(gnn_cfg, np.random.default_rng(derive_seed(seed, "train.init")))
    schedule = make_schedule(sched_cfg.kind, sched_cfg.n_steps)
    theta = params.flat()
    adam = AdamState.zeros_like(theta)
    n_graphs = len(train_graphs)
    steps_per_epoch = math.ceil(n_graphs / cfg.batch_graphs)
    same_n = len({g.edges.shape[0] for g in train_graphs}) == 1

    best: Checkpoint | None = None
    trace: list[dict] = []
    last_good = theta.copy()
    diverged = False
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n_graphs)
        losses = []
        try:
            for step in range(steps_per_epoch):
                lr = lr_at(epoch - 1 + step / steps_per_epoch, cfg)
                members = [train_graphs[i] for i in order[step * cfg.batch_graphs:(step + 1) * cfg.batch_graphs]]
                groups = [members] if same_n else [[g] for g in members]
                total_loss, total_grad, weight = 0.0, np.zeros_like(theta), 0
                for group in groups:
                    batch = draw_batch(group, cfg.signals_per_graph, schedule, net.p_max, rng)
                    loss, grad = loss_and_grad(params, batch, schedule, sched_cfg)
                    total_loss += loss * len(group)
                    total_grad += grad * len(group)
                    weight += len(group)
                grad = _clip(total_grad / weight, cfg.grad_clip)
                theta, adam = adam_step(theta, grad, adam, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
                params.set_flat(theta)
                losses.append(total_loss / weight)
        except ad.NumericalError as exc:
            log.warning("training diverged at epoch %d: %s", epoch, exc)
            params.set_flat(last_good)
            diverged = True
            break
        last_good = theta.copy()
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr_at(epoch - 1, cfg),
               "val_mean_rate": "", "val_p5": "", "val_feas_frac": ""}
        if epoch % cfg.validate_every == 0 or (epoch == cfg.max_epochs and best is None):
            if validate_fn is not None:
                m = validate_fn(params, epoch)
            else:
                m = validate(params, schedule, val_graphs, cfg.val_horizon,
                             derive_seed(seed, "train.validate"), net, clip_x0=sched_cfg.clip_x0)
            row.update(val_mean_rate=m["mean_rate"], val_p5=m["p5_rate"], val_feas_frac=m["satisfaction"])
            log.info("epoch %d loss %.4f val p5 %.4f mean %.4f sat %.3f", epoch, row["loss"],
                     m["p5_rate"], m["mean_rate"], m["satisfaction"])
            if _better(m, best.metric if best else None):
                best = Checkpoint(params.copy(), sched_cfg, cfg, epoch, dict(m),
                                  {"seed": int(seed), "epoch": epoch})
        trace.append(row)
    if best is None:
        # diverged before the first validation: keep the last good parameters
        best = Checkpoint(params.copy(), sched_cfg, cfg, len(trace), {}, {"seed": int(seed)})
    return TrainResult(best, trace, params, diverged)


def fit_samples(data, edges, gnn_cfg: GnnConfig, sched_cfg: ScheduleConfig, steps: int,
                batch: int, lr: float, seed: int, lr_min: float = 1e-5,
                grad_clip: float = 1.0) -> GnnParams:
    """Fit the noise predictor to fixed diffusion-space samples on one graph.

    ``data`` has shape ``(M, N)``; each step draws ``batch`` rows with
    replacement. The learning rate follows one cosine decay from ``lr`` to
    ``lr_min``. No validation or checkpointing.
    """
    data = np.asarray(data, dtype=np.float64)
    edges = np.asarray(edges, dtype=np.float64)
    rng = np.random.default_rng(derive_seed(seed, "fit.batches"))
    params = init_params(gnn_cfg, np.random.default_rng(derive_seed(seed, "fit.init")))
    schedule = make_schedule(sched_cfg.kind, sched_cfg.n_steps)
    theta = params.flat()
    adam = AdamState.zeros_like(theta)
    for step in range(steps):
        x0 = data[rng.integers(0, len(data), size=batch)][None]
        k = rng.integers(1, schedule.K + 1, size=(1, batch))
        b = DiffusionBatch(x0=x0, k=k, epsilon=rng.standard_normal(x0.shape), gso=edges[None])
        _, grad = loss_and_grad(params, b, schedule, sched_cfg)
        step_lr = lr_min + (lr - lr_min) * (1.0 + math.cos(math.pi * step / steps)) / 2.0
        theta, adam = adam_step(theta, _clip(grad, grad_clip), adam, step_lr)
        params.set_flat(theta)
    return params


def write_trace(trace: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in trace:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
