"""End-to-end experiment: netgen -> expert -> train -> eval.

Every stage has a key (hash of its config sections, seed and input digests).
A stage is skipped when the manifest holds the same key and its outputs
exist. Before a stage runs or is skipped, its input files are checked against
the digests recorded by the producing stage; a mismatch is an
:class:`~gdmpolicy.io.IntegrityError`.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import kernels
from .config import ExperimentConfig, NetworkConfig, config_digest
from .diffusion import make_schedule
from .evaluation import (AveragePower, ExpertReplay, FullPower, GdmPolicy, compare, rollout,
                         write_comparison, write_running_rates)
from .expert import run_expert
from .io import (IntegrityError, file_digest, read_buffers, read_networks, write_buffers,
                 write_networks)
from .netgen import NetworkState, generate_network, sample_fading
from .seeding import derive_seed
from .trainer import (load_checkpoint, make_graph_samples, save_checkpoint, train, write_trace)

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
NETWORKS = "networks.json"
BUFFERS = "buffers.json"
CHECKPOINT = "checkpoint.json"
TRACE = "train_trace.csv"
EVAL_DIR = "eval"
CALIBRATION_DRAWS = 2000


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, *zip(*items)))


# stage bodies (also used by the standalone CLI subcommands) ---------------

def split_labels(cfg: ExperimentConfig, count: int | None = None) -> list[str]:
    from .config import Splits

    splits = cfg.splits if count in (None, cfg.splits.total) else Splits.from_ratio(count)
    return ["train"] * splits.train + ["val"] * splits.val + ["test"] * splits.test


def make_networks(cfg: ExperimentConfig, master_seed: int, count: int | None = None):
    labels = split_labels(cfg, count)
    states = [generate_network(cfg.network, derive_seed(master_seed, "netgen", i))
              for i in range(len(labels))]
    return states, labels


def full_power_ergodic_rates(state: NetworkState, net: NetworkConfig, draws: int, seed: int) -> np.ndarray:
    """Monte Carlo fading average of full-power rates."""
    rng = np.random.default_rng(seed)
    scale = net.p_max / net.noise_power
    ones = np.ones(state.n)
    acc = np.zeros(state.n)
    for _ in range(draws):
        acc += kernels.rates(ones, sample_fading(state, rng).gains_tilde * scale)
    return acc / draws


def calibrate_f_min(cfg: ExperimentConfig, states, labels, master_seed: int) -> float:
    """Percentile of full-power ergodic rates pooled over the training networks."""
    from .evaluation import nearest_rank

    rates = [full_power_ergodic_rates(s, cfg.network, CALIBRATION_DRAWS,
                                      derive_seed(master_seed, "calibrate", i))
             for i, (s, lab) in enumerate(zip(states, labels)) if lab == "train"]
    return nearest_rank(np.concatenate(rates), cfg.f_min_percentile)


def resolve_f_min(cfg: ExperimentConfig, states, labels, master_seed: int) -> float:
    if cfg.f_min_mode == "fixed":
        return cfg.network.f_min
    return calibrate_f_min(cfg, states, labels, master_seed)


def _expert_job(state, expert_cfg, net, seed, network_id):
    return run_expert(state, expert_cfg, net, seed, network_id=network_id)


def make_buffers(cfg: ExperimentConfig, states, net: NetworkConfig, master_seed: int, jobs: int = 1):
    items = [(s, cfg.expert, net, derive_seed(master_seed, "expert", i), i) for i, s in enumerate(states)]
    return _map(_expert_job, items, jobs)


def _ids(labels, split):
    return [i for i, lab in enumerate(labels) if lab == split]


def fit(cfg: ExperimentConfig, states, labels, buffers, net: NetworkConfig, master_seed: int):
    tr = make_graph_samples(_ids(labels, "train"), states, buffers, net)
    va = make_graph_samples(_ids(labels, "val"), states, buffers, net)
    return train(tr, va, cfg.gnn, cfg.schedule, cfg.train, net, derive_seed(master_seed, "train"))


SOURCES = ("gdm", "expert", "average_power", "full_power")


def _eval_job(ckpt_params, sched_cfg, replay_mode, gdm_mode, state, buffer, net, T, seed, network_id):
    schedule = make_schedule(sched_cfg.kind, sched_cfg.n_steps)
    policies = {
        "gdm": GdmPolicy(ckpt_params, schedule, mode=gdm_mode, clip_x0=sched_cfg.clip_x0),
        "expert": ExpertReplay(buffer, mode=replay_mode),
        "average_power": AveragePower(buffer),
        "full_power": FullPower(),
    }
    return {tag: rollout(policies[tag], state, T, seed, net, network_id) for tag in SOURCES}


def evaluate(cfg: ExperimentConfig, ckpt, states, labels, buffers, net: NetworkConfig,
             master_seed: int, out_dir, T: int | None = None, horizons=None,
             split: str = "test", jobs: int = 1) -> list[dict]:
    T = T or cfg.eval.horizon
    horizons = list(horizons or cfg.eval.checkpoints)
    ids = _ids(labels, split)
    items = [(ckpt.params, ckpt.schedule_cfg, cfg.eval.replay_mode, cfg.eval.gdm_mode, states[i],
              buffers[i], net, T, derive_seed(master_seed, "eval", i), i) for i in ids]
    per_network = _map(_eval_job, items, jobs)
    by_source = {tag: [r[tag] for r in per_network] for tag in SOURCES}
    rows = compare(by_source, net.f_min, horizons)
    out_dir = Path(out_dir)
    rates_dir = out_dir / "rates"
    rates_dir.mkdir(parents=True, exist_ok=True)
    for tag, reports in by_source.items():
        for rep in reports:
            write_running_rates(rep, rates_dir / f"net{rep.network_id:03d}_{tag}.csv")
    extra = {"f_min": net.f_min, "horizons": horizons, "T": T, "split": split,
             "networks": ids, "gdm_mode": cfg.eval.gdm_mode, "replay_mode": cfg.eval.replay_mode,
             "checkpoint_epoch": ckpt.epoch}
    write_comparison(rows, out_dir, extra)
    return rows


# pipeline -------------------------------------------------------------------

def _stage_key(name: str, sections: dict, seed: int, inputs: dict[str, str]) -> str:
    return config_digest({"stage": name, "sections": sections, "seed": seed, "inputs": inputs})


def _outputs_digest(out: Path, names) -> dict[str, str]:
    return {n: file_digest(out / n) for n in names}


def _eval_outputs(out: Path) -> list[str]:
    d = out / EVAL_DIR
    return sorted(str(p.relative_to(out)) for p in d.rglob("*") if p.is_file())


class Pipeline:
    def __init__(self, cfg: ExperimentConfig, out_dir, jobs: int = 1):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.jobs = jobs
        self.seed = cfg.seed
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / MANIFEST
        # stage keys cover their own config sections, seed and inputs, so records
        # from a run with a different overall config can still be reused
        self.old = json.loads(path.read_text()) if path.exists() else {}
        self.manifest = {
            "config_hash": cfg.digest(),
            "master_seed": self.seed,
            "kernel_backend": kernels.BACKEND,
            "stages": {},
        }
        self.executed: list[str] = []
        self.timings: dict[str, float] = {}  # wall seconds per executed stage; not in the manifest

    def _produced(self, name: str) -> str:
        for stage in self.manifest["stages"].values():
            if name in stage["outputs"]:
                return stage["outputs"][name]
        raise IntegrityError(f"{name} was not produced by an earlier stage")

    def _verify_inputs(self, stage: str, names) -> dict[str, str]:
        digests = {}
        for n in names:
            expected = self._produced(n)
            actual = file_digest(self.out / n) if (self.out / n).exists() else None
            if actual != expected:
                raise IntegrityError(f"stage {stage}: input {n} digest mismatch")
            digests[n] = actual
        return digests

    def _stage(self, name: str, sections: dict, inputs: list[str], outputs, body) -> None:
        stage_seed = derive_seed(self.seed, name)
        try:
            in_digests = self._verify_inputs(name, inputs)
        except IntegrityError as exc:
            self._error(name, exc)
            raise
        key = _stage_key(name, sections, stage_seed, in_digests)
        prev = self.old.get("stages", {}).get(name)
        if prev and prev["key"] == key and all((self.out / n).exists() for n in prev["outputs"]):
            log.info("stage %s: up to date, skipped", name)
            record = prev
        else:
            log.info("stage %s: running", name)
            start = time.perf_counter()
            try:
                body()
            except Exception as exc:
                self._error(name, exc)
                raise
            names = outputs() if callable(outputs) else outputs
            record = {"key": key, "seed": stage_seed, "inputs": in_digests,
                      "outputs": _outputs_digest(self.out, names)}
            self.executed.append(name)
            self.timings[name] = time.perf_counter() - start
        self.manifest["stages"][name] = record
        self._write_manifest()

    def _error(self, stage: str, exc: BaseException) -> None:
        # partial artifacts stay on disk; the record says where the run stopped
        record = {"stage": stage, "error": type(exc).__name__, "message": str(exc)}
        (self.out / "error.json").write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")

    def _write_manifest(self) -> None:
        (self.out / MANIFEST).write_text(json.dumps(self.manifest, indent=1, sort_keys=True) + "\n")

    def run(self) -> dict:
        cfg = self.cfg
        asdict = dataclasses.asdict
        out = self.out

        def netgen():
            states, labels = make_networks(cfg, self.seed)
            write_networks(out / NETWORKS, cfg.network, states, labels)

        self._stage("netgen", {"network": asdict(cfg.network), "splits": asdict(cfg.splits)},
                    [], [NETWORKS], netgen)

        def expert():
            net_cfg, states, labels = read_networks(out / NETWORKS)
            f_min = resolve_f_min(cfg, states, labels, self.seed)
            net = dataclasses.replace(net_cfg, f_min=f_min)
            buffers = make_buffers(cfg, states, net, self.seed, self.jobs)
            write_buffers(out / BUFFERS, buffers, f_min, file_digest(out / NETWORKS))

        self._stage("expert", {"expert": asdict(cfg.expert), "f_min_mode": cfg.f_min_mode,
                               "f_min_percentile": cfg.f_min_percentile},
                    [NETWORKS], [BUFFERS], expert)

        def train_stage():
            net, states, labels, buffers = self._load_data()
            result = fit(cfg, states, labels, buffers, net, self.seed)
            save_checkpoint(result.best, out / CHECKPOINT)
            write_trace(result.trace, out / TRACE)

        self._stage("train", {"gnn": asdict(cfg.gnn), "schedule": asdict(cfg.schedule),
                              "train": asdict(cfg.train)},
                    [NETWORKS, BUFFERS], [CHECKPOINT, TRACE], train_stage)

        def eval_stage():
            net, states, labels, buffers = self._load_data()
            ckpt = load_checkpoint(out / CHECKPOINT)
            shutil.rmtree(out / EVAL_DIR, ignore_errors=True)
            evaluate(cfg, ckpt, states, labels, buffers, net, self.seed, out / EVAL_DIR, jobs=self.jobs)

        self._stage("eval", {"eval": asdict(cfg.eval)}, [NETWORKS, BUFFERS, CHECKPOINT],
                    lambda: _eval_outputs(out), eval_stage)
        return self.manifest

    def _load_data(self):
        net_cfg, states, labels = read_networks(self.out / NETWORKS)
        buffers, f_min = read_buffers(self.out / BUFFERS)
        return dataclasses.replace(net_cfg, f_min=f_min), states, labels, buffers


def run_pipeline(cfg: ExperimentConfig, out_dir, jobs: int = 1) -> Pipeline:
    p = Pipeline(cfg, out_dir, jobs)
    p.run()
    return p


def manifest_digest(out_dir) -> str:
    return hashlib.sha256((Path(out_dir) / MANIFEST).read_bytes()).hexdigest()
