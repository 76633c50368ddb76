"""Self-describing JSON artifacts with base64 float64 payloads.

Every artifact is ``{"format", "version", "sha256", "body"}`` where
``sha256`` covers the canonical JSON of ``body``; readers verify it.
"""

from __future__ import annotations

import base64
import dataclasses
import hashlib
import json
import os
from pathlib import Path
from typing import Any

import numpy as np

from .config import NetworkConfig, config_digest
from .expert import ExpertBuffer
from .netgen import NetworkState

VERSION = 1


class IntegrityError(RuntimeError):
    """An artifact failed its checksum or does not match its manifest entry."""


def encode_array(a) -> dict[str, Any]:
    a = np.asarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes(order="C")).decode("ascii")}


def decode_array(d: dict[str, Any]) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(np.float64)


def _canonical(body) -> bytes:
    return json.dumps(body, sort_keys=True, separators=(",", ":")).encode()


def write_artifact(path, fmt: str, body: dict[str, Any]) -> str:
    """Write atomically; returns the file's sha256."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"format": fmt, "version": VERSION,
           "sha256": hashlib.sha256(_canonical(body)).hexdigest(), "body": body}
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=True, indent=1))
    os.replace(tmp, path)
    return file_digest(path)


def read_artifact(path, fmt: str) -> dict[str, Any]:
    try:
        doc = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise IntegrityError(f"{path}: unreadable artifact ({exc})") from exc
    if doc.get("format") != fmt:
        raise IntegrityError(f"{path}: expected format {fmt!r}, found {doc.get('format')!r}")
    if doc.get("version") != VERSION:
        raise IntegrityError(f"{path}: unsupported version {doc.get('version')!r}")
    if hashlib.sha256(_canonical(doc["body"])).hexdigest() != doc.get("sha256"):
        raise IntegrityError(f"{path}: payload digest mismatch")
    return doc["body"]


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# networks -----------------------------------------------------------------

def write_networks(path, config: NetworkConfig, states: list[NetworkState],
                   splits: list[str]) -> str:
    cfg = dataclasses.asdict(config)
    digest = config_digest(cfg)
    records = [
        {"index": i, "split": split, "seed": s.seed, "config_hash": digest,
         "tx_pos": encode_array(s.tx_pos), "rx_pos": encode_array(s.rx_pos),
         "gains_h": encode_array(s.gains_h)}
        for i, (s, split) in enumerate(zip(states, splits))
    ]
    return write_artifact(path, "gdmpolicy.networks", {"config": cfg, "networks": records})


def read_networks(path) -> tuple[NetworkConfig, list[NetworkState], list[str]]:
    body = read_artifact(path, "gdmpolicy.networks")
    config = NetworkConfig(**body["config"])
    states, splits = [], []
    for rec in body["networks"]:
        states.append(NetworkState(gains_h=decode_array(rec["gains_h"]),
                                   tx_pos=decode_array(rec["tx_pos"]),
                                   rx_pos=decode_array(rec["rx_pos"]),
                                   seed=int(rec["seed"])))
        splits.append(rec["split"])
    return config, states, splits


# buffers ------------------------------------------------------------------

def write_buffers(path, buffers: list[ExpertBuffer], f_min: float, networks_digest: str = "") -> str:
    records = {
        str(b.network_id): {"samples": encode_array(b.samples), "lambdas": encode_array(b.lambdas),
                            "feasibility": encode_array(b.feasibility)}
        for b in buffers
    }
    body = {"f_min": f_min, "networks_digest": networks_digest, "buffers": records}
    return write_artifact(path, "gdmpolicy.buffers", body)


def read_buffers(path) -> tuple[dict[int, ExpertBuffer], float]:
    body = read_artifact(path, "gdmpolicy.buffers")
    f_min = float(body["f_min"])
    out = {}
    for key, rec in body["buffers"].items():
        out[int(key)] = ExpertBuffer(samples=decode_array(rec["samples"]), network_id=int(key),
                                     lambdas=decode_array(rec["lambdas"]),
                                     feasibility=decode_array(rec["feasibility"]), f_min=f_min)
    return out, f_min
