"""Graph-filter noise predictor conditioned on a graph shift operator.

Shapes: a batch of node signals ``x_k`` has shape ``G + S + (N,)`` and the
GSO has shape ``G + (N, N)`` (its batch dims prefix those of ``x_k``, so one
graph may condition many signals). Timesteps ``k`` broadcast to
``x_k.shape[:-1]``.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import GnnConfig

NORM_EPS = 1e-12


def sinusoidal_embed(k, dim: int) -> np.ndarray:
    """Sinusoidal embedding; returns ``k.shape + (dim,)``.

    Component ``2i`` is ``sin(k / 10000**(2i/dim))`` and ``2i+1`` the cosine
    of the same argument.
    """
    k = np.asarray(k, dtype=np.float64)
    half = np.arange(0, dim, 2, dtype=np.float64)
    freqs = 1.0 / 10000.0 ** (half / dim)
    arg = k[..., None] * freqs
    out = np.empty(k.shape + (dim,))
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg[..., : dim // 2])
    return out


@dataclass
class GnnParams:
    config: GnnConfig
    tensors: "OrderedDict[str, Tensor]"

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def manifest(self) -> list[tuple[str, tuple[int, ...], int]]:
        """(name, shape, offset) of every tensor in the flat vector."""
        out, offset = [], 0
        for name, t in self.tensors.items():
            out.append((name, t.shape, offset))
            offset += t.data.size
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.tensors.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.count():
            raise ValueError("flat vector has the wrong length")
        for name, shape, offset in self.manifest():
            size = int(np.prod(shape, dtype=np.int64))
            self.tensors[name].data = vec[offset: offset + size].reshape(shape).copy()

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([
            (t.grad if t.grad is not None else np.zeros_like(t.data)).ravel()
            for t in self.tensors.values()
        ])

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "GnnParams":
        return GnnParams(
            self.config,
            OrderedDict((n, Tensor(t.data.copy(), requires_grad=True, name=n))
                        for n, t in self.tensors.items()),
        )


def init_params(config: GnnConfig, seed) -> GnnParams:
    """Uniform(+-1/sqrt(fan_in)) weights; normalization gain 1 and bias 0."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tensors: OrderedDict[str, Tensor] = OrderedDict()

    def uniform(name, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        tensors[name] = Tensor(rng.uniform(-bound, bound, size=shape), True, name)

    f0 = config.embed_dim
    uniform("readin.w", (f0,), 1)
    uniform("readin.b", (f0,), 1)
    uniform("time.w1", (f0, f0), f0)
    uniform("time.b1", (f0,), f0)
    uniform("time.w2", (f0, f0), f0)
    uniform("time.b2", (f0,), f0)
    f_in = f0
    for layer, (f_out, hops) in enumerate(zip(config.layer_features, config.layer_hops)):
        for m in range(hops + 1):
            uniform(f"gcn{layer}.tap{m}", (f_in, f_out), f_in)
        tensors[f"gcn{layer}.gain"] = Tensor(np.ones(f_out), True, f"gcn{layer}.gain")
        tensors[f"gcn{layer}.bias"] = Tensor(np.zeros(f_out), True, f"gcn{layer}.bias")
        f_in = f_out
    uniform("readout.w1", (f_in, f_in), f_in)
    uniform("readout.b1", (f_in,), f_in)
    uniform("readout.w2", (f_in, 1), f_in)
    uniform("readout.b2", (1,), f_in)
    return GnnParams(config, tensors)


def _act(params: GnnParams):
    return ad.ACTIVATIONS[params.config.nonlinearity]


def time_features(k, params: GnnParams) -> Tensor:
    """MLP-transformed sinusoidal embedding of ``k``; shape ``k.shape + (F0,)``."""
    act = _act(params)
    emb = sinusoidal_embed(k, params.config.embed_dim)
    h = act(ad.matmul(_rows(emb), params["time.w1"]) + params["time.b1"])
    out = ad.matmul(h, params["time.w2"]) + params["time.b2"]
    return ad.reshape(out, emb.shape)


def _rows(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def read_in(x_k, k, params: GnnParams) -> Tensor:
    """Lift node values to ``F0`` features and add the shared time features."""
    x = np.asarray(x_k.data if isinstance(x_k, Tensor) else x_k, dtype=np.float64)
    lifted = ad.mul(x[..., None], params["readin.w"]) + params["readin.b"]
    t = time_features(np.asarray(k), params)
    t = ad.reshape(t, t.shape[:-1] + (1, t.shape[-1]))
    return ad.add(lifted, t)


def gcn_layer(z: Tensor, gso, params: GnnParams, layer: int) -> Tensor:
    """``act(layer_norm(sum_m H^m Z Theta_m))`` with iterated shifts."""
    acc = filter_sum(z, gso, params, layer)
    normed = ad.layer_normalize(acc, params[f"gcn{layer}.gain"], params[f"gcn{layer}.bias"], NORM_EPS)
    return _act(params)(normed)


def filter_sum(z: Tensor, gso, params: GnnParams, layer: int) -> Tensor:
    """Pre-normalization filter output ``sum_m H^m Z Theta_m`` of ``layer``."""
    hops = params.config.layer_hops[layer]
    h = ad.as_tensor(gso)
    shifted = z
    acc = ad.matmul(z, params[f"gcn{layer}.tap0"])
    for m in range(1, hops + 1):
        shifted = ad.graph_shift(h, shifted)
        acc = ad.add(acc, ad.matmul(shifted, params[f"gcn{layer}.tap{m}"]))
    return acc


def readout(z: Tensor, params: GnnParams) -> Tensor:
    act = _act(params)
    h = act(ad.matmul(z, params["readout.w1"]) + params["readout.b1"])
    out = ad.matmul(h, params["readout.w2"]) + params["readout.b2"]
    return ad.reshape(out, out.shape[:-1])


def predict_noise(x_k, k, gso, params: GnnParams) -> Tensor:
    """Noise estimate with the same shape as ``x_k``.

    ``gso`` may be a :class:`~gdmpolicy.netgen.Gso` or an edge array.
    """
    edges = getattr(gso, "edges", gso)
    z = read_in(x_k, k, params)
    for layer in range(params.config.n_layers):
        z = gcn_layer(z, edges, params, layer)
    return readout(z, params)
