"""MLP trunk, parameter storage and the output-head conventions per model kind."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Value

CHECKPOINT_VERSION = 1
MODEL_KINDS = ("comet", "node", "hnn")


class ConfigError(ValueError):
    """Invalid model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    model_kind: str = "comet"
    n_s: int = 2
    n_c: int = 0
    n_x: int = 0
    hidden_layers: int = 3
    hidden_width: int = 250
    seed: int = 0

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.model_kind!r}")
        if self.n_s < 1 or self.n_x < 0 or self.hidden_layers < 0 or self.hidden_width < 1:
            raise ConfigError(f"invalid sizes in {self}")
        if self.model_kind == "comet" and not 0 <= self.n_c <= self.n_s - 1:
            raise ConfigError(
                f"comet needs 0 <= n_c <= n_s - 1, got n_c={self.n_c}, n_s={self.n_s}")
        if self.model_kind != "comet" and self.n_c != 0:
            raise ConfigError(f"n_c only applies to comet, got n_c={self.n_c}")
        if self.model_kind == "hnn" and self.n_s % 2:
            raise ConfigError(f"hnn needs an even number of states, got n_s={self.n_s}")

    @property
    def n_in(self) -> int:
        return self.n_s + self.n_x

    @property
    def n_out(self) -> int:
        if self.model_kind == "comet":
            return self.n_s + self.n_c
        if self.model_kind == "node":
            return self.n_s
        return 1

    def layer_sizes(self) -> list[int]:
        return [self.n_in] + [self.hidden_width] * self.hidden_layers + [self.n_out]


@dataclass
class ParamStore:
    """Flat float64 parameter vector with a (name, offset, shape) layer table."""

    config: ModelConfig
    flat: np.ndarray
    layout: list[tuple[str, int, tuple[int, ...]]] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        end = 0
        for name, offset, shape in self.layout:
            if offset != end:
                raise ValueError(f"layer {name} does not start where the previous one ends")
            end = offset + int(np.prod(shape))
        if end != self.flat.size:
            raise ValueError(f"layout covers {end} values, vector has {self.flat.size}")

    def __getitem__(self, name: str) -> np.ndarray:
        for n, offset, shape in self.layout:
            if n == name:
                return self.flat[offset:offset + int(np.prod(shape))].reshape(shape)
        raise KeyError(name)

    def tensors(self, requires_grad: bool = False) -> list[Value]:
        """One value per layer slice, in layout order."""
        make = ad.leaf if requires_grad else ad.const
        return [make(self.flat[o:o + int(np.prod(s))].reshape(s)) for _, o, s in self.layout]

    def with_flat(self, flat: np.ndarray) -> "ParamStore":
        return ParamStore(self.config, np.array(flat, dtype=np.float64), list(self.layout),
                          dict(self.meta))

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        if meta:
            self.meta.update(meta)
        doc = {
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "layers": [[n, o, list(s)] for n, o, s in self.layout],
            "params": self.flat.tolist(),
            "meta": self.meta,
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path: str | Path) -> "ParamStore":
        doc = json.loads(Path(path).read_text())
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
        layout = [(n, int(o), tuple(s)) for n, o, s in doc["layers"]]
        return cls(ModelConfig(**doc["config"]), np.array(doc["params"], dtype=np.float64), layout,
                   doc.get("meta", {}))


def init_params(config: ModelConfig) -> ParamStore:
    """Glorot-uniform weights, zero biases; deterministic in ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    sizes = config.layer_sizes()
    layout, chunks, offset = [], [], 0
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-a, a, size=(fan_in, fan_out))
        layout.append((f"W{k}", offset, (fan_in, fan_out)))
        offset += w.size
        layout.append((f"b{k}", offset, (fan_out,)))
        offset += fan_out
        chunks += [w.ravel(), np.zeros(fan_out)]
    return ParamStore(config, np.concatenate(chunks), layout)


def _weights(params) -> list[Value]:
    if isinstance(params, ParamStore):
        return params.tensors()
    return list(params)


def mlp_forward(params, inp) -> Value:
    """logsigmoid MLP on the last axis of ``inp``; the output layer is linear."""
    weights = _weights(params)
    h = inp if isinstance(inp, Value) else ad.const(inp)
    n_in = weights[0].shape[0]
    if h.shape[-1] != n_in:
        raise ad.ShapeError("mlp_forward", (h.shape, weights[0].shape),
                            f"expected {n_in} input features")
    n_layers = len(weights) // 2
    for k in range(n_layers):
        h = ad.add(ad.matmul(h, weights[2 * k]), weights[2 * k + 1])
        if k < n_layers - 1:
            h = ad.logsigmoid(h)
    return h


def _with_external(s, x, n_x: int):
    """Concatenate external input ``x`` onto the state along the last axis."""
    if n_x == 0:
        if x is not None and np.size(x.data if isinstance(x, Value) else x):
            raise ad.ShapeError("external input", (np.shape(x),), "model takes no external input")
        return s
    if x is None:
        raise ad.ShapeError("external input", ((),), f"model expects {n_x} external inputs")
    xv = x if isinstance(x, Value) else ad.const(x)
    xv = ad.broadcast_to(xv, s.shape[:-1] + (n_x,))
    return ad.concat([s, xv], axis=-1)


def comet_heads(params, s, x=None, config: ModelConfig | None = None) -> tuple[Value, Value]:
    """Split one forward pass into the dynamics guess and the constants."""
    config = config or params.config
    sv = s if isinstance(s, Value) else ad.const(s)
    out = mlp_forward(params, _with_external(sv, x, config.n_x))
    return out[..., :config.n_s], out[..., config.n_s:]


def node_dynamics(params, s, x=None, config: ModelConfig | None = None) -> Value:
    config = config or params.config
    sv = s if isinstance(s, Value) else ad.const(s)
    return mlp_forward(params, _with_external(sv, x, config.n_x))


def hamiltonian(params, s, x=None, config: ModelConfig | None = None) -> Value:
    config = config or params.config
    sv = s if isinstance(s, Value) else ad.const(s)
    return mlp_forward(params, _with_external(sv, x, config.n_x))[..., 0]


def hnn_dynamics(params, s, x=None, config: ModelConfig | None = None) -> Value:
    """(dH/dp, -dH/dq) with the first half of the state taken as positions."""
    config = config or params.config
    s_in = ad.leaf(s.data if isinstance(s, Value) else s)
    h = hamiltonian(params, s_in, x, config)
    (dh,) = ad.grad(ad.sum(h), [s_in], create_graph=True)
    half = config.n_s // 2
    return ad.concat([dh[..., half:], ad.neg(dh[..., :half])], axis=-1)
