"""Small multilayer-perceptron engine: forward pass, exact reverse-mode
gradients, Adam, and a bit-exact checkpoint format.

Everything runs in float64. Inputs may be a single vector ``(d,)`` or a batch
``(..., d)``; leading axes are flattened internally and restored on output.
"""

from __future__ import annotations

import enum
import io
import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import kernels
from .errors import ConfigError, NonFiniteError, UsageError

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


class Activation(str, enum.Enum):
    ELU = "elu"
    TANH = "tanh"
    IDENTITY = "identity"


@dataclass(frozen=True)
class MLPSpec:
    """Layer sizes ``(input, hidden..., output)``, hidden activation and
    named output heads ``(name, start, stop)`` that partition the output."""

    layer_sizes: tuple[int, ...]
    activation: Activation = Activation.ELU
    heads: tuple[tuple[str, int, int], ...] = ()

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "activation", Activation(self.activation))
        if len(sizes) < 2:
            raise ConfigError("an MLP needs an input size and at least one layer")
        if any(s <= 0 for s in sizes):
            raise ConfigError(f"layer sizes must be positive, got {sizes}")
        heads = tuple((str(n), int(a), int(b)) for n, a, b in self.heads)
        object.__setattr__(self, "heads", heads)
        if heads:
            cursor = 0
            for name, start, stop in sorted(heads, key=lambda h: h[1]):
                if start != cursor or stop <= start:
                    raise ConfigError(f"heads must partition the output; bad head {name!r}")
                cursor = stop
            if cursor != sizes[-1]:
                raise ConfigError("heads must cover the whole output dimension")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def head(self, name: str) -> slice:
        for n, a, b in self.heads:
            if n == name:
                return slice(a, b)
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation.value,
            "heads": [list(h) for h in self.heads],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MLPSpec":
        return cls(tuple(d["layer_sizes"]), Activation(d["activation"]),
                   tuple(tuple(h) for h in d.get("heads", ())))


def mlp_spec(in_dim: int, hidden, heads, activation=Activation.ELU) -> MLPSpec:
    """Build a spec from hidden sizes and either an output size or a
    ``{head_name: size}`` mapping (insertion order gives the layout)."""
    if isinstance(heads, int):
        out, head_tuple = heads, ()
    else:
        cursor, parts = 0, []
        for name, size in heads.items():
            parts.append((name, cursor, cursor + int(size)))
            cursor += int(size)
        out, head_tuple = cursor, tuple(parts)
    return MLPSpec((int(in_dim), *[int(h) for h in hidden], out), activation, head_tuple)


def _param_layout(spec: MLPSpec) -> dict[str, tuple[int, tuple[int, ...]]]:
    index, offset = {}, 0
    for layer in range(spec.num_layers):
        fan_in, fan_out = spec.layer_sizes[layer], spec.layer_sizes[layer + 1]
        index[f"W{layer}"] = (offset, (fan_in, fan_out))
        offset += fan_in * fan_out
        index[f"b{layer}"] = (offset, (fan_out,))
        offset += fan_out
    return index


class ParamVector:
    """Flat float64 storage with a ``name -> (offset, shape)`` index."""

    __slots__ = ("values", "index")

    def __init__(self, values: np.ndarray, index: Mapping[str, tuple[int, tuple[int, ...]]]):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1:
            raise ConfigError("parameter values must be a flat vector")
        covered = np.zeros(values.size, dtype=np.int64)
        for name, (offset, shape) in index.items():
            size = int(np.prod(shape, dtype=np.int64))
            if offset < 0 or offset + size > values.size:
                raise ConfigError(f"index entry {name!r} falls outside the vector")
            covered[offset:offset + size] += 1
        if values.size and not np.all(covered == 1):
            raise ConfigError("parameter index must cover the vector exactly once")
        self.values = values
        self.index = {k: (int(o), tuple(int(s) for s in sh)) for k, (o, sh) in index.items()}

    @classmethod
    def zeros(cls, spec: MLPSpec) -> "ParamVector":
        index = _param_layout(spec)
        total = sum(int(np.prod(sh)) for _, sh in index.values())
        return cls(np.zeros(total), index)

    def __getitem__(self, name: str) -> np.ndarray:
        offset, shape = self.index[name]
        size = int(np.prod(shape, dtype=np.int64))
        return self.values[offset:offset + size].reshape(shape)

    def __len__(self) -> int:
        return self.values.size

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.index)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        if np.shape(values) != self.values.shape:
            raise ConfigError("replacement values have the wrong size")
        return ParamVector(np.array(values, dtype=np.float64), self.index)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.index == other.index and np.array_equal(self.values, other.values)

    def __repr__(self) -> str:
        return f"ParamVector(n={self.values.size}, names={list(self.index)})"


def init_params(spec: MLPSpec, rng: np.random.Generator, out_scale: float = 1.0) -> ParamVector:
    """LeCun-normal weights, zero biases; the final layer is scaled by ``out_scale``."""
    params = ParamVector.zeros(spec)
    for layer in range(spec.num_layers):
        W = params[f"W{layer}"]
        W[...] = rng.standard_normal(W.shape) / np.sqrt(W.shape[0])
        if layer == spec.num_layers - 1:
            W *= out_scale
    return params


def _activate(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.ELU:
        return kernels.elu_forward(z)
    if kind is Activation.TANH:
        return np.tanh(z)
    return z


def _activate_grad(kind: Activation, z: np.ndarray, y: np.ndarray, g: np.ndarray) -> np.ndarray:
    if kind is Activation.ELU:
        return kernels.elu_backward(z, g)
    if kind is Activation.TANH:
        return g * (1.0 - y * y)
    return g


@dataclass
class Tape:
    """Activations recorded by a forward pass, consumed by ``mlp_backward``."""

    spec: MLPSpec
    lead_shape: tuple[int, ...]
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)


def mlp_forward(spec: MLPSpec, params: ParamVector, x, record: bool = False):
    """Evaluate the network. Returns the output, or ``(output, tape)`` when
    ``record`` is set."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] != spec.input_dim:
        raise ConfigError(f"input has trailing size {x.shape[-1:]} but the net expects {spec.input_dim}")
    lead = x.shape[:-1]
    h = x.reshape(-1, spec.input_dim)
    tape = Tape(spec, lead) if record else None
    last = spec.num_layers - 1
    for layer in range(spec.num_layers):
        z = h @ params[f"W{layer}"] + params[f"b{layer}"]
        y = z if layer == last else _activate(spec.activation, z)
        if tape is not None:
            tape.inputs.append(h)
            tape.pre.append(z)
            tape.post.append(y)
        h = y
    out = h.reshape(lead + (spec.output_dim,))
    return (out, tape) if record else out


def mlp_backward(spec: MLPSpec, params: ParamVector, tape: Tape | None, cotangent):
    """Gradients of ``<output, cotangent>`` summed over the batch.

    Returns ``(grad_values, input_cotangent)`` where ``grad_values`` is a flat
    array laid out like ``params.values``.
    """
    if tape is None or not tape.inputs:
        raise UsageError("mlp_backward needs a tape from mlp_forward(..., record=True)")
    if tape.spec != spec:
        raise UsageError("tape was recorded for a different network spec")
    g = np.asarray(cotangent, dtype=np.float64).reshape(-1, spec.output_dim)
    if g.shape[0] != tape.inputs[0].shape[0]:
        raise ConfigError("cotangent batch does not match the recorded forward pass")
    grads = np.zeros_like(params.values)
    index = params.index
    last = spec.num_layers - 1
    for layer in range(last, -1, -1):
        if layer != last:
            g = _activate_grad(spec.activation, tape.pre[layer], tape.post[layer], g)
        h = tape.inputs[layer]
        w_off, w_shape = index[f"W{layer}"]
        b_off, b_shape = index[f"b{layer}"]
        grads[w_off:w_off + w_shape[0] * w_shape[1]] = (h.T @ g).ravel()
        grads[b_off:b_off + b_shape[0]] = g.sum(axis=0)
        g = g @ params[f"W{layer}"].T
    return grads, g.reshape(tape.lead_shape + (spec.input_dim,))


# ---------------------------------------------------------------------------
# bounded log-stddev heads

def soft_clamp(x, lo: float = LOG_STD_MIN, hi: float = LOG_STD_MAX):
    """Smooth map of R onto (lo, hi) with soft_clamp(0) == 0 for the default bounds."""
    shift = np.log(-lo / hi) if lo < 0 < hi else 0.0
    return lo + (hi - lo) / (1.0 + np.exp(-(np.asarray(x, dtype=np.float64) + shift)))


def soft_clamp_grad(x, lo: float = LOG_STD_MIN, hi: float = LOG_STD_MAX):
    shift = np.log(-lo / hi) if lo < 0 < hi else 0.0
    s = 1.0 / (1.0 + np.exp(-(np.asarray(x, dtype=np.float64) + shift)))
    return (hi - lo) * s * (1.0 - s)


# ---------------------------------------------------------------------------
# optimizer


class Direction(enum.Enum):
    ASCENT = 1
    DESCENT = -1


@dataclass
class OptimizerState:
    lr: float
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamVector, lr: float, **kw) -> "OptimizerState":
        return cls(float(lr), np.zeros_like(params.values), np.zeros_like(params.values), **kw)


def optimizer_step(state: OptimizerState, params: ParamVector, grads, direction: Direction) -> ParamVector:
    """One Adam step. Mutates ``state``; returns a new ParamVector.

    Raises NonFiniteError (leaving ``state`` untouched) if any gradient entry is
    not finite.
    """
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != params.values.shape or state.m.shape != g.shape:
        raise ConfigError("gradient, optimizer state and parameters must have equal shapes")
    if not np.all(np.isfinite(g)):
        raise NonFiniteError(f"non-finite gradient ({np.count_nonzero(~np.isfinite(g))} entries); step rejected")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params.with_values(params.values + direction.value * update)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(path, components: Mapping[str, tuple[MLPSpec, ParamVector]], manifest: Mapping | None = None):
    """Write specs, name indices and raw float64 values. Round trips bit-exactly."""
    header = {
        "format": "hierkl-checkpoint",
        "version": CHECKPOINT_VERSION,
        "components": {
            name: {"spec": spec.to_dict(),
                   "index": {k: [o, list(sh)] for k, (o, sh) in params.index.items()}}
            for name, (spec, params) in components.items()
        },
        "manifest": dict(manifest or {}),
    }
    arrays = {f"values/{name}": params.values for name, (_, params) in components.items()}
    buf = io.BytesIO()
    np.savez(buf, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, tuple[MLPSpec, ParamVector]], dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        if header.get("format") != "hierkl-checkpoint":
            raise ConfigError(f"{path} is not a hierkl checkpoint")
        if header["version"] > CHECKPOINT_VERSION:
            raise ConfigError(f"checkpoint version {header['version']} is newer than supported")
        components = {}
        for name, entry in header["components"].items():
            spec = MLPSpec.from_dict(entry["spec"])
            index = {k: (o, tuple(sh)) for k, (o, sh) in entry["index"].items()}
            components[name] = (spec, ParamVector(np.array(data[f"values/{name}"]), index))
    return components, header["manifest"]
