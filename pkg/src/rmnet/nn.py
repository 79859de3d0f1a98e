"""Small feedforward-network engine on numpy.

Every network keeps its parameters in a single flat float64 buffer; the
per-layer weight matrices (out x in) and bias vectors are views into it.
Gradients use the same layout, so an optimizer step is a handful of vector
operations regardless of depth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ACTIVATIONS = ("elu", "relu", "identity")


class ShapeError(ValueError):
    pass


def _views(sizes: Sequence[int], flat: np.ndarray):
    weights, biases = [], []
    pos = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        n = fan_in * fan_out
        weights.append(flat[pos:pos + n].reshape(fan_out, fan_in))
        pos += n
        biases.append(flat[pos:pos + fan_out])
        pos += fan_out
    return weights, biases


def n_params(sizes: Sequence[int]) -> int:
    return sum(i * o + o for i, o in zip(sizes[:-1], sizes[1:]))


@dataclass
class MLP:
    """Layered affine maps with per-layer activations.

    Layout of ``flat``: for each layer, the weight matrix row-major
    (out x in) followed by the bias vector.
    """

    sizes: tuple[int, ...]
    activations: tuple[str, ...]
    flat: np.ndarray
    weights: list[np.ndarray] = field(init=False, repr=False)
    biases: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        self.activations = tuple(self.activations)
        if len(self.sizes) < 2:
            raise ShapeError("an MLP needs at least an input and an output size")
        if len(self.activations) != len(self.sizes) - 1:
            raise ShapeError(
                f"{len(self.sizes) - 1} layers but {len(self.activations)} activations"
            )
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        if self.flat.shape != (n_params(self.sizes),):
            raise ShapeError(
                f"flat buffer has shape {self.flat.shape}, expected ({n_params(self.sizes)},)"
            )
        self.weights, self.biases = _views(self.sizes, self.flat)

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def copy(self) -> "MLP":
        return MLP(self.sizes, self.activations, self.flat.copy())

    def zeros_like(self) -> "MLP":
        return MLP(self.sizes, self.activations, np.zeros_like(self.flat))

    def tensor_names(self) -> list[str]:
        names = []
        for i in range(self.n_layers):
            names += [f"weights[{i}]", f"biases[{i}]"]
        return names

    def tensors(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def default_activations(n_layers: int, hidden: str = "elu") -> tuple[str, ...]:
    return (hidden,) * (n_layers - 1) + ("identity",)


def init(
    sizes: Sequence[int],
    activations: Sequence[str] | None = None,
    seed: int | np.random.Generator = 0,
) -> MLP:
    """Scaled-normal weights (variance 2/fan_in) and zero biases."""
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) < 2:
        raise ShapeError("layer size list needs at least two entries")
    if min(sizes) < 1:
        raise ShapeError(f"layer sizes must be >= 1, got {sizes}")
    if activations is None:
        activations = default_activations(len(sizes) - 1)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    net = MLP(sizes, tuple(activations), np.zeros(n_params(sizes)))
    for w in net.weights:
        w[...] = rng.normal(0.0, np.sqrt(2.0 / w.shape[1]), size=w.shape)
    return net


def _activate(z: np.ndarray, act: str) -> np.ndarray:
    if act == "elu":
        # expm1(z) >= z for z <= 0, so the max picks the right branch everywhere
        return np.maximum(np.expm1(np.minimum(z, 0.0)), z)
    if act == "relu":
        return np.maximum(z, 0.0)
    return z


def _activate_grad(z: np.ndarray, out: np.ndarray, act: str) -> np.ndarray | None:
    if act == "elu":
        # derivative is 1 above zero and exp(z) = elu(z) + 1 below
        return np.minimum(out + 1.0, 1.0)
    if act == "relu":
        return (z > 0).astype(z.dtype)
    return None


def forward(net: MLP, X: np.ndarray):
    """Returns (outputs, cache). The cache holds each layer's input, pre-activation and output."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.sizes[0]:
        raise ShapeError(f"input of shape {X.shape} does not match input width {net.sizes[0]}")
    cache = []
    h = X
    for w, b, act in zip(net.weights, net.biases, net.activations):
        z = h @ w.T + b
        out = _activate(z, act)
        cache.append((h, z, out))
        h = out
    return h, cache


def backward(net: MLP, cache, output_grad: np.ndarray):
    """Reverse-mode pass. Returns (parameter gradient as an MLP, input gradient)."""
    output_grad = np.asarray(output_grad, dtype=np.float64)
    if len(cache) != net.n_layers:
        raise ShapeError("cache does not come from this network")
    n = cache[0][0].shape[0]
    if output_grad.shape != (n, net.sizes[-1]):
        raise ShapeError(
            f"output gradient of shape {output_grad.shape}, expected {(n, net.sizes[-1])}"
        )
    grad = net.zeros_like()
    delta = output_grad
    for i in reversed(range(net.n_layers)):
        h, z, out = cache[i]
        d = _activate_grad(z, out, net.activations[i])
        if d is not None:
            delta = delta * d
        grad.weights[i][...] = delta.T @ h
        grad.biases[i][...] = delta.sum(axis=0)
        delta = delta @ net.weights[i]
    return grad, delta


def l2_penalty(net: MLP, strength: float):
    """strength * sum of squared weights (biases excluded) and its gradient."""
    if strength < 0:
        raise ValueError("L2 strength must be non-negative")
    grad = net.zeros_like()
    value = 0.0
    for w, gw in zip(net.weights, grad.weights):
        value += float(np.sum(w * w))
        gw[...] = 2.0 * strength * w
    return strength * value, grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    @classmethod
    def for_params(cls, n: int, lr: float = 1e-4, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), lr=lr, **kw)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, names=None):
    """Bias-corrected Adam update, applied in place to a flat parameter vector.

    ``names`` optionally maps slices of the flat vector to tensor names for the
    non-finite gradient error.
    """
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}"
        )
    if not np.all(np.isfinite(grads)):
        bad = int(np.flatnonzero(~np.isfinite(grads))[0])
        where = f"entry {bad}"
        if names is not None:
            for name, sl in names:
                if sl.start <= bad < sl.stop:
                    where = f"{name} (flat entry {bad})"
                    break
        raise FloatingPointError(f"non-finite gradient in {where}")
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def flat_layout(nets: dict[str, MLP]):
    """(name, slice) pairs for a concatenation of several networks' flat buffers."""
    out, pos = [], 0
    for key, net in nets.items():
        for i in range(net.n_layers):
            nw = net.weights[i].size
            out.append((f"{key}.weights[{i}]", slice(pos, pos + nw)))
            pos += nw
            nb = net.biases[i].size
            out.append((f"{key}.biases[{i}]", slice(pos, pos + nb)))
            pos += nb
    return out


# -- checkpoints -------------------------------------------------------------
#
# Plain-text format, one record per line:
#
#   rmnet-checkpoint 1
#   meta <key> <json value>            (zero or more)
#   net <name> <sizes comma-separated> <activations comma-separated>
#   <flat parameters, space-separated, shortest round-trip repr>
#
# Floats are written with repr(), which round-trips float64 exactly.

_MAGIC = "rmnet-checkpoint 1"


def save_checkpoint(path, nets: dict[str, MLP], meta: dict | None = None) -> None:
    import json

    lines = [_MAGIC]
    for key, value in (meta or {}).items():
        if any(c.isspace() for c in key):
            raise ValueError(f"meta key {key!r} contains whitespace")
        lines.append(f"meta {key} {json.dumps(value, sort_keys=True)}")
    for name, net in nets.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"network name {name!r} contains whitespace")
        lines.append(
            f"net {name} {','.join(map(str, net.sizes))} {','.join(net.activations)}"
        )
        lines.append(" ".join(repr(float(v)) for v in net.flat))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path):
    """Returns (nets, meta)."""
    import json

    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != _MAGIC:
        raise ValueError(f"{path}: not an rmnet checkpoint")
    nets: dict[str, MLP] = {}
    meta: dict = {}
    i = 1
    while i < len(lines):
        line = lines[i]
        if line.startswith("meta "):
            _, key, value = line.split(" ", 2)
            meta[key] = json.loads(value)
            i += 1
        elif line.startswith("net "):
            _, name, sizes, acts = line.split(" ")
            sizes_t = tuple(int(s) for s in sizes.split(","))
            body = lines[i + 1].split() if i + 1 < len(lines) else []
            flat = np.array([float(v) for v in body], dtype=np.float64)
            nets[name] = MLP(sizes_t, tuple(acts.split(",")), flat)
            i += 2
        elif not line.strip():
            i += 1
        else:
            raise ValueError(f"{path}:{i + 1}: unrecognised record {line[:40]!r}")
    return nets, meta
