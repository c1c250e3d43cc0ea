"""Flat-parameter MLPs with exact reverse-mode gradients and Adam.

Networks are split into a backbone (input -> hidden features, with
activations) and a head (features -> q-values, linear). Parameters live in
flat float64 vectors with a fixed layout so that snapshots, regularizers
and checkpoints can treat a network as a single array.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class NetSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64, 64)
    output_dim: int = 5
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if len(self.hidden_dims) < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden_dims must be a non-empty list of dims >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def backbone_shapes(self) -> tuple[tuple[int, int], ...]:
        dims = (self.input_dim,) + self.hidden_dims
        return tuple((dims[i + 1], dims[i]) for i in range(len(self.hidden_dims)))

    @property
    def head_shapes(self) -> tuple[tuple[int, int], ...]:
        return ((self.output_dim, self.hidden_dims[-1]),)

    def to_obj(self):
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "activation": self.activation,
        }

    @classmethod
    def from_obj(cls, obj):
        return cls(
            input_dim=int(obj["input_dim"]),
            hidden_dims=tuple(obj["hidden_dims"]),
            output_dim=int(obj["output_dim"]),
            activation=obj["activation"],
        )


def param_count(shapes) -> int:
    return sum(o * i + o for o, i in shapes)


def flat_index(shapes, layer: int, kind: str, row: int, col: int = 0) -> int:
    """Deterministic (layer, weight|bias, row, col) -> flat offset mapping."""
    if kind not in ("weight", "bias"):
        raise ValueError("kind must be 'weight' or 'bias'")
    off = 0
    for l, (o, i) in enumerate(shapes):
        if l == layer:
            if kind == "weight":
                if not (0 <= row < o and 0 <= col < i):
                    raise IndexError("weight index out of range")
                return off + row * i + col
            if not (0 <= row < o):
                raise IndexError("bias index out of range")
            return off + o * i + row
        off += o * i + o
    raise IndexError("layer out of range")


def flatten(layers) -> np.ndarray:
    parts = []
    for w, b in layers:
        parts.append(np.asarray(w, dtype=np.float64).ravel())
        parts.append(np.asarray(b, dtype=np.float64).ravel())
    if not parts:
        return np.zeros(0, dtype=np.float64)
    return np.concatenate(parts)


def unflatten(values: np.ndarray, shapes):
    layers = []
    off = 0
    for o, i in shapes:
        w = values[off:off + o * i].reshape(o, i)
        off += o * i
        b = values[off:off + o]
        off += o
        layers.append((w, b))
    if off != len(values):
        raise ValueError(f"value length {len(values)} does not match layout ({off})")
    return layers


@dataclass
class ParamStore:
    """Flat float64 parameter vector plus the layer layout it encodes."""

    values: np.ndarray
    shapes: tuple[tuple[int, int], ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        self.shapes = tuple((int(o), int(i)) for o, i in self.shapes)
        if len(self.values) != param_count(self.shapes):
            raise ValueError("value length does not match the layout")

    def layers(self):
        return unflatten(self.values, self.shapes)

    def copy(self) -> "ParamStore":
        return ParamStore(self.values.copy(), self.shapes)

    @classmethod
    def zeros(cls, shapes) -> "ParamStore":
        return cls(np.zeros(param_count(shapes)), shapes)


def init_params(shapes, rng: np.random.Generator) -> ParamStore:
    """Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], per layer."""
    parts = []
    for o, i in shapes:
        bound = 1.0 / np.sqrt(i)
        parts.append(rng.uniform(-bound, bound, size=o * i))
        parts.append(rng.uniform(-bound, bound, size=o))
    if not parts:
        return ParamStore.zeros(shapes)
    return ParamStore(np.concatenate(parts), shapes)


def _act(x, kind):
    if kind == "relu":
        return np.maximum(x, 0.0)
    return np.tanh(x)


def _dact(pre, post, kind):
    if kind == "relu":
        return (pre > 0.0).astype(np.float64)
    return 1.0 - post * post


def forward_batch(spec: NetSpec, backbone: ParamStore, head: ParamStore, X: np.ndarray):
    """Batched forward pass. X is [B, input_dim]; returns (Y [B, out], cache)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ValueError(f"input has shape {X.shape}, expected [B, {spec.input_dim}]")
    if backbone.shapes != spec.backbone_shapes or head.shapes != spec.head_shapes:
        raise ValueError("parameter layout does not match the network spec")
    h = X
    pres, posts = [], [X]
    for w, b in backbone.layers():
        z = h @ w.T + b
        h = _act(z, spec.activation)
        pres.append(z)
        posts.append(h)
    (wh, bh), = head.layers()
    Y = h @ wh.T + bh
    return Y, (pres, posts)


def backward_batch(spec: NetSpec, backbone: ParamStore, head: ParamStore,
                   cache, dY: np.ndarray):
    """Gradients of sum_b dY[b] . Y[b] w.r.t. backbone and head parameters."""
    pres, posts = cache
    dY = np.asarray(dY, dtype=np.float64)
    if dY.ndim != 2 or dY.shape[1] != spec.output_dim:
        raise ValueError(f"upstream grad has shape {dY.shape}, expected [B, {spec.output_dim}]")
    (wh, _), = head.layers()
    feats = posts[-1]
    gwh = dY.T @ feats
    gbh = dY.sum(axis=0)
    dh = dY @ wh
    blayers = backbone.layers()
    grads_b = []
    for l in range(len(spec.backbone_shapes) - 1, -1, -1):
        dz = dh * _dact(pres[l], posts[l + 1], spec.activation)
        grads_b.append((dz.T @ posts[l], dz.sum(axis=0)))
        dh = dz @ blayers[l][0]
    grads_b.reverse()
    gb = ParamStore(flatten(grads_b), spec.backbone_shapes)
    gh = ParamStore(flatten([(gwh, gbh)]), spec.head_shapes)
    return gb, gh


def forward(spec: NetSpec, backbone: ParamStore, head: ParamStore, x) -> np.ndarray:
    """Single-input forward: q-values for one observation vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("input must be a 1-d vector")
    Y, _ = forward_batch(spec, backbone, head, x[None, :])
    return Y[0]


def backward(spec: NetSpec, backbone: ParamStore, head: ParamStore, x, upstream):
    """Exact gradient of upstream . output w.r.t. all parameters."""
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (spec.output_dim,):
        raise ValueError("upstream grad length must equal output_dim")
    _, cache = forward_batch(spec, backbone, head, x[None, :])
    return backward_batch(spec, backbone, head, cache, upstream[None, :])


@dataclass
class OptState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_store(cls, store: ParamStore, lr: float = 5e-4) -> "OptState":
        n = len(store.values)
        return cls(np.zeros(n), np.zeros(n), lr=lr)


def optimizer_step(params: ParamStore, grads, state: OptState):
    """One Adam update with bias correction. Mutates params/state in place."""
    g = grads.values if isinstance(grads, ParamStore) else np.asarray(grads, dtype=np.float64)
    if len(g) != len(params.values) or len(g) != len(state.first_moment):
        raise ValueError("parameter, gradient and moment lengths must agree")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient entries (training diverged)")
    state.step_count += 1
    t = state.step_count
    state.first_moment *= state.beta1
    state.first_moment += (1.0 - state.beta1) * g
    state.second_moment *= state.beta2
    state.second_moment += (1.0 - state.beta2) * g * g
    mhat = state.first_moment / (1.0 - state.beta1 ** t)
    vhat = state.second_moment / (1.0 - state.beta2 ** t)
    params.values -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params, state


def copy_params(src: ParamStore) -> ParamStore:
    return src.copy()


# --- checkpoint serialization -------------------------------------------------
#
# Checkpoints are plain JSON: the network spec plus one flat value array per
# named store, in layout order. Python's float repr round-trips exactly, so
# the serialized text reloads bit-for-bit.

def stores_to_obj(stores: dict) -> dict:
    return {
        name: {"shapes": [list(s) for s in ps.shapes], "values": ps.values.tolist()}
        for name, ps in stores.items()
    }


def stores_from_obj(obj: dict) -> dict:
    return {
        name: ParamStore(np.array(rec["values"], dtype=np.float64),
                         tuple(tuple(s) for s in rec["shapes"]))
        for name, rec in obj.items()
    }


def save_checkpoint(path, spec: NetSpec, stores: dict, extra: dict | None = None):
    obj = {"spec": spec.to_obj(), "stores": stores_to_obj(stores)}
    if extra:
        obj["extra"] = extra
    with open(path, "w") as f:
        json.dump(obj, f)


def load_checkpoint(path):
    with open(path) as f:
        obj = json.load(f)
    spec = NetSpec.from_obj(obj["spec"])
    return spec, stores_from_obj(obj["stores"]), obj.get("extra", {})
