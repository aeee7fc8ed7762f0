"""MLP and residual-MLP classifiers over a flat parameter vector.

Parameters live in one contiguous float32 array whose layout is a pure
function of :class:`ModelSpec`. Every named tensor in that layout also
carries, per axis, the name of the hidden-unit group that indexes it (or
``None``), which is all that permutation application and weight matching
need to know about the architecture.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

from . import tensor as tc
from .errors import SpecError
from .tensor import Tensor

PLAIN = "plain_mlp"
RESIDUAL = "res_mlp"
STREAM = "stream"


@dataclass(frozen=True)
class ParamSlot:
    name: str
    shape: tuple[int, ...]
    axes: tuple[str | None, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class ModelSpec:
    """Architecture descriptor.

    For ``plain_mlp`` ``widths`` lists the hidden layer widths. For ``res_mlp``
    ``widths[0]`` is the residual-stream width and ``widths[1:]`` are the
    internal widths of the residual blocks (one block per entry).

    Canonical parameter order is per layer: weight, bias, norm gain, norm bias.
    Residual blocks hold ``fc1``, ``fc2`` then their pre-norm; the residual
    model starts with a ``stem`` projection and ends with a normed ``head``.
    """

    input_dim: int
    num_classes: int
    widths: tuple[int, ...]
    kind: str = PLAIN
    layer_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.kind not in (PLAIN, RESIDUAL):
            raise SpecError(f"unknown architecture kind {self.kind!r}")
        if self.input_dim < 1 or self.num_classes < 1:
            raise SpecError("input_dim and num_classes must be positive")
        min_len = 1 if self.kind == PLAIN else 2
        if len(self.widths) < min_len:
            raise SpecError(f"{self.kind} needs at least {min_len} width entries")
        if any(w < 1 for w in self.widths):
            raise SpecError("all widths must be >= 1")

    @cached_property
    def layout(self) -> tuple[ParamSlot, ...]:
        entries: list[tuple[str, tuple[int, ...], tuple[str | None, ...]]] = []

        def dense(prefix, n_out, n_in, g_out, g_in, norm_group=None, norm_width=None):
            entries.append((f"{prefix}.weight", (n_out, n_in), (g_out, g_in)))
            entries.append((f"{prefix}.bias", (n_out,), (g_out,)))
            if norm_group is not None or norm_width is not None:
                entries.append((f"{prefix}.norm_gain", (norm_width,), (norm_group,)))
                entries.append((f"{prefix}.norm_bias", (norm_width,), (norm_group,)))

        if self.kind == PLAIN:
            prev, g_prev = self.input_dim, None
            for i, w in enumerate(self.widths):
                g = f"hidden{i}"
                if self.layer_norm:
                    dense(f"layer{i}", w, prev, g, g_prev, g, w)
                else:
                    dense(f"layer{i}", w, prev, g, g_prev)
                prev, g_prev = w, g
            dense("head", self.num_classes, prev, None, g_prev)
        else:
            s = self.widths[0]
            dense("stem", s, self.input_dim, STREAM, None)
            for b, w in enumerate(self.widths[1:]):
                g = f"block{b}"
                entries.append((f"block{b}.fc1.weight", (w, s), (g, STREAM)))
                entries.append((f"block{b}.fc1.bias", (w,), (g,)))
                entries.append((f"block{b}.fc2.weight", (s, w), (STREAM, g)))
                entries.append((f"block{b}.fc2.bias", (s,), (STREAM,)))
                if self.layer_norm:
                    entries.append((f"block{b}.norm_gain", (s,), (STREAM,)))
                    entries.append((f"block{b}.norm_bias", (s,), (STREAM,)))
            if self.layer_norm:
                dense("head", self.num_classes, s, None, STREAM, STREAM, s)
            else:
                dense("head", self.num_classes, s, None, STREAM)

        slots, offset = [], 0
        for name, shape, axes in entries:
            slot = ParamSlot(name, shape, axes, offset)
            slots.append(slot)
            offset += slot.size
        return tuple(slots)

    @property
    def num_params(self) -> int:
        last = self.layout[-1]
        return last.offset + last.size

    @cached_property
    def groups(self) -> dict[str, int]:
        """Permutable hidden-unit groups and their sizes, in layer order."""
        out: dict[str, int] = {}
        for slot in self.layout:
            for g, n in zip(slot.axes, slot.shape):
                if g is not None:
                    out.setdefault(g, n)
        return out

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "widths": list(self.widths),
            "kind": self.kind,
            "layer_norm": self.layer_norm,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelSpec:
        return cls(
            input_dim=int(d["input_dim"]),
            num_classes=int(d["num_classes"]),
            widths=tuple(d["widths"]),
            kind=d.get("kind", PLAIN),
            layer_norm=bool(d.get("layer_norm", True)),
        )


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat, read-only float32 parameters in the canonical order of ``spec``."""

    values: np.ndarray
    spec: ModelSpec

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float32)
        if v.ndim != 1 or v.size != self.spec.num_params:
            raise SpecError(f"expected {self.spec.num_params} parameters, got {v.size}")
        if v is self.values and v.flags.writeable:
            v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.size

    def tensors(self) -> dict[str, np.ndarray]:
        """Named read-only views into ``values``."""
        return unflatten(self.spec, self.values)

    @classmethod
    def from_tensors(cls, spec: ModelSpec, named: Mapping[str, np.ndarray]) -> ParamVector:
        return cls(flatten(spec, named), spec)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


def unflatten(spec: ModelSpec, flat: np.ndarray) -> dict[str, np.ndarray]:
    if flat.size != spec.num_params:
        raise SpecError(f"expected {spec.num_params} parameters, got {flat.size}")
    return {s.name: flat[s.offset : s.offset + s.size].reshape(s.shape) for s in spec.layout}


def flatten(spec: ModelSpec, named: Mapping[str, np.ndarray]) -> np.ndarray:
    out = np.empty(spec.num_params, dtype=np.float32)
    for s in spec.layout:
        arr = np.asarray(named[s.name])
        if arr.shape != s.shape:
            raise SpecError(f"{s.name}: expected shape {s.shape}, got {arr.shape}")
        out[s.offset : s.offset + s.size] = arr.ravel()
    return out


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamVector:
    """Glorot-uniform weights, zero biases, unit norm gains."""
    named = {}
    for s in spec.layout:
        if s.name.endswith("weight"):
            fan_out, fan_in = s.shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            named[s.name] = rng.uniform(-bound, bound, size=s.shape)
        elif s.name.endswith("norm_gain"):
            named[s.name] = np.ones(s.shape)
        else:
            named[s.name] = np.zeros(s.shape)
    return ParamVector.from_tensors(spec, named)


def forward_tensors(spec: ModelSpec, p: Mapping[str, Tensor], x: Tensor) -> Tensor:
    """Logits for ``x`` given named parameter tensors (graph-building)."""
    ln = spec.layer_norm
    if spec.kind == PLAIN:
        h = x
        for i in range(len(spec.widths)):
            pre = f"layer{i}"
            z = tc.linear(h, p[f"{pre}.weight"], p[f"{pre}.bias"])
            if ln:
                z = tc.layer_norm(z, p[f"{pre}.norm_gain"], p[f"{pre}.norm_bias"])
            h = tc.relu(z)
        return tc.linear(h, p["head.weight"], p["head.bias"])

    h = tc.linear(x, p["stem.weight"], p["stem.bias"])
    for b in range(len(spec.widths) - 1):
        pre = f"block{b}"
        u = tc.layer_norm(h, p[f"{pre}.norm_gain"], p[f"{pre}.norm_bias"]) if ln else h
        u = tc.relu(tc.linear(u, p[f"{pre}.fc1.weight"], p[f"{pre}.fc1.bias"]))
        h = h + tc.linear(u, p[f"{pre}.fc2.weight"], p[f"{pre}.fc2.bias"])
    if ln:
        h = tc.layer_norm(h, p["head.norm_gain"], p["head.norm_bias"])
    return tc.linear(h, p["head.weight"], p["head.bias"])


def _coerce(spec: ModelSpec, params) -> np.ndarray:
    if isinstance(params, ParamVector):
        if params.spec != spec:
            raise SpecError("parameter vector belongs to a different ModelSpec")
        return params.values
    arr = np.asarray(params)
    if arr.ndim != 1 or arr.size != spec.num_params:
        raise SpecError(f"expected {spec.num_params} parameters, got shape {arr.shape}")
    return arr


def forward(spec: ModelSpec, params, batch) -> Tensor:
    """Logits ``[n, K]`` for ``batch`` of shape ``[n, d]`` (no gradient tracking)."""
    flat = _coerce(spec, params)
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch), dtype=flat.dtype)
    if x.data.ndim != 2 or x.shape[1] != spec.input_dim:
        raise SpecError(f"batch must be [n, {spec.input_dim}], got {x.shape}")
    named = {k: Tensor(v) for k, v in unflatten(spec, flat).items()}
    return forward_tensors(spec, named, x)


def predict_logits(spec: ModelSpec, params, inputs: np.ndarray, batch_size: int = 8192) -> np.ndarray:
    """Plain-array logits, evaluated in fixed-size chunks."""
    inputs = np.asarray(inputs, dtype=np.float32)
    outs = [forward(spec, params, inputs[i : i + batch_size]).data for i in range(0, len(inputs), batch_size)]
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, spec.num_classes), np.float32)


# -- permutations ---------------------------------------------------------
@dataclass(frozen=True, eq=False)
class PermutationSet:
    """One permutation per permutable hidden-unit group.

    ``perms[g][i]`` is the old index of the unit that lands at position ``i``,
    so a weight ``W`` indexed by group ``g`` along axis 0 becomes ``W[perms[g]]``.
    """

    perms: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for g, p in self.perms.items():
            arr = np.asarray(p)
            if arr.ndim != 1 or not np.issubdtype(arr.dtype, np.integer):
                raise SpecError(f"permutation for {g!r} must be a 1-D integer array")
            if not np.array_equal(np.sort(arr), np.arange(arr.size)):
                raise SpecError(f"permutation for {g!r} is not a bijection")
            arr = arr.astype(np.int64)
            arr.flags.writeable = False
            clean[g] = arr
        object.__setattr__(self, "perms", clean)

    @classmethod
    def identity(cls, spec: ModelSpec) -> PermutationSet:
        return cls({g: np.arange(n) for g, n in spec.groups.items()})

    @classmethod
    def random(cls, spec: ModelSpec, rng: np.random.Generator) -> PermutationSet:
        return cls({g: rng.permutation(n) for g, n in spec.groups.items()})

    def inverse(self) -> PermutationSet:
        return PermutationSet({g: np.argsort(p) for g, p in self.perms.items()})

    def compose(self, inner: PermutationSet) -> PermutationSet:
        """Permutation equivalent to applying ``inner`` first, then ``self``."""
        return PermutationSet({g: inner.perms[g][p] for g, p in self.perms.items()})

    def is_identity(self) -> bool:
        return all(np.array_equal(p, np.arange(p.size)) for p in self.perms.values())

    def __eq__(self, other) -> bool:
        if not isinstance(other, PermutationSet) or self.perms.keys() != other.perms.keys():
            return False
        return all(np.array_equal(p, other.perms[g]) for g, p in self.perms.items())

    def to_dict(self) -> dict[str, list[int]]:
        return {g: p.tolist() for g, p in self.perms.items()}


def _check_perm(spec: ModelSpec, perm: PermutationSet) -> None:
    groups = spec.groups
    if set(perm.perms) != set(groups):
        raise SpecError(f"permutation groups {sorted(perm.perms)} do not match model groups {sorted(groups)}")
    for g, n in groups.items():
        if perm.perms[g].size != n:
            raise SpecError(f"group {g!r}: permutation of size {perm.perms[g].size}, width {n}")


def permute_named(spec: ModelSpec, named: Mapping[str, np.ndarray], perm: PermutationSet, skip_axis=None):
    """Permute every axis of every tensor; ``skip_axis=(name, axis)`` leaves one axis alone."""
    out = {}
    for s in spec.layout:
        w = named[s.name]
        for axis, g in enumerate(s.axes):
            if g is None or (skip_axis is not None and skip_axis == (s.name, axis)):
                continue
            w = np.take(w, perm.perms[g], axis=axis)
        out[s.name] = w
    return out


def apply_permutation(params: ParamVector, perm: PermutationSet) -> ParamVector:
    """Reindex hidden units; the network function is unchanged."""
    spec = params.spec
    _check_perm(spec, perm)
    return ParamVector.from_tensors(spec, permute_named(spec, params.tensors(), perm))


def interpolate(params_list: Sequence[ParamVector], weights: Sequence[float]) -> ParamVector:
    """Convex combination ``sum_i w_i * params_i`` (accumulated in float64).

    The sum is anchored at the heaviest member, ``p_k + sum_i w_i (p_i - p_k)``,
    so one-hot weights and repeated members reproduce the inputs bitwise.
    """
    if len(params_list) == 0 or len(params_list) != len(weights):
        raise SpecError("need one weight per parameter vector")
    spec = params_list[0].spec
    if any(p.spec != spec for p in params_list):
        raise SpecError("all parameter vectors must share one ModelSpec")
    w = np.asarray(weights, dtype=np.float64)
    if abs(w.sum() - 1.0) > 1e-9:
        raise SpecError(f"interpolation weights sum to {w.sum()!r}, not 1")
    k = int(np.argmax(w))
    base = params_list[k].values.astype(np.float64)
    acc = base.copy()
    for i, (wi, p) in enumerate(zip(w, params_list)):
        if i != k and wi != 0.0:
            acc += wi * (p.values.astype(np.float64) - base)
    return ParamVector(acc.astype(np.float32), spec)
