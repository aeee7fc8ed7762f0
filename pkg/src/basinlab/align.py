"""Weight-matching alignment of hidden units across networks.

``solve_lap`` is an exact O(n^3) shortest-augmenting-path Hungarian solver.
``pcd_align`` is permutation coordinate descent against one reference and
``multi_pcd_align`` sums the matching objective against every other member.
Both only rely on the per-axis group annotations of ``ModelSpec.layout``, so
plain and residual MLPs are handled by the same code.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import rng_for
from .errors import SpecError, UsageError
from .models import ModelSpec, ParamVector, PermutationSet, apply_permutation, forward, permute_named

_ACCEPT_RTOL = 1e-12


def solve_lap(cost) -> tuple[np.ndarray, float]:
    """Maximum-score perfect matching of a square score matrix.

    Returns ``(assignment, total)`` with row ``i`` matched to column
    ``assignment[i]``. Rows are inserted in index order and columns scanned in
    index order with strict comparisons, so ties resolve deterministically
    towards smaller indices.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise UsageError(f"cost matrix must be square, got shape {c.shape}")
    if not np.isfinite(c).all():
        raise UsageError("cost matrix has non-finite entries")
    n = c.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    a = -c  # minimise
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)  # match[col] = row (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[match[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    assignment = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        assignment[match[j] - 1] = j - 1
    total = 0.0
    for i in range(n):
        total += c[i, assignment[i]]
    return assignment, total


@dataclass
class AlignmentResult:
    perms: list[PermutationSet]
    trace: list[float]
    converged: bool
    sweeps: int
    seed: int
    metadata: dict = field(default_factory=dict)

    @property
    def perm(self) -> PermutationSet:
        return self.perms[-1]


def _named64(p: ParamVector) -> dict[str, np.ndarray]:
    return {k: v.astype(np.float64) for k, v in p.tensors().items()}


def _inner(spec: ModelSpec, a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> float:
    return float(sum(np.vdot(a[s.name], b[s.name]) for s in spec.layout))


def _group_cost(spec: ModelSpec, target: Mapping[str, np.ndarray], member: Mapping[str, np.ndarray], perm: PermutationSet, group: str) -> np.ndarray:
    """Score ``C[i, j]`` of placing member unit ``j`` at position ``i`` of ``group``."""
    n = spec.groups[group]
    cost = np.zeros((n, n))
    for s in spec.layout:
        for axis, g in enumerate(s.axes):
            if g != group:
                continue
            wb = member[s.name]
            for other_axis, og in enumerate(s.axes):
                if og is not None and other_axis != axis:
                    wb = np.take(wb, perm.perms[og], axis=other_axis)
            wa = np.moveaxis(target[s.name], axis, 0).reshape(n, -1)
            wb = np.moveaxis(wb, axis, 0).reshape(n, -1)
            cost += wa @ wb.T
    return cost


def _check_pair(a: ParamVector, b: ParamVector) -> None:
    if a.spec != b.spec:
        raise UsageError("alignment requires members with the same ModelSpec")


def _descend(spec, target, member, perm: PermutationSet, rng, max_sweeps: int) -> tuple[PermutationSet, list[float], bool, int]:
    """Coordinate descent over groups of ``member`` against a fixed ``target``."""
    perms = {g: p.copy() for g, p in perm.perms.items()}
    groups = list(spec.groups)
    trace = [_inner(spec, target, permute_named(spec, member, PermutationSet(perms)))]
    sweeps, converged = 0, False
    while sweeps < max_sweeps:
        sweeps += 1
        changed = False
        for gi in rng.permutation(len(groups)):
            g = groups[gi]
            cost = _group_cost(spec, target, member, PermutationSet(perms), g)
            new, new_score = solve_lap(cost)
            old_score = float(cost[np.arange(len(new)), perms[g]].sum())
            if new_score > old_score + _ACCEPT_RTOL * max(1.0, abs(old_score)) and not np.array_equal(new, perms[g]):
                perms[g] = new
                changed = True
        trace.append(_inner(spec, target, permute_named(spec, member, PermutationSet(perms))))
        if not changed:
            converged = True
            break
    return PermutationSet(perms), trace, converged, sweeps


def pcd_align(reference, member, max_sweeps: int = 100, seed: int = 0, restarts: int = 4) -> AlignmentResult:
    """Permute ``member``'s hidden units to maximise its weight inner product with ``reference``.

    The first descent starts at the identity; ``restarts - 1`` more start from
    seeded random permutations. The run with the highest final objective wins
    (earliest on ties), which escapes most local optima of coordinate descent.
    """
    if restarts < 1:
        raise UsageError("restarts must be >= 1")
    ref, mem = _params(reference), _params(member)
    _check_pair(ref, mem)
    spec = ref.spec
    target, named = _named64(ref), _named64(mem)
    best = None
    for r in range(restarts):
        start = PermutationSet.identity(spec) if r == 0 else PermutationSet.random(spec, rng_for(seed, 1, r))
        run = _descend(spec, target, named, start, rng_for(seed, 0, r), max_sweeps)
        if best is None or run[1][-1] > best[1][-1]:
            best = run
    perm, trace, converged, sweeps = best
    return AlignmentResult([perm], trace, converged, sweeps, seed, {"method": "pcd", "restarts": restarts})


def _params(x) -> ParamVector:
    return x if isinstance(x, ParamVector) else x.params


def _joint_objective(spec, named: Sequence[Mapping[str, np.ndarray]]) -> float:
    total = 0.0
    for i in range(len(named)):
        for j in range(i + 1, len(named)):
            total += _inner(spec, named[i], named[j])
    return total


def multi_pcd_align(
    members,
    max_outer_iters: int = 10,
    max_sweeps: int = 100,
    seed: int = 0,
    init: Sequence[PermutationSet] | None = None,
) -> AlignmentResult:
    """Joint alignment: each non-reference member is matched against the sum of all others.

    Member 0 stays fixed. ``init`` gives starting permutations for all members
    (default: pairwise PCD results). The joint objective, the sum of pairwise
    inner products of the permuted members, never decreases.
    """
    params = [_params(m) for m in getattr(members, "members", members)]
    if len(params) < 3:
        raise UsageError("multi-PCD needs at least three members")
    spec = params[0].spec
    for p in params[1:]:
        _check_pair(params[0], p)
    raw = [_named64(p) for p in params]
    if init is None:
        init = [PermutationSet.identity(spec)] + [pcd_align(params[0], p, max_sweeps, seed).perm for p in params[1:]]
    perms = list(init)
    perms[0] = PermutationSet.identity(spec)
    current = [permute_named(spec, r, p) for r, p in zip(raw, perms)]
    rng = rng_for(seed, 1)
    trace = [_joint_objective(spec, current)]
    converged, outer, sweeps_total = False, 0, 0
    while outer < max_outer_iters:
        outer += 1
        changed = False
        for i in range(1, len(params)):
            others = {s.name: sum(current[j][s.name] for j in range(len(params)) if j != i) for s in spec.layout}
            new, _, _, sweeps = _descend(spec, others, raw[i], perms[i], rng, max_sweeps)
            sweeps_total += sweeps
            if new != perms[i]:
                perms[i] = new
                current[i] = permute_named(spec, raw[i], new)
                changed = True
        trace.append(_joint_objective(spec, current))
        if not changed:
            converged = True
            break
    return AlignmentResult(perms, trace, converged, outer, seed, {"method": "multi_pcd", "inner_sweeps": sweeps_total})


def permuted_members(members, result: AlignmentResult) -> list[ParamVector]:
    """Apply an alignment result to members (the reference passes through unchanged)."""
    params = [_params(m) for m in getattr(members, "members", members)]
    perms = result.perms
    if len(perms) == len(params) - 1:
        perms = [PermutationSet.identity(params[0].spec)] + list(perms)
    if len(perms) != len(params):
        raise UsageError(f"{len(perms)} permutations for {len(params)} members")
    return [apply_permutation(p, q) for p, q in zip(params, perms)]


def pcd_align_all(members, max_sweeps: int = 100, seed: int = 0) -> AlignmentResult:
    """Pairwise PCD of every member against member 0."""
    params = [_params(m) for m in getattr(members, "members", members)]
    results = [pcd_align(params[0], p, max_sweeps, seed) for p in params[1:]]
    perms = [PermutationSet.identity(params[0].spec)] + [r.perm for r in results]
    return AlignmentResult(
        perms,
        [sum(r.trace[-1] for r in results)],
        all(r.converged for r in results),
        max((r.sweeps for r in results), default=0),
        seed,
        {"method": "pcd", "pair_traces": [r.trace for r in results]},
    )


def verify_function_preservation(original, permuted, num_probes: int = 100, seed: int = 0) -> float:
    """Max absolute logit difference over ``num_probes`` Gaussian inputs.

    ``permuted`` may be a parameter vector, a :class:`PermutationSet`, or a
    mapping of group -> permutation (validated as a bijection first).
    """
    orig = _params(original)
    if isinstance(permuted, Mapping):
        permuted = PermutationSet(dict(permuted))
    if isinstance(permuted, PermutationSet):
        permuted = apply_permutation(orig, permuted)
    other = _params(permuted)
    if other.spec != orig.spec:
        raise SpecError("permuted parameters use a different ModelSpec")
    x = rng_for(seed, 0).standard_normal((num_probes, orig.spec.input_dim)).astype(np.float32)
    a = forward(orig.spec, orig, x).data
    b = forward(other.spec, other, x).data
    return float(np.abs(a - b).max())
