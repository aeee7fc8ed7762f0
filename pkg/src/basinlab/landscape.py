"""Connectivity and diversity measurements over trained members.

Accuracies are computed as fractions and reported in percentage points.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset, rng_for
from .errors import DegenerateGeometryError, UsageError
from .models import ModelSpec, ParamVector, interpolate, predict_logits
from .train import Checkpoint, evaluate

JSD_VARIANT = "one_vs_all: mean_i JSD(p_i, mean_{j!=i} p_j), equal mixture weights, natural log"
DEFAULT_LAMBDAS = tuple(np.linspace(0.0, 1.0, 21))


def as_params(obj) -> ParamVector:
    if isinstance(obj, ParamVector):
        return obj
    if isinstance(obj, Checkpoint):
        return obj.params
    raise UsageError(f"cannot interpret {type(obj).__name__} as parameters")


def member_params(members) -> list[ParamVector]:
    """Parameters of a bundle, a list of checkpoints, or a list of vectors."""
    seq = getattr(members, "members", members)
    params = [as_params(m) for m in seq]
    if params and any(p.spec != params[0].spec for p in params):
        raise UsageError("members do not share one ModelSpec")
    return params


def accuracy(params: ParamVector, eval_set: Dataset) -> float:
    return evaluate(params.spec, params, eval_set)[1]


def member_probs(params: Sequence[ParamVector], eval_set: Dataset) -> np.ndarray:
    """Softmax outputs ``[M, n, K]`` in float64."""
    out = []
    for p in params:
        z = predict_logits(p.spec, p, eval_set.inputs).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        out.append(e / e.sum(axis=1, keepdims=True))
    return np.stack(out)


def _baseline(weights: Sequence[float], accs: Sequence[float]) -> float:
    """``sum_i w_i * acc_i`` anchored at the heaviest member, like ``interpolate``.

    Keeps endpoint and repeated-member cases exactly equal to the member accuracy.
    """
    k = int(np.argmax(weights))
    out = accs[k]
    for i, (w, a) in enumerate(zip(weights, accs)):
        if i != k and w != 0.0:
            out += w * (a - accs[k])
    return out


# -- pairwise -------------------------------------------------------------
@dataclass
class PairCurve:
    pair: tuple[int, int]
    lambdas: list[float]
    accuracy: list[float]
    q_pair: list[float]

    def at(self, lam: float) -> float:
        i = int(np.argmin(np.abs(np.asarray(self.lambdas) - lam)))
        return self.q_pair[i]


def q_pair_curve(theta_i, theta_j, eval_set: Dataset, lambdas: Sequence[float] = DEFAULT_LAMBDAS, pair=(0, 1)) -> PairCurve:
    """Accuracy along ``lam * theta_i + (1 - lam) * theta_j`` minus the linear baseline."""
    a, b = as_params(theta_i), as_params(theta_j)
    if a.spec != b.spec:
        raise UsageError("pair members have different ModelSpecs")
    lam = [float(x) for x in lambdas]
    acc_a, acc_b = accuracy(a, eval_set), accuracy(b, eval_set)
    accs, qs = [], []
    for l in lam:
        acc = accuracy(interpolate([a, b], [l, 1.0 - l]), eval_set)
        accs.append(acc)
        qs.append(100.0 * (acc - _baseline([l, 1.0 - l], [acc_a, acc_b])))
    return PairCurve(tuple(pair), lam, accs, qs)


# -- joint ----------------------------------------------------------------
def dirichlet_ones(M: int, N: int, seed: int) -> np.ndarray:
    """``N`` draws from Dir(1, ..., 1) as normalised unit-rate exponentials."""
    e = rng_for(seed, 0).exponential(1.0, size=(N, M))
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class JointConnectivityReport:
    N: int
    seed: int
    weights: list[list[float]]
    q_joint: list[float]
    mean: float
    std: float
    member_accuracy: list[float] = field(default_factory=list)


def q_joint_report(members, eval_set: Dataset, N: int = 50, seed: int = 0) -> JointConnectivityReport:
    """Mean over Dirichlet(1) weightings of interpolated accuracy minus weighted member accuracy."""
    params = member_params(members)
    if N < 1:
        raise UsageError("N must be >= 1")
    if len(params) < 2:
        raise UsageError("joint connectivity needs at least two members")
    accs = np.array([accuracy(p, eval_set) for p in params])
    lams = dirichlet_ones(len(params), N, seed)
    qs = []
    for lam in lams:
        acc = accuracy(interpolate(params, lam), eval_set)
        qs.append(100.0 * (acc - _baseline(lam, accs.tolist())))
    qs_arr = np.asarray(qs)
    return JointConnectivityReport(N, seed, lams.tolist(), qs, float(qs_arr.mean()), float(qs_arr.std()), accs.tolist())


# -- plane ----------------------------------------------------------------
@dataclass
class PlaneGrid:
    origin: np.ndarray
    u_hat: np.ndarray
    v_hat: np.ndarray
    spec: ModelSpec
    alphas: np.ndarray
    betas: np.ndarray
    loss: np.ndarray  # [len(betas), len(alphas)]
    acc: np.ndarray
    anchor_coords: list[tuple[float, float]]
    anchor_metrics: list[tuple[float, float]]

    def point(self, alpha: float, beta: float) -> ParamVector:
        theta = self.origin + alpha * self.u_hat + beta * self.v_hat
        return ParamVector(theta.astype(np.float32), self.spec)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["alpha", "beta", "loss", "acc"])
        for j, b in enumerate(self.betas):
            for i, a in enumerate(self.alphas):
                w.writerow([f"{a:.9g}", f"{b:.9g}", f"{self.loss[j, i]:.9g}", f"{self.acc[j, i]:.9g}"])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "alphas": self.alphas.tolist(),
            "betas": self.betas.tolist(),
            "loss": self.loss.tolist(),
            "acc": self.acc.tolist(),
            "anchors": [{"alpha": a, "beta": b, "loss": l, "acc": c} for (a, b), (l, c) in zip(self.anchor_coords, self.anchor_metrics)],
        }


def plane_basis(t1, t2, t3) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[tuple[float, float]]]:
    """Gram-Schmidt basis of the plane through three parameter vectors (origin at the first)."""
    a, b, c = (as_params(t).values.astype(np.float64) for t in (t1, t2, t3))
    u = b - a
    nu = np.linalg.norm(u)
    if nu == 0:
        raise DegenerateGeometryError("second anchor coincides with the first")
    u_hat = u / nu
    w = c - a
    v = w - (w @ u_hat) * u_hat
    nv = np.linalg.norm(v)
    if nv < 1e-9 * np.linalg.norm(w) or nv == 0:
        raise DegenerateGeometryError("anchors are colinear")
    v_hat = v / nv
    coords = [(0.0, 0.0), (float(nu), 0.0), (float(w @ u_hat), float(nv))]
    return a, u_hat, v_hat, coords


def plane_grid(t1, t2, t3, eval_set: Dataset, resolution: int = 25, margin: float = 0.2) -> PlaneGrid:
    """Loss and accuracy over the plane spanned by three anchors."""
    anchors = [as_params(t) for t in (t1, t2, t3)]
    spec = anchors[0].spec
    origin, u_hat, v_hat, coords = plane_basis(*anchors)
    xs = [c[0] for c in coords]
    ys = [c[1] for c in coords]
    wx, wy = max(xs) - min(xs), max(ys) - min(ys)
    alphas = np.linspace(min(xs) - margin * wx, max(xs) + margin * wx, resolution)
    betas = np.linspace(min(ys) - margin * wy, max(ys) + margin * wy, resolution)
    grid = PlaneGrid(origin, u_hat, v_hat, spec, alphas, betas, np.zeros((resolution, resolution)), np.zeros((resolution, resolution)), coords, [])

    def metrics(params):
        return evaluate(spec, params, eval_set)

    for j, b in enumerate(betas):
        for i, a in enumerate(alphas):
            grid.loss[j, i], grid.acc[j, i] = metrics(grid.point(a, b))
    # Anchor cells go through the same evaluation with the anchors' exact parameters.
    grid.anchor_metrics = [metrics(p) for p in anchors]
    return grid


# -- diversity ------------------------------------------------------------
def predictive_variance(members, eval_set: Dataset) -> float:
    """Mean over examples of the unbiased across-member variance of p(y_true | x)."""
    params = member_params(members)
    if len(params) < 2:
        raise UsageError("predictive variance needs at least two members")
    probs = member_probs(params, eval_set)
    true = probs[:, np.arange(len(eval_set)), eval_set.labels]
    return float(true.var(axis=0, ddof=1).mean())


def _kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p > 0, p * np.log(p / q), 0.0)
    return t.sum(axis=-1)


def jsd_from_probs(probs: np.ndarray) -> np.ndarray:
    """Per-member, per-example one-vs-all JSD ``[M, n]`` from ``probs[M, n, K]``."""
    M = probs.shape[0]
    if M < 2:
        raise UsageError("one-vs-all JSD needs at least two members")
    total = probs.sum(axis=0)
    out = np.empty(probs.shape[:2])
    for i in range(M):
        rest = (total - probs[i]) / (M - 1)
        m = 0.5 * (probs[i] + rest)
        out[i] = 0.5 * _kl_rows(probs[i], m) + 0.5 * _kl_rows(rest, m)
    return out


def one_vs_all_jsd(members, eval_set: Dataset) -> float:
    params = member_params(members)
    if len(params) < 2:
        raise UsageError("one-vs-all JSD needs at least two members")
    return float(jsd_from_probs(member_probs(params, eval_set)).mean())


@dataclass
class DiversityReport:
    predictive_variance: float
    jsd: float
    member_accuracy: list[float]
    eval_set: str
    jsd_variant: str = JSD_VARIANT


def diversity_report(members, eval_set: Dataset) -> DiversityReport:
    params = member_params(members)
    return DiversityReport(
        predictive_variance(params, eval_set),
        one_vs_all_jsd(params, eval_set),
        [100.0 * accuracy(p, eval_set) for p in params],
        eval_set.split,
    )


def report_json(report) -> str:
    payload = report.to_json() if hasattr(report, "to_json") else asdict(report)
    return json.dumps(payload, indent=2, sort_keys=True, default=_jsonable)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")
