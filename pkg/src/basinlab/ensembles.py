"""Ensemble families: deep, SWE, constrained, distilled and their controls."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from . import tensor as tc
from .data import Dataset
from .errors import DomainError, UsageError
from .models import ModelSpec, ParamVector, forward, predict_logits
from .tensor import Tensor
from .train import (
    WARMUP_COSINE_FLOOR,
    Checkpoint,
    DivergenceError,
    TrainConfig,
    TrainState,
    continue_from,
    cross_entropy_objective,
    initial_params,
    load_checkpoint,
    make_stream,
    run_epochs,
    save_checkpoint,
)

log = logging.getLogger(__name__)

FAMILIES = ("deep", "swe", "constrained", "distilled", "deep_distilled", "permuted")


class MemberStore(Protocol):
    def get(self, key: str) -> Checkpoint | None: ...

    def put(self, key: str, ckpt: Checkpoint) -> None: ...


class DirStore:
    """Checkpoint cache under a directory: key ``member-0/epoch-50`` -> ``member-0/epoch-50.ckpt``."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, key: str) -> Path:
        return self.root / f"{key}.ckpt"

    def get(self, key: str) -> Checkpoint | None:
        p = self.path(key)
        return load_checkpoint(p) if p.exists() else None

    def put(self, key: str, ckpt: Checkpoint) -> None:
        save_checkpoint(ckpt, self.path(key))


class _NoStore:
    def get(self, key):
        return None

    def put(self, key, ckpt):
        pass


@dataclass
class EnsembleBundle:
    family: str
    members: list[Checkpoint]
    params: dict = field(default_factory=dict)
    epoch_budget: int = 0
    epochs_run: int = 0
    partial: bool = False
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.members and any(m.spec != self.members[0].spec for m in self.members):
            raise UsageError("bundle members must share one ModelSpec")

    @property
    def M(self) -> int:
        return len(self.members)

    @property
    def spec(self) -> ModelSpec:
        return self.members[0].spec

    def member_params(self) -> list[ParamVector]:
        return [m.params for m in self.members]


# -- distillation loss ----------------------------------------------------
def distill_loss(student_logits: Tensor, teacher_logits, labels, beta: float, tau: float) -> Tensor:
    """Batch mean of ``(1-beta) tau^2 KL(softmax(t/tau) || softmax(s/tau)) - beta log softmax(s)[y]``.

    ``beta == 1`` skips the teacher term entirely.
    """
    if not 0.0 <= beta <= 1.0:
        raise DomainError(f"beta must lie in [0, 1], got {beta}")
    if tau < 1.0:
        raise DomainError(f"temperature must be >= 1, got {tau}")
    if beta == 1.0:
        return tc.cross_entropy(student_logits, labels)
    kl = tc.softmax_kl(teacher_logits, student_logits, tau) * ((1.0 - beta) * tau * tau)
    if beta == 0.0:
        return kl
    return kl + tc.cross_entropy(student_logits, labels) * beta


def distill_objective(teacher: ParamVector, beta: float, tau: float) -> Callable:
    if beta == 1.0:
        return cross_entropy_objective

    def objective(logits: Tensor, x: np.ndarray, y: np.ndarray) -> Tensor:
        t_logits = forward(teacher.spec, teacher, x).data
        return distill_loss(logits, t_logits, y, beta, tau)

    return objective


# -- prediction -----------------------------------------------------------
def _members(bundle) -> list[ParamVector]:
    seq = getattr(bundle, "members", bundle)
    return [m.params if isinstance(m, Checkpoint) else m for m in seq]


def ensemble_predict(bundle, inputs) -> np.ndarray:
    """Average of member softmax outputs, float64 ``[n, K]``."""
    params = _members(bundle)
    if not params:
        raise UsageError("cannot predict with an empty ensemble")
    acc = None
    for p in params:
        z = predict_logits(p.spec, p, inputs).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        e /= e.sum(axis=1, keepdims=True)
        acc = e if acc is None else acc + e
    return acc / len(params)


def ensemble_accuracy(bundle, dataset: Dataset) -> float:
    return float((ensemble_predict(bundle, dataset.inputs).argmax(axis=1) == dataset.labels).mean())


def ensemble_log_loss(bundle, dataset: Dataset) -> float:
    p = ensemble_predict(bundle, dataset.inputs)
    return float(-np.log(p[np.arange(len(dataset)), dataset.labels]).mean())


def mean_member_log_loss(bundle, dataset: Dataset) -> float:
    return float(np.mean([ensemble_log_loss([p], dataset) for p in _members(bundle)]))


def mean_member_accuracy(bundle, dataset: Dataset) -> float:
    return float(np.mean([ensemble_accuracy([p], dataset) for p in _members(bundle)]))


# -- builders -------------------------------------------------------------
class _Builder:
    """Shared bookkeeping: cache lookups, epoch counting, divergence handling."""

    def __init__(self, spec, dataset, config, test_set, store):
        self.spec, self.dataset, self.config, self.test_set = spec, dataset, config, test_set
        self.store = store if store is not None else _NoStore()
        self.epochs_run = 0
        self.partial = False
        self.histories: dict[str, list] = {}

    def cached(self, key):
        return self.store.get(key)

    def keep(self, key, result):
        self.epochs_run += result.epochs_run
        self.histories[key] = result.history
        ckpt = result.final
        self.store.put(key, ckpt)
        return ckpt

    def guarded(self, key, fn):
        hit = self.cached(key)
        if hit is not None:
            return hit
        try:
            return self.keep(key, fn())
        except DivergenceError as exc:
            log.warning("member %s diverged: %s", key, exc)
            self.partial = True
            return None

    def trunk_state(self, t: int) -> TrainState:
        """Reference run (member 0) advanced to epoch ``t``."""
        cfg = replace(self.config, member=0)
        key = f"trunk/epoch-{t}"
        hit = self.cached(key) if cfg.reset_momentum_at_split else None
        if hit is not None:
            return TrainState(hit.params.values.copy(), np.zeros(self.spec.num_params, np.float32), t)
        params = initial_params(self.spec, cfg)
        state = TrainState(params.values.copy(), np.zeros(self.spec.num_params, np.float32), 0)
        result = run_epochs(self.spec, self.dataset, cfg, state, t, make_stream(self.dataset, cfg, 0), test_set=self.test_set)
        self.epochs_run += result.epochs_run
        self.store.put(key, result.final)
        return result.state

    def bundle(self, family, members, params, budget, **metadata) -> EnsembleBundle:
        kept = [m for m in members if m is not None]
        return EnsembleBundle(family, kept, params, budget, self.epochs_run, self.partial or len(kept) < len(members), dict(metadata, histories=self.histories))


def _train_member(b: _Builder, member: int, init: ParamVector | None = None):
    cfg = replace(b.config, member=member)
    params = init if init is not None else initial_params(b.spec, cfg)
    state = TrainState(params.values.copy(), np.zeros(b.spec.num_params, np.float32), 0)
    return run_epochs(b.spec, b.dataset, cfg, state, cfg.epochs, make_stream(b.dataset, cfg, member), test_set=b.test_set)


def build_deep(spec, dataset, M: int, config: TrainConfig, test_set=None, store: MemberStore | None = None) -> EnsembleBundle:
    """``M`` independent runs: member ``k`` uses init and stream seeds derived from ``(master, k)``."""
    if M < 1:
        raise UsageError("M must be >= 1")
    b = _Builder(spec, dataset, config, test_set, store)
    T = config.epochs
    members = [b.guarded(f"member-{k}/epoch-{T}", lambda k=k: _train_member(b, k)) for k in range(M)]
    return b.bundle("deep", members, {"M": M, "T": T, "master_seed": config.master_seed}, M * T)


def build_swe(spec, dataset, M: int, config: TrainConfig, floor_lr: float = 0.01, test_set=None, store: MemberStore | None = None) -> EnsembleBundle:
    """One run: warmup-cosine clamped at ``floor_lr``; a snapshot every ``T`` epochs."""
    if floor_lr <= 0:
        raise UsageError("floor_lr must be > 0")
    T = config.epochs
    cfg = replace(config, schedule=WARMUP_COSINE_FLOOR, floor_lr=floor_lr, member=0)
    b = _Builder(spec, dataset, cfg, test_set, store)
    keys = [f"member-{k}/epoch-{(k + 1) * T}" for k in range(M)]
    members = [b.cached(k) for k in keys]
    if any(m is None for m in members):
        state = TrainState(initial_params(spec, cfg).values.copy(), np.zeros(spec.num_params, np.float32), 0)
        snaps = [(k + 1) * T for k in range(M)]
        try:
            result = run_epochs(spec, dataset, cfg, state, M * T, make_stream(dataset, cfg, 0), test_set=test_set, snapshot_epochs=snaps)
            b.epochs_run += result.epochs_run
            b.histories["run"] = result.history
            members = [c for c in result.checkpoints if c.epoch in snaps]
            for key, ckpt in zip(keys, members):
                b.store.put(key, ckpt)
        except DivergenceError as exc:
            log.warning("SWE run diverged: %s", exc)
            b.partial = True
            members = []
    params = {"M": M, "T": T, "floor_lr": floor_lr, "master_seed": config.master_seed}
    return b.bundle("swe", members, params, M * T)


def build_constrained(spec, dataset, M: int, config: TrainConfig, t: int, test_set=None, store: MemberStore | None = None) -> EnsembleBundle:
    """Split the reference run at epoch ``t`` into ``M`` continuations with distinct data orders."""
    T = config.epochs
    if not 0 <= t <= T:
        raise UsageError(f"split epoch {t} outside [0, {T}]")
    b = _Builder(spec, dataset, config, test_set, store)
    keys = [f"member-{k}/epoch-{T}" for k in range(M)]
    members = [b.cached(k) for k in keys]
    if any(m is None for m in members):
        state = b.trunk_state(t)
        cfg = replace(config, member=0)
        members = [
            m if m is not None else b.guarded(key, lambda k=k: continue_from(spec, dataset, cfg, state, k, T, test_set=test_set))
            for k, (key, m) in enumerate(zip(keys, members))
        ]
    params = {"M": M, "T": T, "t": t, "master_seed": config.master_seed, "reset_momentum_at_split": config.reset_momentum_at_split}
    return b.bundle("constrained", members, params, t + M * (T - t))


def build_distilled(
    spec,
    dataset,
    deep_bundle: EnsembleBundle,
    config: TrainConfig,
    t: int,
    beta: float,
    tau: float = 3.0,
    distill_epochs: int | None = None,
    test_set=None,
    store: MemberStore | None = None,
) -> EnsembleBundle:
    """Re-discover each deep member inside the reference member's basin.

    Member 0 continues the reference run from epoch ``t`` with plain
    cross-entropy. Member ``j`` starts from the same epoch-``t`` state and
    minimises :func:`distill_loss` towards deep member ``j``. ``config`` must be
    the one the deep bundle was built with, so the epoch-``t`` state is the
    reference member's own.
    """
    T = config.epochs
    M = deep_bundle.M
    if M < 2:
        raise UsageError("distillation needs a deep bundle with at least two members")
    if not 0.0 <= beta <= 1.0:
        raise DomainError(f"beta must lie in [0, 1], got {beta}")
    if distill_epochs is None:
        distill_epochs = T - t
    if t < 0 or distill_epochs < 0 or t + distill_epochs > T:
        raise UsageError(f"split {t} plus {distill_epochs} distillation epochs exceeds T={T}")
    end = t + distill_epochs
    b = _Builder(spec, dataset, config, test_set, store)
    keys = [f"member-{k}/epoch-{end}" for k in range(M)]
    members = [b.cached(k) for k in keys]
    if any(m is None for m in members):
        state = b.trunk_state(t)
        cfg = replace(config, member=0)
        for j, key in enumerate(keys):
            if members[j] is not None:
                continue
            objective = cross_entropy_objective if j == 0 else distill_objective(deep_bundle.members[j].params, beta, tau)
            members[j] = b.guarded(key, lambda j=j, o=objective: continue_from(spec, dataset, cfg, state, j, end, o, test_set))
    params = {"M": M, "T": T, "t": t, "beta": beta, "tau": tau, "distill_epochs": distill_epochs, "master_seed": config.master_seed}
    return b.bundle("distilled", members, params, t + M * distill_epochs, reference_member="plain cross-entropy continuation")


def build_deep_distilled(
    spec,
    dataset,
    deep_bundle: EnsembleBundle,
    config: TrainConfig,
    beta: float,
    tau: float = 3.0,
    test_set=None,
    store: MemberStore | None = None,
) -> EnsembleBundle:
    """Multi-basin control: student ``j`` starts from its own fresh initialisation.

    Students use member ids ``M + j`` for init and data-order seeds (distinct
    from every teacher) and distil towards deep member ``j`` for ``T`` epochs.
    """
    M = deep_bundle.M
    T = config.epochs
    b = _Builder(spec, dataset, config, test_set, store)
    members = []
    for j in range(M):
        sid = M + j
        cfg = replace(config, member=sid)
        objective = distill_objective(deep_bundle.members[j].params, beta, tau)

        def fit(cfg=cfg, sid=sid, objective=objective):
            state = TrainState(initial_params(spec, cfg).values.copy(), np.zeros(spec.num_params, np.float32), 0)
            return run_epochs(spec, dataset, cfg, state, T, make_stream(dataset, cfg, sid), objective, test_set)

        members.append(b.guarded(f"member-{j}/epoch-{T}", fit))
    params = {"M": M, "T": T, "beta": beta, "tau": tau, "master_seed": config.master_seed, "student_ids": list(range(M, 2 * M))}
    return b.bundle("deep_distilled", members, params, M * T)
