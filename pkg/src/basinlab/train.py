"""SGD-with-momentum training, learning-rate schedules and checkpoints."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tc
from .data import BatchStream, Dataset, mix_seed, next_batch, rng_for
from .errors import FormatError, NonFiniteError, UsageError
from .models import ModelSpec, ParamVector, forward_tensors, init_params, predict_logits, unflatten
from .tensor import Tensor

log = logging.getLogger(__name__)

WARMUP_COSINE = "warmup_cosine"
WARMUP_COSINE_FLOOR = "warmup_cosine_floor"

# Seed-derivation keys under mix_seed(master, member, key).
INIT_KEY, SHUFFLE_KEY, AUG_KEY = 0, 1, 2


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 128
    peak_lr: float = 0.1
    warmup_frac: float = 0.1
    schedule: str = WARMUP_COSINE
    floor_lr: float = 0.0
    momentum: float = 0.9
    master_seed: int = 0
    member: int = 0
    jitter: float = 0.0
    flip: bool = False
    reset_momentum_at_split: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise UsageError("epochs must be >= 0")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise UsageError("warmup_frac must lie in [0, 1)")
        if self.peak_lr < 0:
            raise UsageError("peak_lr must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise UsageError("momentum must lie in [0, 1)")
        if self.schedule not in (WARMUP_COSINE, WARMUP_COSINE_FLOOR):
            raise UsageError(f"unknown schedule {self.schedule!r}")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(config: TrainConfig, global_step: int, steps_per_epoch: int) -> float:
    """Linear warmup to ``peak_lr``, then cosine decay towards zero.

    With the floor schedule the decay stops at ``floor_lr`` and stays there,
    including past the end of the nominal ``epochs * steps_per_epoch`` budget.
    """
    total = config.epochs * steps_per_epoch
    floor = config.schedule == WARMUP_COSINE_FLOOR
    if global_step < 0 or (global_step > total and not floor):
        raise UsageError(f"step {global_step} outside [0, {total}]")
    if global_step >= total:
        return config.floor_lr if floor else 0.0
    warm = int(round(config.warmup_frac * total))
    if global_step < warm:
        lr = config.peak_lr * global_step / warm
    else:
        progress = (global_step - warm) / max(total - warm, 1)
        lr = config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
    if floor and global_step >= warm:
        lr = max(lr, config.floor_lr)
    return lr


# -- checkpoints ----------------------------------------------------------
CKPT_MAGIC = b"LBEN"
CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass(frozen=True, eq=False)
class Checkpoint:
    spec: ModelSpec
    params: ParamVector
    epoch: int
    config_digest: str = ""
    metrics: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    format_version: int = CKPT_VERSION


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = json.dumps(
        {
            "spec": ckpt.spec.to_dict(),
            "epoch": ckpt.epoch,
            "config_digest": ckpt.config_digest,
            "config": ckpt.config,
            "metrics": ckpt.metrics,
        },
        sort_keys=True,
    ).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<HI", CKPT_VERSION, len(header)))
    buf.write(header)
    for name, arr in ckpt.params.tensors().items():
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        data = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(struct.pack("<B", _DTYPE_CODES[data.dtype]))
        buf.write(data.tobytes())
    return buf.getvalue()


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if len(raw) < 10 or raw[:4] != CKPT_MAGIC:
        raise FormatError("not a checkpoint: bad magic")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos = 10
    if pos + hlen > len(raw):
        raise FormatError("truncated checkpoint header")
    try:
        header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
        spec = ModelSpec.from_dict(header["spec"])
    except (ValueError, KeyError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from exc
    pos += hlen

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError("truncated checkpoint payload")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    named = {}
    while pos < len(raw):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        (code,) = struct.unpack("<B", take(1))
        if code not in _CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code}")
        dtype = _CODE_DTYPES[code]
        count = int(np.prod(dims)) if rank else 1
        named[name] = np.frombuffer(take(count * dtype.itemsize), dtype=dtype).reshape(dims)
    expected = [s.name for s in spec.layout]
    if list(named) != expected:
        raise FormatError("checkpoint tensors do not match the model layout")
    try:
        params = ParamVector.from_tensors(spec, named)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    return Checkpoint(
        spec,
        params,
        int(header["epoch"]),
        header.get("config_digest", ""),
        header.get("metrics", {}),
        header.get("config", {}),
        version,
    )


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write(path, encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return decode_checkpoint(raw)


# -- evaluation -----------------------------------------------------------
def evaluate(spec: ModelSpec, params, dataset: Dataset) -> tuple[float, float]:
    """Mean cross-entropy and accuracy (fraction) on ``dataset``."""
    logits = predict_logits(spec, params, dataset.inputs).astype(np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = dataset.labels
    loss = -logp[np.arange(len(y)), y].mean()
    acc = (logits.argmax(axis=1) == y).mean()
    return float(loss), float(acc)


# -- training -------------------------------------------------------------
Objective = Callable[[Tensor, np.ndarray, np.ndarray], Tensor]


def cross_entropy_objective(logits: Tensor, x: np.ndarray, y: np.ndarray) -> Tensor:
    return tc.cross_entropy(logits, y)


class DivergenceError(NonFiniteError):
    """Training produced a non-finite loss; ``last_checkpoint`` is the last finite state."""

    def __init__(self, message: str, last_checkpoint: Checkpoint | None, history: list):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
        self.history = history


@dataclass
class TrainState:
    params: np.ndarray
    velocity: np.ndarray
    epoch: int


@dataclass
class TrainResult:
    checkpoints: list[Checkpoint]
    history: list[dict]
    state: TrainState
    epochs_run: int

    @property
    def final(self) -> Checkpoint:
        return self.checkpoints[-1]


def make_stream(dataset: Dataset, config: TrainConfig, member: int) -> BatchStream:
    return BatchStream(
        dataset,
        config.batch_size,
        mix_seed(config.master_seed, member, SHUFFLE_KEY),
        mix_seed(config.master_seed, member, AUG_KEY),
        config.jitter,
        config.flip,
    )


def initial_params(spec: ModelSpec, config: TrainConfig, member: int | None = None) -> ParamVector:
    m = config.member if member is None else member
    return init_params(spec, rng_for(config.master_seed, m, INIT_KEY))


def run_epochs(
    spec: ModelSpec,
    dataset: Dataset,
    config: TrainConfig,
    state: TrainState,
    end_epoch: int,
    stream: BatchStream,
    objective: Objective = cross_entropy_objective,
    test_set: Dataset | None = None,
    snapshot_epochs: Sequence[int] = (),
) -> TrainResult:
    """Advance ``state`` in place from ``state.epoch`` to ``end_epoch``.

    The global step, and therefore the learning rate, is derived from the epoch
    index, so a continuation picks the schedule up where it was left.
    """
    spe = stream.steps_per_epoch
    theta, vel = state.params, state.velocity
    views = unflatten(spec, theta)
    grad = np.empty_like(theta)
    mu = np.float32(config.momentum)
    digest, cfg = config.digest(), config.to_dict()
    wanted = set(snapshot_epochs) | {end_epoch}
    history: list[dict] = []
    ckpts: list[Checkpoint] = []
    last_good: Checkpoint | None = None
    start = state.epoch

    def snapshot(epoch, metrics):
        return Checkpoint(spec, ParamVector(theta.copy(), spec), epoch, digest, metrics, cfg)

    if start in wanted:
        ckpts.append(snapshot(start, {}))
    for epoch in range(start, end_epoch):
        losses = []
        lr = 0.0
        for step in range(spe):
            lr = lr_at(config, epoch * spe + step, spe)
            x, y = next_batch(stream, epoch, step)
            leaves = {k: Tensor(v, requires_grad=True) for k, v in views.items()}
            try:
                logits = forward_tensors(spec, leaves, Tensor(x))
                loss = objective(logits, x, y)
                loss_value = float(loss.data)
                if not math.isfinite(loss_value):
                    raise NonFiniteError("loss is not finite")
                loss.backward()
            except NonFiniteError as exc:
                last_good = last_good or snapshot(epoch, {})
                msg = f"diverged at epoch {epoch} step {step}: {exc}"
                log.error(msg)
                raise DivergenceError(msg, last_good, history) from exc
            for s in spec.layout:
                g = leaves[s.name].grad
                grad[s.offset : s.offset + s.size] = 0.0 if g is None else g.ravel()
            vel *= mu
            vel += grad
            theta -= np.float32(lr) * vel
            losses.append(loss_value)
        row = {"epoch": epoch + 1, "lr": lr, "train_loss": float(np.mean(losses)) if losses else float("nan")}
        if test_set is not None:
            row["test_acc"] = evaluate(spec, theta, test_set)[1]
        history.append(row)
        state.epoch = epoch + 1
        if not np.isfinite(theta).all():
            msg = f"parameters became non-finite at epoch {epoch + 1}"
            raise DivergenceError(msg, last_good, history)
        last_good = None
        if epoch + 1 in wanted:
            ckpts.append(snapshot(epoch + 1, row))
            last_good = ckpts[-1]
    return TrainResult(ckpts, history, state, end_epoch - start)


def train(
    spec: ModelSpec,
    dataset: Dataset,
    config: TrainConfig,
    test_set: Dataset | None = None,
    snapshot_epochs: Sequence[int] = (),
    init: ParamVector | None = None,
) -> TrainResult:
    """Train one member from scratch for ``config.epochs`` epochs.

    Returns the checkpoints at ``snapshot_epochs`` (epoch 0 allowed) and the
    final epoch. Identical inputs give bitwise-identical checkpoints.
    """
    params = init if init is not None else initial_params(spec, config)
    state = TrainState(params.values.copy(), np.zeros(spec.num_params, np.float32), 0)
    stream = make_stream(dataset, config, config.member)
    return run_epochs(spec, dataset, config, state, config.epochs, stream, test_set=test_set, snapshot_epochs=snapshot_epochs)


@dataclass
class SplitResult:
    trunk: TrainResult
    branches: list[TrainResult]
    epochs_run: int

    @property
    def members(self) -> list[Checkpoint]:
        return [b.final for b in self.branches]


def continue_from(
    spec: ModelSpec,
    dataset: Dataset,
    config: TrainConfig,
    state: TrainState,
    member: int,
    end_epoch: int,
    objective: Objective = cross_entropy_objective,
    test_set: Dataset | None = None,
) -> TrainResult:
    """Branch off a copy of ``state`` using member ``member``'s data stream."""
    vel = np.zeros_like(state.velocity) if config.reset_momentum_at_split else state.velocity.copy()
    branch = TrainState(state.params.copy(), vel, state.epoch)
    stream = make_stream(dataset, config, member)
    return run_epochs(spec, dataset, config, branch, end_epoch, stream, objective, test_set)


def split_train(
    spec: ModelSpec,
    dataset: Dataset,
    config: TrainConfig,
    t: int,
    M: int,
    test_set: Dataset | None = None,
) -> SplitResult:
    """Train to epoch ``t`` once, then continue ``M`` times with distinct data streams.

    Branch ``k`` uses the shuffle/augmentation seeds of member ``k``; branch 0
    therefore replays the trunk's own stream. Consumes ``t + M (T - t)`` epochs.
    """
    T = config.epochs
    if not 0 <= t <= T:
        raise UsageError(f"split epoch {t} outside [0, {T}]")
    if M < 1:
        raise UsageError("M must be >= 1")
    base = replace(config, member=0)
    params = initial_params(spec, base)
    state = TrainState(params.values.copy(), np.zeros(spec.num_params, np.float32), 0)
    trunk = run_epochs(spec, dataset, base, state, t, make_stream(dataset, base, 0), test_set=test_set)
    branches = [continue_from(spec, dataset, base, trunk.state, k, T, test_set=test_set) for k in range(M)]
    return SplitResult(trunk, branches, t + sum(b.epochs_run for b in branches))
