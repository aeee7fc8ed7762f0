"""The default desk task: 2-D Gaussian blobs, K=4, MLP 2-64-64-4 with LayerNorm, M=5, T=50.

The blob layout (12 clusters per class, spread 0.06, 2048 training points,
batch 64) is dense enough that independently trained members carve the
clusters differently, so ensembles show measurable diversity.
"""
from __future__ import annotations

from dataclasses import dataclass

from .data import Dataset, make_gaussian_blobs
from .models import ModelSpec
from .train import TrainConfig

K = 4
M = 5
T = 50
WIDTHS = (64, 64)
BLOBS = {"K": K, "clusters_per_class": 12, "n_train": 2048, "n_test": 4096, "d": 2, "spread": 0.06, "seed": 0}
BATCH_SIZE = 64
PEAK_LR = 0.1
SPLIT_GRID = (0, T // 8, T // 4, T // 2, 3 * T // 4)
DISTILL_SPLIT = 15
BETA, TAU = 0.2, 3.0


@dataclass(frozen=True)
class DeskTask:
    train: Dataset
    test: Dataset
    spec: ModelSpec

    def config(self, seed: int) -> TrainConfig:
        return TrainConfig(epochs=T, batch_size=BATCH_SIZE, peak_lr=PEAK_LR, master_seed=seed)


def desk_task() -> DeskTask:
    train, test = make_gaussian_blobs(**BLOBS)
    return DeskTask(train, test, ModelSpec(2, K, WIDTHS))


def desk_manifest(family: str, experiment: str | None = None, **ensemble) -> dict:
    """Manifest document for one family on the desk task."""
    return {
        "experiment": experiment or f"desk-{family}",
        "dataset": {"kind": "blobs", **BLOBS},
        "model": {"widths": list(WIDTHS)},
        "ensemble": {"family": family, "M": M, **ensemble},
        "train": {"epochs": T, "batch_size": BATCH_SIZE, "peak_lr": PEAK_LR},
        "metrics": ["ensemble_accuracy", "mean_member_accuracy", "q_joint", "one_vs_all_jsd", "predictive_variance"],
        "seeds": [0, 1, 2, 3, 4],
    }
