"""Implementations behind the ``basinlab`` subcommands.

Run directory layout::

    <out>/<experiment>/run.json                       manifest as run
    <out>/<experiment>/seed-<s>/member-<k>/epoch-<e>.ckpt
    <out>/<experiment>/seed-<s>/trunk/epoch-<t>.ckpt  split-point state (constrained, distilled)
    <out>/<experiment>/seed-<s>/teachers/...          deep teachers (distilled families)
    <out>/<experiment>/seed-<s>/source/...            unaligned members (permuted family)
    <out>/<experiment>/seed-<s>/metrics.json, metrics.csv
"""
from __future__ import annotations

import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import ensembles as ens
from . import landscape, plot, report
from .align import multi_pcd_align, pcd_align_all, permuted_members, verify_function_preservation
from .errors import FormatError, UsageError
from .manifest import ExperimentManifest, build_datasets, load_manifest
from .train import Checkpoint, atomic_write, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

RUN_JSON = "run.json"
_MEMBER_DIR = re.compile(r"^member-(\d+)$")
_EPOCH_FILE = re.compile(r"^epoch-(\d+)\.ckpt$")


def deterministic() -> bool:
    return os.environ.get("BASINLAB_DETERMINISTIC", "") == "1"


# -- run ------------------------------------------------------------------
@dataclass
class SeedOutcome:
    seed: int
    directory: Path
    epochs_run: int
    partial: bool
    records: list


def _write_json(path: Path, payload) -> None:
    atomic_write(path, (json.dumps(payload, indent=2, sort_keys=True, default=_plain) + "\n").encode())


def _plain(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _build_bundle(m: ExperimentManifest, seed: int, seed_dir: Path, train_set):
    e = m.ensemble
    family, M = e["family"], e["M"]
    cfg = m.train_config(seed)
    spec = m.model_spec(train_set)
    store = ens.DirStore(seed_dir)
    T = cfg.epochs
    t = e.get("t", T // 2)
    beta, tau = e.get("beta", 0.2), e.get("tau", 3.0)
    if family == "deep":
        return ens.build_deep(spec, train_set, M, cfg, store=store)
    if family == "swe":
        return ens.build_swe(spec, train_set, M, cfg, floor_lr=e.get("floor_lr", 0.01), store=store)
    if family == "constrained":
        return ens.build_constrained(spec, train_set, M, cfg, t, store=store)
    if family in ("distilled", "deep_distilled"):
        teachers = ens.build_deep(spec, train_set, M, cfg, store=ens.DirStore(seed_dir / "teachers"))
        if teachers.partial:
            return teachers
        if family == "distilled":
            b = ens.build_distilled(spec, train_set, teachers, cfg, t, beta, tau, e.get("distill_epochs"), store=store)
        else:
            b = ens.build_deep_distilled(spec, train_set, teachers, cfg, beta, tau, store=store)
        b.epochs_run += teachers.epochs_run
        return b
    # permuted: deep members aligned into member 0's basin
    source = ens.build_deep(spec, train_set, M, cfg, store=ens.DirStore(seed_dir / "source"))
    if source.partial or source.M < 2:
        return source
    method = e.get("align", "pcd")
    result = pcd_align_all(source.members, seed=cfg.master_seed)
    if method == "multi_pcd" and source.M >= 3:
        result = multi_pcd_align(source.members, seed=cfg.master_seed, init=result.perms)
    aligned = permuted_members(source.members, result)
    members = []
    for k, (ck, p) in enumerate(zip(source.members, aligned)):
        new = Checkpoint(ck.spec, p, ck.epoch, ck.config_digest, dict(ck.metrics), dict(ck.config))
        save_checkpoint(new, seed_dir / f"member-{k}" / f"epoch-{ck.epoch}.ckpt")
        members.append(new)
    _write_json(seed_dir / "alignment.json", {"method": method, "trace": result.trace, "sweeps": result.sweeps, "converged": result.converged, "perms": [q.to_dict() for q in result.perms]})
    return ens.EnsembleBundle("permuted", members, dict(source.params, align=method), source.epoch_budget, source.epochs_run, False, {})


def compute_metrics(bundle, names, eval_set, q_samples: int, seed: int) -> dict[str, float]:
    out = {}
    for name in names:
        if name == "ensemble_accuracy":
            out[name] = 100.0 * ens.ensemble_accuracy(bundle, eval_set)
        elif name == "mean_member_accuracy":
            out[name] = 100.0 * ens.mean_member_accuracy(bundle, eval_set)
        elif name == "ensemble_log_loss":
            out[name] = ens.ensemble_log_loss(bundle, eval_set)
        elif name == "mean_member_log_loss":
            out[name] = ens.mean_member_log_loss(bundle, eval_set)
        elif name == "q_joint":
            out[name] = landscape.q_joint_report(bundle, eval_set, q_samples, seed).mean
        elif name == "predictive_variance":
            out[name] = landscape.predictive_variance(bundle, eval_set)
        elif name == "one_vs_all_jsd":
            out[name] = landscape.one_vs_all_jsd(bundle, eval_set)
        else:
            raise UsageError(f"unknown metric {name!r}")
    return out


def run_seed(m: ExperimentManifest, seed: int, out_dir: Path, eval_split: str = "test", datasets=None) -> SeedOutcome:
    train_set, test_set = datasets or m.datasets()
    seed_dir = out_dir / m.experiment / f"seed-{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    bundle = _build_bundle(m, seed, seed_dir, train_set)
    eval_set = test_set if eval_split == "test" else train_set
    needs_pairs = {"q_joint", "predictive_variance", "one_vs_all_jsd"}
    names = [n for n in m.metrics if bundle.M >= 2 or n not in needs_pairs] if bundle.M else []
    values = compute_metrics(bundle, names, eval_set, m.q_joint_samples, seed)
    records = [report.MetricRecord(m.experiment, seed, m.ensemble["family"], k, float(v)) for k, v in values.items()]
    extra = {
        "experiment": m.experiment,
        "seed": seed,
        "family": m.ensemble["family"],
        "manifest_digest": m.digest(),
        "eval": eval_split,
        "epoch_budget": bundle.epoch_budget,
        "epochs_run": bundle.epochs_run,
        "partial": bundle.partial,
        "members": bundle.M,
    }
    report.write_metrics(seed_dir, records, extra)
    return SeedOutcome(seed, seed_dir, bundle.epochs_run, bundle.partial, records)


def cmd_run(manifest_path, seeds=None, jobs: int = 1, out=None, eval_split: str = "test") -> list[SeedOutcome]:
    m = load_manifest(manifest_path)
    if seeds is not None:
        m.seeds = list(seeds)
    out_dir = Path(out if out is not None else m.out)
    exp_dir = out_dir / m.experiment
    exp_dir.mkdir(parents=True, exist_ok=True)
    run_doc = m.to_dict() | {"source": str(Path(manifest_path).resolve())}
    _write_json(exp_dir / RUN_JSON, run_doc)
    datasets = m.datasets()
    jobs = 1 if deterministic() else max(1, jobs)
    if jobs == 1:
        return [run_seed(m, s, out_dir, eval_split, datasets) for s in m.seeds]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda s: run_seed(m, s, out_dir, eval_split, datasets), m.seeds))


# -- reading run directories ---------------------------------------------
def load_members(directory) -> list[Checkpoint]:
    """Latest checkpoint of every ``member-<k>`` directory, ordered by ``k``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(directory)
    found = []
    for sub in directory.iterdir():
        mk = _MEMBER_DIR.match(sub.name)
        if not mk or not sub.is_dir():
            continue
        epochs = [(int(me.group(1)), f) for f in sub.iterdir() if (me := _EPOCH_FILE.match(f.name))]
        if epochs:
            found.append((int(mk.group(1)), max(epochs)[1]))
    if not found:
        raise FormatError(f"{directory}: no member checkpoints found")
    return [load_checkpoint(p) for _, p in sorted(found)]


def find_datasets(directory):
    """Datasets recorded in the nearest ``run.json`` at or above ``directory``."""
    for d in [Path(directory).resolve(), *Path(directory).resolve().parents]:
        f = d / RUN_JSON
        if f.is_file():
            doc = json.loads(f.read_text())
            return build_datasets(doc["dataset"], doc.get("source"))
    raise FormatError(f"no {RUN_JSON} found at or above {directory}")


def _eval_set(directory, eval_split: str):
    train_set, test_set = find_datasets(directory)
    return test_set if eval_split == "test" else train_set


def cmd_align(directory, method: str = "pcd", out=None, seed: int = 0) -> dict:
    members = load_members(directory)
    if method not in ("pcd", "multi_pcd"):
        raise UsageError(f"unknown alignment method {method!r}")
    result = pcd_align_all(members, seed=seed)
    if method == "multi_pcd":
        result = multi_pcd_align(members, seed=seed, init=result.perms)
    aligned = permuted_members(members, result)
    out_dir = Path(out) if out is not None else Path(directory) / f"aligned-{method}"
    deviation = 0.0
    for k, (ck, p) in enumerate(zip(members, aligned)):
        deviation = max(deviation, verify_function_preservation(ck.params, p, seed=seed))
        save_checkpoint(Checkpoint(ck.spec, p, ck.epoch, ck.config_digest, dict(ck.metrics), dict(ck.config)), out_dir / f"member-{k}" / f"epoch-{ck.epoch}.ckpt")
    summary = {
        "method": method,
        "seed": seed,
        "trace": result.trace,
        "sweeps": result.sweeps,
        "converged": result.converged,
        "max_logit_deviation": deviation,
        "perms": [q.to_dict() for q in result.perms],
    }
    _write_json(out_dir / "alignment.json", summary)
    return summary


def cmd_connect(directory, pair=None, samples: int = 50, seed: int = 0, eval_split: str = "test") -> dict:
    members = load_members(directory)
    eval_set = _eval_set(directory, eval_split)
    if pair is not None:
        i, j = pair
        if not (0 <= i < len(members) and 0 <= j < len(members)):
            raise UsageError(f"pair {pair} outside 0..{len(members) - 1}")
        return asdict(landscape.q_pair_curve(members[i], members[j], eval_set, pair=(i, j)))
    return asdict(landscape.q_joint_report(members, eval_set, samples, seed))


def cmd_plane(directory, anchors=(0, 1, 2), resolution: int = 25, margin: float = 0.2, eval_split: str = "test") -> landscape.PlaneGrid:
    members = load_members(directory)
    if len(anchors) != 3 or any(not 0 <= a < len(members) for a in anchors):
        raise UsageError(f"need three anchor ids in 0..{len(members) - 1}")
    return landscape.plane_grid(*(members[a] for a in anchors), _eval_set(directory, eval_split), resolution, margin)


def cmd_diversity(directory, eval_split: str = "test") -> dict:
    members = load_members(directory)
    return asdict(landscape.diversity_report(members, _eval_set(directory, eval_split)))


def cmd_table(paths, fmt: str = "text") -> str:
    if fmt not in ("csv", "text"):
        raise UsageError(f"unknown table format {fmt!r}")
    return report.format_table(report.aggregate(report.collect_records(paths)), fmt)


PLOT_KINDS = ("pair", "plane", "scatter", "ablation")


def _read_points(path: Path) -> list[dict]:
    if path.suffix == ".csv":
        import csv

        with open(path, newline="") as fh:
            return [{"x": float(r["x"]), "y": float(r["y"]), "label": r.get("label", "")} for r in csv.DictReader(fh)]
    doc = json.loads(path.read_text())
    return doc["points"] if isinstance(doc, dict) else doc


def cmd_plot(kind: str, input_path, out, value: str = "loss", title: str = "") -> str:
    if kind not in PLOT_KINDS:
        raise UsageError(f"unknown plot kind {kind!r}; choose from {', '.join(PLOT_KINDS)}")
    path = Path(input_path)
    if kind == "scatter":
        svg = plot.scatter_plot(_read_points(path), title)
    else:
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON ({exc})") from exc
        if kind == "pair":
            curves = doc if isinstance(doc, list) else [doc]
            svg = plot.pair_curve_plot(curves, title or "Linear interpolation")
        elif kind == "plane":
            svg = plot.plane_plot(doc, value, title)
        else:
            svg = plot.ablation_plot(doc.get("x", []), doc.get("series", {}), title, doc.get("xlabel", "t"), doc.get("ylabel", ""))
    atomic_write(Path(out), svg.encode())
    return svg
