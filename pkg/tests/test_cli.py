import json
import re

import pytest

from basinlab import commands
from basinlab.cli import EXIT_IO, EXIT_SCHEMA, main
from basinlab.errors import SchemaError
from basinlab.manifest import parse_manifest
from basinlab.report import MetricRecord, aggregate, format_table, write_metrics

MANIFEST = {
    "experiment": "smoke",
    "dataset": {"kind": "blobs", "n_train": 128, "n_test": 128, "spread": 0.1},
    "model": {"widths": [8, 8]},
    "ensemble": {"family": "deep", "M": 3},
    "train": {"epochs": 2, "batch_size": 32},
    "metrics": ["ensemble_accuracy", "mean_member_accuracy", "q_joint", "one_vs_all_jsd"],
    "q_joint_samples": 4,
    "seeds": [0],
}


def write_manifest(tmp_path, **changes):
    doc = json.loads(json.dumps(MANIFEST))
    doc.update(changes)
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    path = write_manifest(tmp)
    assert main(["run", "--manifest", str(path), "--out", str(tmp / "out")]) == 0
    return tmp / "out" / "smoke" / "seed-0"


class TestManifest:
    def test_minimal_defaults(self):
        m = parse_manifest(MANIFEST)
        assert m.q_joint_samples == 4 and m.out == "runs"

    @pytest.mark.parametrize(
        "mutate,path",
        [
            (lambda d: d.update(extra=1), "extra"),
            (lambda d: d["train"].update(lr=0.1), "train/lr"),
            (lambda d: d["dataset"].update(noise=0.1), "dataset/noise"),
            (lambda d: d["ensemble"].update(M=0), "ensemble/M"),
            (lambda d: d["ensemble"].update(beta=2), "ensemble/beta"),
        ],
    )
    def test_errors_name_field(self, mutate, path):
        doc = json.loads(json.dumps(MANIFEST))
        mutate(doc)
        with pytest.raises(SchemaError) as info:
            parse_manifest(doc)
        assert info.value.path == path

    def test_unknown_key_exit_code(self, tmp_path, capsys):
        path = write_manifest(tmp_path, colour="red")
        assert main(["run", "--manifest", str(path)]) == EXIT_SCHEMA
        assert "colour" in capsys.readouterr().err

    def test_missing_file_exit_code(self, tmp_path):
        assert main(["run", "--manifest", str(tmp_path / "none.json")]) == EXIT_IO


class TestRun:
    def test_layout(self, run_dir):
        for k in range(3):
            assert (run_dir / f"member-{k}" / "epoch-2.ckpt").is_file()
        payload = json.loads((run_dir / "metrics.json").read_text())
        assert {r["metric"] for r in payload["records"]} == set(MANIFEST["metrics"])
        assert payload["epochs_run"] == 6 and payload["epoch_budget"] == 6
        assert (run_dir / "metrics.csv").read_text().startswith("experiment,seed,family,metric,value")
        assert (run_dir.parent / "run.json").is_file()

    def test_idempotent(self, run_dir):
        before = {p: p.read_bytes() for p in run_dir.rglob("*.ckpt")}
        out = commands.cmd_run(run_dir.parent.parent.parent / "manifest.json", out=run_dir.parent.parent)
        assert out[0].epochs_run == 0
        assert {p: p.read_bytes() for p in run_dir.rglob("*.ckpt")} == before

    def test_fresh_rerun_bitwise(self, run_dir, tmp_path):
        commands.cmd_run(run_dir.parent.parent.parent / "manifest.json", out=tmp_path)
        for p in run_dir.rglob("*.ckpt"):
            assert (tmp_path / "smoke" / "seed-0" / p.relative_to(run_dir)).read_bytes() == p.read_bytes()

    def test_seed_override_and_jobs(self, tmp_path):
        path = write_manifest(tmp_path, ensemble={"family": "constrained", "M": 2, "t": 1})
        assert main(["run", "--manifest", str(path), "--out", str(tmp_path / "o"), "--seeds", "3,4", "--jobs", "2"]) == 0
        assert sorted(p.name for p in (tmp_path / "o" / "smoke").glob("seed-*")) == ["seed-3", "seed-4"]

    @pytest.mark.parametrize("family", ["swe", "permuted", "deep_distilled"])
    def test_other_families(self, tmp_path, family):
        path = write_manifest(tmp_path, ensemble={"family": family, "M": 3}, metrics=["ensemble_accuracy"])
        assert main(["run", "--manifest", str(path), "--out", str(tmp_path / "o")]) == 0
        assert len(commands.load_members(tmp_path / "o" / "smoke" / "seed-0")) == 3

    def test_divergence_exit_code(self, tmp_path):
        path = write_manifest(tmp_path, train={"epochs": 2, "batch_size": 16, "peak_lr": 1e25, "warmup_frac": 0, "momentum": 0.99}, model={"widths": [8], "layer_norm": False})
        assert main(["run", "--manifest", str(path), "--out", str(tmp_path / "o")]) == 3


class TestTable:
    def inject(self, tmp_path, values):
        for seed, v in enumerate(values):
            d = tmp_path / f"seed-{seed}"
            d.mkdir()
            write_metrics(d, [MetricRecord("exp", seed, "deep", "q_joint", v)])

    def test_three_seeds(self, tmp_path):
        self.inject(tmp_path, [1.0, 2.0, 3.0])
        text = commands.cmd_table([tmp_path], "csv")
        assert text.splitlines()[1] == "exp,deep,q_joint,2.00,1.00,3"

    def test_single_seed_zero_std(self, tmp_path):
        self.inject(tmp_path, [5.5])
        assert "5.50 ± 0.00" in commands.cmd_table([tmp_path], "text")

    def test_constant_metric(self):
        rows = aggregate([MetricRecord("e", s, "f", "m", 0.7) for s in range(3)])
        assert format_table(rows, "csv").splitlines()[1].endswith("0.70,0.00,3")

    def test_non_finite_rejected(self):
        with pytest.raises(ArithmeticError):
            MetricRecord("e", 0, "f", "m", float("nan"))


class TestAnalysis:
    def test_connect_pair_and_plot(self, run_dir, tmp_path):
        out = tmp_path / "pair.json"
        assert main(["connect", str(run_dir), "--pair", "0", "1", "--out", str(out)]) == 0
        curve = json.loads(out.read_text())
        assert curve["q_pair"][0] == 0.0 and curve["q_pair"][-1] == 0.0
        svg = tmp_path / "pair.svg"
        assert main(["plot", "pair", str(out), "--out", str(svg)]) == 0
        text = svg.read_text()
        pts = re.search(r'class="series"[^>]*points="([^"]+)"', text).group(1).split()
        assert len(pts) == 21
        zero_y = re.search(r'class="zero"[^>]*y1="([^"]+)"', text).group(1)
        assert pts[0].split(",")[1] == zero_y and pts[-1].split(",")[1] == zero_y

    def test_plot_deterministic(self, run_dir, tmp_path):
        doc = commands.cmd_connect(run_dir, pair=(0, 2))
        (tmp_path / "c.json").write_text(json.dumps(doc))
        a = commands.cmd_plot("pair", tmp_path / "c.json", tmp_path / "a.svg")
        b = commands.cmd_plot("pair", tmp_path / "c.json", tmp_path / "b.svg")
        assert a == b

    def test_joint(self, run_dir):
        doc = commands.cmd_connect(run_dir, samples=6, seed=1)
        assert doc["N"] == 6 and len(doc["weights"]) == 6

    def test_plane_heatmap(self, run_dir, tmp_path):
        out = tmp_path / "plane.json"
        assert main(["plane", str(run_dir), "--resolution", "25", "--out", str(out)]) == 0
        svg = tmp_path / "plane.svg"
        assert main(["plot", "plane", str(out), "--out", str(svg)]) == 0
        text = svg.read_text()
        assert text.count('class="cell"') == 625
        assert text.count('class="anchor"') == 3

    def test_plane_csv(self, run_dir, tmp_path):
        out = tmp_path / "plane.csv"
        assert main(["plane", str(run_dir), "--resolution", "3", "--out", str(out)]) == 0
        assert len(out.read_text().splitlines()) == 10

    def test_empty_series_axes_only(self, tmp_path, caplog):
        src = tmp_path / "empty.json"
        src.write_text("[]")
        with caplog.at_level("WARNING"):
            assert main(["plot", "pair", str(src), "--out", str(tmp_path / "e.svg")]) == 0
        text = (tmp_path / "e.svg").read_text()
        assert 'class="axes"' in text and "polyline" not in text
        assert "no data" in caplog.text

    def test_scatter_and_ablation(self, tmp_path):
        pts = tmp_path / "pts.csv"
        pts.write_text("x,y,label\n-30,79,deep\n-0.1,78,constrained\n")
        commands.cmd_plot("scatter", pts, tmp_path / "s.svg")
        assert (tmp_path / "s.svg").read_text().count('class="point"') == 2
        abl = tmp_path / "abl.json"
        abl.write_text(json.dumps({"x": [0, 6, 12], "series": {"jsd": [0.3, 0.2, 0.1]}}))
        commands.cmd_plot("ablation", abl, tmp_path / "a.svg")
        assert 'data-name="jsd"' in (tmp_path / "a.svg").read_text()

    def test_unknown_kind(self, tmp_path):
        assert main(["plot", "violin", "x.json", "--out", str(tmp_path / "v.svg")]) == EXIT_SCHEMA

    def test_diversity_and_align(self, run_dir, tmp_path, capsys):
        assert main(["diversity", str(run_dir)]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["jsd"] >= 0 and doc["predictive_variance"] >= 0
        assert main(["align", str(run_dir), "--out", str(tmp_path / "al")]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["max_logit_deviation"] < 1e-5
        assert len(commands.load_members(tmp_path / "al")) == 3

    def test_missing_directory(self, tmp_path):
        assert main(["diversity", str(tmp_path / "nothing")]) == EXIT_IO
