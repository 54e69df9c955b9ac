import json

import numpy as np
import pytest

from gcformer import cli
from gcformer.experiment import (
    PRESETS,
    ExperimentSpec,
    ResultRecord,
    emit_report,
    read_csv,
    read_jsonl,
    run_ablation,
    run_experiment,
    summarize,
)
from gcformer.graph_core import load_graph, read_features_binary
from gcformer.model import load_checkpoint
from gcformer.tokens import TokenSequences
from gcformer.training import TrainConfig

DATA = {"sbm_blocks": [10, 10], "sbm_p_intra": 0.3, "sbm_p_inter": 0.05, "sbm_feature_dim": 4, "sbm_seed": 1}
FAST = dict(k=2, p_k=2, n_k=2, hidden_dim=4, dropout=0.0, max_epochs=3, patience=3, precision="f64")
FAST_FLAGS = ["--sbm-blocks", "10,10", "--sbm-feature-dim", "4", "--k", "2", "--p-k", "2", "--n-k", "2",
              "--hidden-dim", "4", "--max-epochs", "3", "--patience", "3"]


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    out = tmp_path_factory.mktemp("abl")
    spec = ExperimentSpec(TrainConfig(**FAST), DATA, repeats=2, output_dir=out)
    return out, run_ablation(spec)


class TestExperimentSpec:
    def test_no_sweep_single_cell(self):
        spec = ExperimentSpec(TrainConfig(**FAST), DATA, repeats=3)
        (rec,) = run_experiment(spec)
        assert rec.cell == {} and len(rec.accuracies) == 3 and rec.seeds == [0, 1, 2]

    def test_sampling_preset_cells(self):
        cells = ExperimentSpec(TrainConfig(), DATA, PRESETS["sampling"]).cells()
        assert len(cells) == 81
        assert {(c["p_k"], c["n_k"]) for c in cells} == {(p, q) for p in range(2, 11) for q in range(2, 11)}

    def test_alpha_preset_cells(self):
        cells = ExperimentSpec(TrainConfig(), DATA, PRESETS["alpha"]).cells()
        assert [c["alpha"] for c in cells] == [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]

    @pytest.mark.parametrize("sweep", [{"nope": [1]}, {"seed": [1, 2]}])
    def test_bad_axes(self, sweep):
        with pytest.raises(ValueError):
            ExperimentSpec(TrainConfig(), DATA, sweep)

    def test_small_grid_runs_every_cell(self):
        spec = ExperimentSpec(TrainConfig(**FAST), DATA, {"p_k": [2, 3], "n_k": [2, 3]}, repeats=1)
        recs = run_experiment(spec)
        assert [r.cell for r in recs] == spec.cells()
        assert all(r.status == "ok" for r in recs)

    def test_failed_cell_is_recorded(self, tmp_path):
        spec = ExperimentSpec(TrainConfig(**FAST), DATA, {"p_k": [2, 30]}, repeats=1, output_dir=tmp_path)
        ok, bad = run_experiment(spec)
        assert ok.status == "ok"
        assert bad.status == "failed" and "p_k" in bad.error and bad.accuracies == []
        assert len(read_jsonl(tmp_path / "results.jsonl")) == 2

    def test_records_deterministic(self):
        spec = ExperimentSpec(TrainConfig(**FAST), DATA, {"alpha": [0.0, 1.0]}, repeats=2)
        a = [r.accuracies for r in run_experiment(spec)]
        b = [r.accuracies for r in run_experiment(spec)]
        assert a == b


class TestSummaries:
    @pytest.mark.parametrize("accs", [[0.5], [0.1, 0.2, 0.3], [0.9, 0.95, 0.97, 0.93, 0.99]])
    def test_mean_std(self, accs):
        mean, std = summarize(accs)
        assert abs(mean - np.mean(accs)) < 1e-12
        assert abs(std - (np.std(accs, ddof=1) if len(accs) > 1 else 0.0)) < 1e-12


class TestAblation:
    def test_order_and_count(self, ablation):
        _, recs = ablation
        assert [r.cell["variant"] for r in recs] == ["full", "N", "C", "NE", "NN"]

    def test_full_and_c_share_tokens(self, ablation):
        _, recs = ablation
        by = {r.cell["variant"]: r for r in recs}
        assert by["full"].token_checksums == by["C"].token_checksums

    def test_markdown_written(self, ablation):
        out, _ = ablation
        rows = [l for l in (out / "ablation.md").read_text().splitlines() if l.startswith("| ") and "accuracy" not in l]
        assert len(rows) == 5

    def test_csv_report(self, ablation, tmp_path):
        _, recs = ablation
        path = emit_report(recs[:1], "csv", tmp_path)
        rows = read_csv(path)
        assert len(path.read_text().strip().splitlines()) == 2
        assert abs(float(rows[0]["mean"]) - recs[0].mean) < 1e-9
        assert rows[0]["mean_pct"] == f"{100 * recs[0].mean:.2f}"

    def test_csv_roundtrip_all(self, ablation, tmp_path):
        _, recs = ablation
        rows = read_csv(emit_report(recs, "csv", tmp_path))
        for r, row in zip(recs, rows):
            assert abs(float(row["mean"]) - r.mean) < 1e-9
            assert abs(float(row["std"]) - r.std) < 1e-9
            assert json.loads(row["accuracies"]) == r.accuracies

    def test_jsonl_roundtrip(self, ablation, tmp_path):
        _, recs = ablation
        back = read_jsonl(emit_report(recs, "jsonl", tmp_path))
        assert back == recs

    def test_unknown_format(self, ablation, tmp_path):
        with pytest.raises(ValueError):
            emit_report(ablation[1], "xml", tmp_path)

    def test_figures(self, ablation, tmp_path):
        from gcformer.plots import render_figures

        paths = render_figures(ablation[1], tmp_path, "abl")
        assert paths and all(p.exists() and p.stat().st_size > 0 for p in paths)


class TestPlots:
    def _recs(self, sweep):
        spec = ExperimentSpec(TrainConfig(), DATA, sweep)
        return [ResultRecord.from_runs(c, {}, [0, 1], [0.5 + 0.01 * i, 0.6], 1.0) for i, c in enumerate(spec.cells())]

    @pytest.mark.parametrize("sweep", [{"p_k": [2, 3], "n_k": [2, 3, 4]}, {"alpha": [0.0, 0.5, 1.0]}])
    def test_render(self, sweep, tmp_path):
        from gcformer.plots import render_figures

        paths = render_figures(self._recs(sweep), tmp_path, "r")
        assert paths and all(p.read_bytes()[:4] == b"\x89PNG" for p in paths)


class TestCLI:
    def test_synth_then_train(self, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv(cli.OUTPUT_ENV, raising=False)
        syn = tmp_path / "g"
        assert cli.main(["synth", "--blocks", "10,10", "--feature-dim", "4", "--binary-features", "--out", str(syn)]) == 0
        g = load_graph(syn / "edges.tsv", syn / "features.bin", syn / "labels.txt")
        assert g.n == 20 and read_features_binary(syn / "features.bin").shape == (20, 4)
        run = tmp_path / "run"
        args = ["train", "--edges", str(syn / "edges.tsv"), "--features", str(syn / "features.bin"),
                "--labels", str(syn / "labels.txt"), "--k", "2", "--p_k", "2", "--n_k", "2", "--hidden_dim", "4",
                "--max-epochs", "3", "--patience", "3", "--out", str(run), "--plot"]
        assert cli.main(args) == 0
        for name in ("history.csv", "model.gcm", "tokens.gct", "summary.json", "history.png"):
            assert (run / name).exists(), name
        summary = json.loads((run / "summary.json").read_text())
        assert summary["config"]["p_k"] == 2
        model = load_checkpoint(run / "model.gcm")
        assert model.cfg.hidden_dim == 4
        assert TokenSequences.load(run / "tokens.gct").n == 20
        assert "test_acc=" in capsys.readouterr().out

    def test_config_file_and_override(self, tmp_path):
        conf = tmp_path / "c.yaml"
        conf.write_text("p_k: 3\nn_k: 2\nalpha: 0.25\nsbm_blocks: [10, 10]\nsbm_feature_dim: 4\n")
        args = cli.build_parser().parse_args(["train", "--config", str(conf), "--p-k", "2"])
        cfg, data, _ = cli.resolve(args)
        assert cfg.p_k == 2 and cfg.n_k == 2 and cfg.alpha == 0.25
        assert data["sbm_blocks"] == [10, 10]

    def test_env_output_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env"))
        assert cli.main(["synth", "--blocks", "5,5", "--out", str(tmp_path / "ignored")]) == 0
        assert (tmp_path / "env" / "edges.tsv").exists()
        assert not (tmp_path / "ignored").exists()

    def test_sweep_and_report(self, tmp_path, monkeypatch):
        monkeypatch.delenv(cli.OUTPUT_ENV, raising=False)
        out = tmp_path / "sw"
        assert cli.main(["sweep", *FAST_FLAGS, "--sweep", "alpha=0:1:0.5", "--repeats", "1", "--out", str(out)]) == 0
        recs = read_jsonl(out / "results.jsonl")
        assert [r.cell["alpha"] for r in recs] == [0.0, 0.5, 1.0]
        for name in ("results.csv", "results.md", "results_alpha.png"):
            assert (out / name).exists()
        rep = tmp_path / "rep"
        assert cli.main(["report", str(out), "--out", str(rep), "--format", "csv", "--no-plot"]) == 0
        assert len(read_csv(rep / "results.csv")) == 3

    def test_ablate(self, tmp_path, monkeypatch):
        monkeypatch.delenv(cli.OUTPUT_ENV, raising=False)
        assert cli.main(["ablate", *FAST_FLAGS, "--repeats", "1", "--out", str(tmp_path), "--no-plot"]) == 0
        assert len(read_jsonl(tmp_path / "results.jsonl")) == 5

    def test_tokens_generate_and_inspect(self, tmp_path, capsys):
        path = tmp_path / "t.gct"
        assert cli.main(["tokens", *FAST_FLAGS, "--output", str(path)]) == 0
        assert cli.main(["tokens", "--inspect", str(path), "--rows", "1"]) == 0
        out = capsys.readouterr().out
        assert "p_k=2 n_k=2" in out and TokenSequences.load(path).checksum() in out

    @pytest.mark.parametrize(
        "argv",
        [
            ["train", "--k", "2"],
            ["train", "--sbm-blocks", "3"],
            ["train", "--edges", "missing.tsv", "--features", "missing.csv", "--labels", "missing.txt"],
            ["train", "--sbm-blocks", "10,10", "--alpha", "2.0"],
            ["report", "does-not-exist.jsonl"],
        ],
    )
    def test_errors_exit_nonzero(self, argv, capsys, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert cli.main(argv) != 0
        err = capsys.readouterr().err.strip()
        assert err.count("\n") == 0 and "error:" in err

    @pytest.mark.parametrize("text,want", [("p_k=2:4", ("p_k", [2, 3, 4])), ("alpha=0,0.5", ("alpha", [0, 0.5])),
                                           ("alpha=0:1:0.25", ("alpha", [0.0, 0.25, 0.5, 0.75, 1.0]))])
    def test_parse_axis(self, text, want):
        assert cli.parse_axis(text) == want
