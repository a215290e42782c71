import csv
import json

import numpy as np
import pytest

from graphgen.cli import main
from graphgen.graphcore import Graph, read_jsonl, write_jsonl
from graphgen.heads import GraphModel, ModelConfig
from graphgen.metrics import is_cycle
from graphgen.trainer import load_checkpoint, save_checkpoint


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def zero_ckpt(tmp_path):
    path = tmp_path / "zero.ckpt"
    save_checkpoint(path, GraphModel(ModelConfig(hidden=8)).zero_())
    return path


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.toml"
    path.write_text('hidden = 6\nrounds = 1\nlr = 0.001\nbatch_size = 4\n'
                    'ordering = "uniform_random"\nmax_steps = 3\nn_min = 4\nn_max = 6\n'
                    'log_every = 1\n')
    return path


class TestGenData:
    def test_cycles(self, tmp_path, capsys):
        out = tmp_path / "c.jsonl"
        code, _, _ = run(capsys, "gen-data", "--family", "cycle", "--count", 100, "--out", out)
        assert code == 0
        graphs = read_jsonl(out)
        assert len(graphs) == 100 and all(is_cycle(g) for g in graphs)

    def test_deterministic(self, tmp_path, capsys):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        for p in (a, b):
            run(capsys, "gen-data", "--family", "tree", "--count", 20, "--seed", 4, "--out", p)
        assert a.read_bytes() == b.read_bytes()

    def test_ba_default(self, tmp_path, capsys):
        out = tmp_path / "ba.jsonl"
        run(capsys, "gen-data", "--family", "ba", "--count", 1, "--out", out)
        (g,) = read_jsonl(out)
        assert g.num_nodes == 15 and g.num_edges == 26

    def test_bad_params_exit_two(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen-data", "--family", "cycle", "--count", 3,
                           "--n-min", 9, "--n-max", 4, "--out", tmp_path / "x.jsonl")
        assert code == 2 and "n-min" in err

    def test_unknown_family_exit_two(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["gen-data", "--family", "star", "--count", "1", "--out",
                  str(tmp_path / "x.jsonl")])
        assert exc.value.code == 2

    def test_json_flag(self, tmp_path, capsys):
        code, out, _ = run(capsys, "--json", "gen-data", "--family", "tree", "--count", 2,
                           "--out", tmp_path / "t.jsonl")
        assert code == 0 and json.loads(out)["count"] == 2


class TestTrain:
    def test_graph_model(self, tmp_path, capsys, config):
        ckpt = tmp_path / "m.ckpt"
        code, out, _ = run(capsys, "train", "--config", config, "--family", "cycle",
                           "--out", ckpt)
        assert code == 0
        assert out.count("nll") == 3
        assert load_checkpoint(ckpt).step == 3
        rows = (tmp_path / "m.ckpt.curve.csv").read_text().splitlines()
        assert rows[0] == "step,nll" and len(rows) == 4

    def test_lstm_from_data(self, tmp_path, capsys, config):
        data = tmp_path / "d.jsonl"
        run(capsys, "gen-data", "--family", "tree", "--n-min", 3, "--n-max", 5, "--count", 8,
            "--out", data)
        code, _, _ = run(capsys, "train", "--model", "lstm", "--config", config, "--data", data,
                         "--out", tmp_path / "l.ckpt")
        assert code == 0 and load_checkpoint(tmp_path / "l.ckpt").kind == "lstm"

    def test_er(self, tmp_path, capsys):
        data = tmp_path / "d.jsonl"
        write_jsonl([Graph.untyped(3, [(0, 1), (1, 2)])], data)
        code, out, _ = run(capsys, "--json", "train", "--model", "er", "--data", data,
                           "--out", tmp_path / "er.ckpt")
        assert code == 0 and abs(json.loads(out)["p"] - 2 / 3) < 1e-12
        assert load_checkpoint(tmp_path / "er.ckpt").model.p == pytest.approx(2 / 3)

    def test_missing_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"hidden": 4, "rounds": 1, "lr": 0.001, "batch_size": 2,
                                   "ordering": "uniform_random"}))
        code, _, err = run(capsys, "train", "--config", cfg, "--out", tmp_path / "m.ckpt")
        assert code == 2 and "max_steps" in err

    def test_divergence_exit_one(self, tmp_path, capsys, config):
        text = config.read_text().replace("lr = 0.001", "lr = 1e300") + "dropout = 0.0\n"
        config.write_text(text)
        with np.errstate(all="ignore"):
            code, _, err = run(capsys, "train", "--config", config, "--out", tmp_path / "m.ckpt")
        assert code == 1 and "learning rate" in err


class TestSample:
    def test_deterministic(self, tmp_path, capsys, zero_ckpt):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        for p in (a, b):
            run(capsys, "sample", "--ckpt", zero_ckpt, "--count", 300, "--seed", 1, "--out", p)
        assert a.read_bytes() == b.read_bytes()

    def test_bias_addnode(self, tmp_path, capsys, zero_ckpt):
        means = []
        for d in (0, 2):
            _, out, _ = run(capsys, "--json", "sample", "--ckpt", zero_ckpt, "--count", 2000,
                            "--bias-addnode", d, "--out", tmp_path / f"{d}.jsonl")
            means.append(json.loads(out)["mean_nodes"])
        assert means[1] > means[0]

    def test_trace_dir(self, tmp_path, capsys, zero_ckpt):
        traces = tmp_path / "traces"
        run(capsys, "sample", "--ckpt", zero_ckpt, "--count", 5, "--trace-dir", traces,
            "--out", tmp_path / "s.jsonl")
        files = sorted(traces.glob("*.dot"))
        assert len(files) == 5
        assert all(f.read_text().startswith("graph step_0 {") for f in files)

    def test_condition_on_unconditional(self, tmp_path, capsys, zero_ckpt):
        code, _, err = run(capsys, "sample", "--ckpt", zero_ckpt, "--condition", "5,5,1",
                           "--out", tmp_path / "s.jsonl")
        assert code == 2 and "unconditional" in err

    def test_bad_checkpoint_exit_one(self, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"hello")
        code, _, err = run(capsys, "sample", "--ckpt", bad, "--out", tmp_path / "s.jsonl")
        assert code == 1 and "magic" in err


class TestEval:
    def test_identical_sets(self, tmp_path, capsys):
        data = tmp_path / "ba.jsonl"
        run(capsys, "gen-data", "--family", "ba", "--count", 30, "--out", data)
        code, out, _ = run(capsys, "eval", "--samples", data, "--reference", data,
                           "--task", "ba")
        rep = json.loads(out)
        assert code == 0 and rep["degree_kl"] < 1e-5 and rep["pct_novel"] == 0.0

    def test_paths_not_cycles(self, tmp_path, capsys):
        paths, cycles = tmp_path / "p.jsonl", tmp_path / "c.jsonl"
        write_jsonl([Graph.untyped(5, [(i, i + 1) for i in range(4)])] * 3, paths)
        run(capsys, "gen-data", "--family", "cycle", "--count", 5, "--out", cycles)
        _, out, _ = run(capsys, "eval", "--samples", paths, "--reference", cycles,
                        "--task", "cycles")
        assert json.loads(out)["pct_valid"] == 0.0

    def test_empty_file(self, tmp_path, capsys):
        empty = tmp_path / "e.jsonl"
        empty.write_text("")
        code, _, _ = run(capsys, "eval", "--samples", empty, "--reference", empty,
                         "--task", "trees")
        assert code == 2


class TestMarginal:
    def test_zero_weight_table(self, tmp_path, capsys, zero_ckpt):
        graphs = tmp_path / "g.jsonl"
        write_jsonl([Graph.untyped(1), Graph.untyped(2, [(0, 1)]),
                     Graph.untyped(4, [(0, 1), (1, 2), (2, 3), (0, 3)])], graphs)
        out = tmp_path / "m.csv"
        code, _, _ = run(capsys, "marginal", "--ckpt", zero_ckpt, "--graphs", graphs,
                         "--out", out)
        assert code == 0
        rows = list(csv.DictReader(out.open()))
        assert list(rows[0]) == ["graph_id", "fixed_nll", "best_nll", "neg_log_marginal",
                                 "stderr"]
        assert rows[0]["fixed_nll"] == rows[0]["best_nll"] == "2.079442"
        assert rows[0]["neg_log_marginal"] == "2.079442"
        assert rows[1]["neg_log_marginal"] == "3.465736"
        for r in rows:
            assert (float(r["fixed_nll"]) >= float(r["best_nll"])
                    >= float(r["neg_log_marginal"]))

    def test_oversize_brute(self, tmp_path, capsys, zero_ckpt):
        graphs = tmp_path / "g.jsonl"
        write_jsonl([Graph.untyped(2), Graph.untyped(9)], graphs)
        code, _, err = run(capsys, "marginal", "--ckpt", zero_ckpt, "--graphs", graphs)
        assert code == 2 and "graph_id 1" in err

    def test_importance_mode(self, tmp_path, capsys, zero_ckpt):
        graphs = tmp_path / "g.jsonl"
        write_jsonl([Graph.untyped(2, [(0, 1)])], graphs)
        code, out, _ = run(capsys, "marginal", "--ckpt", zero_ckpt, "--graphs", graphs,
                           "--mode", "is-uniform", "--samples", 20)
        row = next(csv.DictReader(out.splitlines()))
        assert code == 0 and row["neg_log_marginal"] == "3.465736"


class TestSweepAndReport:
    def test_bias_sweep_writes_csv_and_figure(self, tmp_path, capsys, zero_ckpt):
        out = tmp_path / "sweep.csv"
        code, _, _ = run(capsys, "bias-sweep", "--ckpt", zero_ckpt, "--count", 300,
                         "--out", out)
        assert code == 0
        rows = list(csv.DictReader(out.open()))
        means = [float(r["mean_nodes"]) for r in rows]
        assert [float(r["delta"]) for r in rows] == [-1.0, 0.0, 1.0, 2.0]
        assert all(a < b for a, b in zip(means, means[1:]))
        assert out.with_suffix(".png").stat().st_size > 0

    def test_report(self, tmp_path, capsys):
        curve = tmp_path / "c.csv"
        curve.write_text("step,nll\n" + "".join(f"{i},{10 - i * 0.01}\n" for i in range(100)))
        data = tmp_path / "ba.jsonl"
        run(capsys, "gen-data", "--family", "ba", "--count", 10, "--out", data)
        outdir = tmp_path / "rep"
        code, _, _ = run(capsys, "report", "--curves", f"graph={curve}", "--samples",
                         f"ba={data}", "--reference", data, "--outdir", outdir)
        assert code == 0
        assert (outdir / "training_curves.png").exists()
        assert (outdir / "degree_histograms.png").exists()
        rows = list(csv.DictReader((outdir / "summary.csv").open()))
        assert {r["kind"] for r in rows} == {"curve", "degree_kl"}

    def test_report_needs_input(self, tmp_path, capsys):
        code, _, _ = run(capsys, "report", "--outdir", tmp_path / "r")
        assert code == 2


class TestExperiment:
    def test_cached_and_resumable(self, tmp_path, capsys):
        args = ["experiment", "cycle", "--artifacts", tmp_path / "a", "--outdir", tmp_path / "o",
                "--steps", 4, "--chunk", 2, "--samples", 30]
        code, out, err = run(capsys, *args)
        assert code == 0 and "cycle_graph: step 4/4" in err
        rows = list(csv.DictReader(out.splitlines()))
        assert [r["model"] for r in rows] == ["graph", "lstm", "er"]
        for name in ("training_curves.png", "degree_histograms.png", "results.json"):
            assert (tmp_path / "o" / "cycle" / name).stat().st_size > 0
        code, out2, err2 = run(capsys, *args)
        assert code == 0 and err2 == "" and out2 == out
        args[args.index("--steps") + 1] = 6
        code, _, err3 = run(capsys, *args)
        assert code == 0 and "step 6/6" in err3 and "step 2/6" not in err3

    def test_changed_config_refused(self, tmp_path, capsys):
        base = ["experiment", "cycle", "--artifacts", tmp_path / "a", "--outdir", tmp_path / "o",
                "--steps", 2, "--samples", 10]
        run(capsys, *base)
        code, _, err = run(capsys, *base, "--lr", 0.01)
        assert code == 1 and "different config" in err

    def test_bad_steps(self, tmp_path, capsys):
        code, _, _ = run(capsys, "experiment", "bias", "--artifacts", tmp_path,
                         "--outdir", tmp_path, "--steps", 0)
        assert code == 2
