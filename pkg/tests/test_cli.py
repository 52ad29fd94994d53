import csv

import pytest

from fairdiff import cli
from fairdiff.cli import VARIANTS, main, parse_config
from fairdiff.errors import ConfigError, TrainingDivergence
from fairdiff.metrics import tradeoff
from fairdiff.synthetic import write_events, zipf_events
from fairdiff.trainer import TrainConfig, load_checkpoint

FAST = ["--dims", "16", "--aan-dims", "8", "--batch-size", "40", "--e-weak", "1", "--k-pop", "5"]


def read_tsv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def report_value(rows, model, k, metric):
    (row,) = [r for r in rows if r["model"] == model and r["K"] == str(k) and r["metric"] == metric]
    return float(row["value"])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    write_events(zipf_events(n_users=90, n_items=50, per_user=14, seed=5), root / "raw.tsv")
    assert main(["prepare", str(root / "raw.tsv"), "--out", str(root / "data")]) == 0
    assert main(["train", "--data", str(root / "data"), "--model", "diffrec", "--epochs", "3", "--seed", "0",
                 "--out", str(root / "diffrec"), *FAST]) == 0
    return root


class TestParseConfig:
    def test_empty_file_gives_defaults(self, tmp_path):
        (tmp_path / "c.cfg").write_text("")
        assert parse_config(tmp_path / "c.cfg") == TrainConfig()

    def test_flag_beats_file(self, tmp_path):
        (tmp_path / "c.cfg").write_text("# tuned\nw_max = 3.0\n\ndims=64,32  # two layers\n")
        cfg = parse_config(tmp_path / "c.cfg", {"w_max": "2.5"})
        assert cfg.w_max == 2.5 and cfg.dims == (64, 32)

    def test_range_error_cites_bounds(self, tmp_path):
        (tmp_path / "c.cfg").write_text("w_max=9\n")
        with pytest.raises(ConfigError, match=r"w_max.*\[2\.0, 4\.0\]"):
            parse_config(tmp_path / "c.cfg")
        assert parse_config(tmp_path / "c.cfg", unsafe_ranges=True).w_max == 9.0

    def test_unknown_key_names_line(self, tmp_path):
        (tmp_path / "c.cfg").write_text("lr=0.01\nwmax=3\n")
        with pytest.raises(ConfigError, match=r"c\.cfg:2.*'wmax'"):
            parse_config(tmp_path / "c.cfg")

    def test_bad_value_names_key(self, tmp_path):
        (tmp_path / "c.cfg").write_text("epochs=ten\n")
        with pytest.raises(ConfigError, match=r"c\.cfg:1.*'epochs'"):
            parse_config(tmp_path / "c.cfg")
        with pytest.raises(ConfigError, match="--use_d1"):
            parse_config(None, {"use_d1": "maybe"})

    def test_line_without_equals(self, tmp_path):
        (tmp_path / "c.cfg").write_text("w_max 3\n")
        with pytest.raises(ConfigError, match="key=value"):
            parse_config(tmp_path / "c.cfg")


class TestPrepare:
    def test_toy_file(self, tmp_path):
        raw = tmp_path / "toy.tsv"
        raw.write_text("".join(f"u{i % 2}\ti{i % 5}\t{100 + i}\n" for i in range(10)))
        assert main(["prepare", str(raw), "--kcore", "1", "--out", str(tmp_path / "a")]) == 0
        names = {p.name for p in (tmp_path / "a").iterdir()}
        assert {"mapping.tsv", "train.tsv", "val.tsv", "test.tsv", "popularity.tsv", "stats.tsv"} <= names
        assert "manifest.json" in names
        assert main(["prepare", str(raw), "--kcore", "1", "--out", str(tmp_path / "b")]) == 0
        for name in names - {"manifest.json"}:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_parse_error_exit_code(self, tmp_path, capsys):
        raw = tmp_path / "bad.tsv"
        raw.write_text("a;b;c\n")
        assert main(["prepare", str(raw), "--out", str(tmp_path / "d")]) == 3
        assert "line 1" in capsys.readouterr().err

    def test_custom_separator(self, tmp_path):
        raw = tmp_path / "semi.csv"
        raw.write_text("".join(f"u{i % 2};i{i % 5};{100 + i}\n" for i in range(10)))
        assert main(["prepare", str(raw), "--sep", ";", "--kcore", "1", "--out", str(tmp_path / "d")]) == 0


class TestTrain:
    def test_diffrec_run(self, workspace):
        run = workspace / "diffrec"
        log = read_tsv(run / "train_log.tsv")
        assert [r["epoch"] for r in log] == ["1", "2", "3"]
        assert list(log[0]) == ["epoch", "L_base", "L_AG", "L_pop", "Recall@20", "wall"]
        ck = load_checkpoint(run / "model.ckpt")
        assert ck.config["model"] == "diffrec" and ck.config["dims"] == "16"
        assert load_checkpoint(run / "weak.ckpt").epoch == 1
        assert (run / "manifest.json").exists() and (run / "config.txt").exists()

    def test_a2g_from_given_checkpoints(self, workspace):
        d = workspace / "diffrec"
        assert main(["train", "--data", str(workspace / "data"), "--model", "a2g", "--epochs", "2",
                     "--base", str(d / "model.ckpt"), "--weak", str(d / "weak.ckpt"),
                     "--out", str(workspace / "a2g"), *FAST]) == 0
        steps = read_tsv(workspace / "a2g" / "steps.tsv")
        assert steps and all(float(s["L_total"]) > 0 for s in steps)
        ck = load_checkpoint(workspace / "a2g" / "model.ckpt")
        assert ck.has("aan") and ck.has("weak")

    def test_ag_assembles_without_training(self, workspace):
        d = workspace / "diffrec"
        assert main(["train", "--data", str(workspace / "data"), "--model", "ag", "--ag-weight", "2.0",
                     "--base", str(d / "model.ckpt"), "--weak", str(d / "weak.ckpt"),
                     "--out", str(workspace / "ag"), *FAST]) == 0
        assert load_checkpoint(workspace / "ag" / "model.ckpt").config["ag_weight"] == "2.0"

    def test_range_error_before_training(self, workspace, capsys):
        out = workspace / "bad"
        assert main(["train", "--data", str(workspace / "data"), "--w-max", "9", "--out", str(out)]) == 2
        assert "[2.0, 4.0]" in capsys.readouterr().err
        assert not (out / "model.ckpt").exists()

    def test_missing_dataset(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 3

    def test_divergence_exit_code(self, workspace, monkeypatch):
        def explode(*a, **k):
            raise TrainingDivergence("diverged twice in epoch 1; last good epoch 0")

        monkeypatch.setattr(cli, "train_diffrec", explode)
        assert main(["train", "--data", str(workspace / "data"), "--model", "diffrec",
                     "--out", str(workspace / "div"), *FAST]) == 4

    def test_architecture_mismatch_exit_code(self, workspace):
        d = workspace / "diffrec"
        assert main(["train", "--data", str(workspace / "data"), "--model", "a2g", "--dims", "32",
                     "--base", str(d / "model.ckpt"), "--weak", str(d / "weak.ckpt"),
                     "--out", str(workspace / "mismatch")]) == 5


class TestEvaluate:
    def test_baselines(self, workspace):
        out = workspace / "baselines"
        assert main(["evaluate", "--data", str(workspace / "data"), "--baselines", "random,mostpop",
                     "--k", "10,40", "--out", str(out)]) == 0
        rows = read_tsv(out / "report.tsv")
        assert report_value(rows, "random", 40, "Coverage") == 1.0
        assert report_value(rows, "mostpop", 10, "APLT") == 0.0
        assert report_value(rows, "mostpop", 10, "DeltaExp") == 1.0

    def test_tradeoff_rows_recompute(self, workspace, capsys):
        out = workspace / "compare"
        assert main(["evaluate", "--data", str(workspace / "data"), "--k", "10",
                     "--checkpoint", f"diffrec={workspace / 'diffrec' / 'model.ckpt'}",
                     "--checkpoint", f"a2g={workspace / 'a2g' / 'model.ckpt'}",
                     "--tradeoff", "diffrec", "--pretty", "--out", str(out)]) == 0
        assert "T_APLT@10" in capsys.readouterr().out
        rows = read_tsv(out / "report.tsv")
        get = lambda m, metric: report_value(rows, m, 10, metric)  # noqa: E731
        for metric in ("Gini", "APLT"):
            expected = tradeoff(metric, get("diffrec", metric), get("a2g", metric),
                                get("diffrec", "NDCG"), get("a2g", "NDCG")).value
            assert get("a2g", f"T_{metric}") == pytest.approx(expected, rel=1e-4, abs=1e-5)
        per_user = read_tsv(out / "per_user.tsv")
        assert {r["model"] for r in per_user} == {"diffrec", "a2g"}

    def test_item_count_mismatch(self, workspace, tmp_path):
        write_events(zipf_events(n_users=60, n_items=30, per_user=12, seed=1), tmp_path / "raw.tsv")
        assert main(["prepare", str(tmp_path / "raw.tsv"), "--out", str(tmp_path / "other")]) == 0
        assert main(["evaluate", "--data", str(tmp_path / "other"), "--checkpoint",
                     str(workspace / "diffrec" / "model.ckpt"), "--out", str(tmp_path / "r")]) == 5

    def test_nothing_to_evaluate(self, workspace, tmp_path):
        assert main(["evaluate", "--data", str(workspace / "data"), "--out", str(tmp_path / "r")]) == 2


class TestAblate:
    def test_rows_and_single_knob_configs(self, workspace):
        out = workspace / "ablate"
        d = workspace / "diffrec"
        assert main(["ablate", "--data", str(workspace / "data"), "--variants", "no_ag,no_pop,full",
                     "--k", "10", "--epochs", "2", "--base", str(d / "model.ckpt"), "--weak", str(d / "weak.ckpt"),
                     "--out", str(out), *FAST]) == 0
        rows = {r["variant"]: r for r in read_tsv(out / "ablation.tsv")}
        assert set(rows) == {"diffrec", "no_ag", "no_pop", "full"}
        base = rows["diffrec"]
        for name in ("no_ag", "no_pop"):
            r = rows[name]
            expected = tradeoff("APLT", float(base["APLT"]), float(r["APLT"]), float(base["NDCG"]),
                                float(r["NDCG"]))
            if not expected.infinite:
                assert float(r["T_APLT"]) == pytest.approx(expected.value, rel=1e-4, abs=1e-5)
        full = (out / "variants" / "full.config.txt").read_text().splitlines()
        for name in ("no_ag", "no_pop"):
            lines = (out / "variants" / f"{name}.config.txt").read_text().splitlines()
            diff = [(a, b) for a, b in zip(full, lines) if a != b]
            key, value = VARIANTS[name]
            assert diff == [(next(l for l in full if l.startswith(key + "=")), f"{key}={value}")]
        steps = read_tsv(out / "variants" / "no_pop.steps.tsv")
        assert all(float(s["L_pop_contrib"]) == 0.0 for s in steps)
        steps = read_tsv(out / "variants" / "no_ag.steps.tsv")
        assert all(float(s["w_mean"]) == 1.0 for s in steps)

    def test_unknown_variant(self, workspace, tmp_path, capsys):
        assert main(["ablate", "--data", str(workspace / "data"), "--variants", "no_d4",
                     "--out", str(tmp_path / "x")]) == 2
        err = capsys.readouterr().err
        assert "no_d4" in err and all(v in err for v in VARIANTS)


def test_synth_command(tmp_path):
    assert main(["synth", "--users", "20", "--items", "30", "--per-user", "10", "--seed", "2",
                 "--out", str(tmp_path / "log.tsv")]) == 0
    lines = (tmp_path / "log.tsv").read_text().splitlines()
    assert len(lines) >= 20 * 8 and all(len(l.split("\t")) == 3 for l in lines)


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "fairdiff" in capsys.readouterr().out
