import hashlib
import os
import subprocess
import sys

import numpy as np
import pytest

from filmseg.cli import main
from filmseg.data import gen_multiorgan_dataset, write_dataset
from filmseg.model import ModelConfig, init_params, save_checkpoint


def run_cli(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data") / "ds"
    write_dataset(gen_multiorgan_dataset({0: 4, 1: 4, 2: 4}, seed=2), d)
    return d


class TestSynth:
    def test_multiorgan_counts(self, tmp_path, capsys):
        out = tmp_path / "ds"
        assert run_cli("synth", "--kind", "multiorgan", "--counts",
                       "disk=12,square=12,triangle=12", "--seed", "1", "--out", str(out)) == 0
        text = capsys.readouterr().out
        assert "36 subjects" in text
        assert (out / "manifest.csv").exists()

    def test_imbalance_printed(self, tmp_path, capsys):
        out = tmp_path / "ds"
        assert run_cli("synth", "--kind", "multiorgan", "--counts", "square=2,disk=12",
                       "--seed", "1", "--out", str(out)) == 0
        text = capsys.readouterr().out
        assert "disk: 12 subjects" in text and "square: 2 subjects" in text

    def test_same_seed_identical_manifest(self, tmp_path):
        digests = []
        for name in ("a", "b"):
            out = tmp_path / name
            run_cli("synth", "--kind", "ambiguous", "--counts", "3", "--seed", "5", "--out", str(out))
            digests.append(hashlib.sha256((out / "manifest.csv").read_bytes()).hexdigest())
        assert digests[0] == digests[1]

    def test_nonempty_dir_needs_force(self, tmp_path, capsys):
        out = tmp_path / "ds"
        out.mkdir()
        (out / "junk.txt").write_text("x")
        assert run_cli("synth", "--kind", "ambiguous", "--counts", "3", "--out", str(out)) == 1
        assert "--force" in capsys.readouterr().err
        assert run_cli("synth", "--kind", "ambiguous", "--counts", "3", "--out", str(out), "--force") == 0


class TestTrainEval:
    def test_train_writes_checkpoint_and_curves(self, tiny_dataset, tmp_path, capsys):
        out = tmp_path / "run"
        code = run_cli("train", "--dataset", str(tiny_dataset), "--out", str(out),
                       "--depth", "1", "--base-filters", "2", "--max-epochs", "3", "--seed", "3")
        assert code == 0
        assert (out / "checkpoint.ckpt").exists() and (out / "curves.csv").exists()
        assert "best valid loss" in capsys.readouterr().out

    def test_eval_prints_per_class(self, tiny_dataset, tmp_path, capsys):
        out = tmp_path / "run"
        run_cli("train", "--dataset", str(tiny_dataset), "--out", str(out),
                "--depth", "1", "--base-filters", "2", "--max-epochs", "2", "--seed", "3")
        code = run_cli("eval", "--checkpoint", str(out / "checkpoint.ckpt"),
                       "--dataset", str(tiny_dataset), "--split", "test", "--seed", "3")
        assert code == 0
        text = capsys.readouterr().out
        assert "mean dice" in text and "class 0" in text


class TestExperimentCommand:
    def test_exp1_rows_per_arm_and_class(self, tmp_path, capsys):
        from filmseg.data import gen_ambiguous_dataset, write_dataset
        ds = tmp_path / "amb"
        write_dataset(gen_ambiguous_dataset(5, seed=1), ds)
        out = tmp_path / "report"
        code = run_cli("experiment", "--experiment", "exp1", "--dataset", str(ds),
                       "--out", str(out), "--repetitions", "2", "--seed", "1",
                       "--depth", "1", "--base-filters", "2", "--max-epochs", "2")
        assert code == 0
        lines = (out / "results.csv").read_text().strip().splitlines()
        assert lines[0] == "arm,class,repetition,dice"
        rows = [l.split(",") for l in lines[1:]]
        for arm in ("prior", "no-prior"):
            for group in ("all", "diffuse", "composite", "focal"):
                assert sum(r[0] == arm and r[1] == group for r in rows) == 2
        assert (out / "summary.csv").read_text().splitlines()[0] == "arm,class,mean,std,p_value"
        assert (out / "swap_matrix.csv").exists()
        assert (out / "bars.svg").exists() and (out / "curves.svg").exists()

    def test_determinism_identical_results_csv(self, tmp_path):
        from filmseg.data import gen_ambiguous_dataset, write_dataset
        ds = tmp_path / "amb"
        write_dataset(gen_ambiguous_dataset(4, seed=2), ds)
        digests = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            run_cli("experiment", "--experiment", "label-swap", "--dataset", str(ds),
                    "--out", str(out), "--repetitions", "1", "--seed", "9",
                    "--depth", "1", "--base-filters", "2", "--max-epochs", "2")
            digests.append(hashlib.sha256((out / "results.csv").read_bytes()).hexdigest())
        assert digests[0] == digests[1]

    def test_env_seed_overrides_flag(self, tmp_path, monkeypatch):
        from filmseg.data import gen_ambiguous_dataset, write_dataset
        ds = tmp_path / "amb"
        write_dataset(gen_ambiguous_dataset(4, seed=2), ds)
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        run_cli("experiment", "--experiment", "label-swap", "--dataset", str(ds), "--out", str(out1),
                "--repetitions", "1", "--seed", "7", "--depth", "1", "--base-filters", "2", "--max-epochs", "2")
        monkeypatch.setenv("FILMSEG_SEED", "7")
        run_cli("experiment", "--experiment", "label-swap", "--dataset", str(ds), "--out", str(out2),
                "--repetitions", "1", "--seed", "1234", "--depth", "1", "--base-filters", "2", "--max-epochs", "2")
        assert (out1 / "results.csv").read_bytes() == (out2 / "results.csv").read_bytes()


class TestGradcheckCommand:
    def test_passes_with_exit_zero(self, capsys):
        assert run_cli("gradcheck") == 0
        text = capsys.readouterr().out
        assert "PASS" in text and "FAIL" not in text
        assert "max rel error" in text

    def test_corrupted_backward_detected(self, capsys, monkeypatch):
        import filmseg.gradcheck as G

        def corrupted(rng):
            return 0.5  # stands in for a broken backward rule

        monkeypatch.setitem(G.OPERATOR_CHECKS, "conv2d", corrupted)
        assert run_cli("gradcheck") == 1
        text = capsys.readouterr().out
        assert "FAIL  conv2d" in text


class TestLabelSwapCommand:
    def test_matrix_printed_and_written(self, tiny_dataset, tmp_path, capsys):
        model = init_params(ModelConfig(depth=1, base_filters=2), 0)
        ckpt = tmp_path / "m.ckpt"
        save_checkpoint(model, ckpt)
        out = tmp_path / "swap"
        code = run_cli("label-swap", "--checkpoint", str(ckpt), "--dataset", str(tiny_dataset),
                       "--split", "all", "--out", str(out))
        assert code == 0
        assert "label-swap matrix" in capsys.readouterr().out
        assert (out / "swap_matrix.csv").exists()


class TestReportCommand:
    def test_reemit_from_results(self, tmp_path):
        results = tmp_path / "results.csv"
        results.write_text(
            "arm,class,repetition,dice\n"
            "prior,all,0,0.8\nprior,all,1,0.9\nno-prior,all,0,0.6\nno-prior,all,1,0.5\n"
        )
        out = tmp_path / "rep"
        assert run_cli("report", "--results", str(results), "--out", str(out)) == 0
        assert (out / "summary.csv").exists() and (out / "bars.svg").exists()


class TestUsageErrors:
    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            run_cli("synth", "--does-not-exist")
        assert exc.value.code == 2

    def test_missing_dataset_exits_1(self, tmp_path, capsys):
        assert run_cli("eval", "--checkpoint", "none.ckpt", "--dataset", str(tmp_path)) == 1

    def test_help_lists_flags_with_defaults(self):
        with pytest.raises(SystemExit) as exc:
            run_cli("experiment", "--help")
        assert exc.value.code == 0

    def test_config_file_defaults_and_flag_override(self, tmp_path, capsys):
        cfgfile = tmp_path / "run.cfg"
        cfgfile.write_text("counts=4\nseed=5\n")
        out = tmp_path / "ds"
        assert run_cli("--config", str(cfgfile), "synth", "--kind", "ambiguous", "--out", str(out)) == 0
        assert "12 subjects" in capsys.readouterr().out  # 4 per class from the file
        out2 = tmp_path / "ds2"
        assert run_cli("--config", str(cfgfile), "synth", "--kind", "ambiguous",
                       "--counts", "2", "--out", str(out2)) == 0
        assert "6 subjects" in capsys.readouterr().out  # flag overrides file

    def test_console_script_runs(self):
        proc = subprocess.run([sys.executable, "-m", "filmseg.cli", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "synth" in proc.stdout and "gradcheck" in proc.stdout
