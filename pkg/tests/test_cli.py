"""CLI surface tests: exit codes, artifact placement, determinism, help
snapshots. Commands run in-process through cli.run()."""

import os
from pathlib import Path

import numpy as np
import pytest

from mobinet.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, build_parser, run

DESK_CFG = """\
variant = mid
k = 1
width_mult = 0.25
classes = 10
resolution = 32
channels = 1
dtype = f32
schedule = 8d,16
"""

TRAIN_KEYS = """\
epochs = 1
batch_size = 16
lr = 0.001
dataset = synthetic
dataset_kind = blobs
n_train = 48
n_test = 16
"""


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "net.cfg").write_text(DESK_CFG + TRAIN_KEYS)
    return tmp_path


def listing(root):
    return sorted(
        str(p.relative_to(root)) for p in Path(root).rglob("*") if p.is_file()
    )


class TestExitCodes:
    def test_unknown_subcommand_is_usage_error(self, capsys):
        assert run(["frobnicate"]) == EXIT_USAGE

    def test_unknown_flag_is_usage_error(self):
        assert run(["flops", "--bogus"]) == EXIT_USAGE

    def test_no_subcommand_is_usage_error(self):
        assert run([]) == EXIT_USAGE

    def test_unknown_config_key_is_usage_error(self, workdir, capsys):
        (workdir / "bad.cfg").write_text("variant = mid\nwat = 1\n")
        assert run(["flops", "--config", "bad.cfg", "--out", "o"]) == EXIT_USAGE
        assert "config error" in capsys.readouterr().err

    def test_missing_model_file_is_usage_error(self, workdir):
        assert run(["inspect", "--model", "nope.mobi", "--out", "o"]) == EXIT_USAGE

    def test_corrupt_model_is_runtime_error(self, workdir, capsys):
        (workdir / "bad.mobi").write_bytes(b"MOBI" + b"\x00" * 64)
        assert run(["inspect", "--model", "bad.mobi", "--out", "o"]) == EXIT_RUNTIME


class TestFlopsCommand:
    def test_prints_effective_flops(self, workdir, capsys):
        assert run(["flops", "--config", "net.cfg", "--out", "o"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "effective FLOPs" in out
        assert "speedup" in out

    def test_resolution_override(self, workdir, capsys):
        assert run(["flops", "--config", "net.cfg", "--resolution", "64",
                    "--out", "o"]) == EXIT_OK
        assert "effective FLOPs" in capsys.readouterr().out


class TestTrainCommand:
    def test_writes_artifacts_under_out_only(self, workdir, capsys):
        before = set(listing(workdir))
        code = run(["train", "--config", "net.cfg", "--out", "runs", "--seed", "5",
                    "--export"])
        assert code == EXIT_OK
        created = set(listing(workdir)) - before
        assert created == {"runs/history.csv", "runs/final.npz", "runs/model.mobi"}

    def test_deterministic_histories(self, workdir, capsys):
        assert run(["train", "--config", "net.cfg", "--out", "a", "--seed", "7"]) == EXIT_OK
        assert run(["train", "--config", "net.cfg", "--out", "b", "--seed", "7"]) == EXIT_OK
        a = (workdir / "a" / "history.csv").read_text()
        b = (workdir / "b" / "history.csv").read_text()
        assert a == b

    def test_set_overrides(self, workdir, capsys):
        code = run(["train", "--config", "net.cfg", "--set", "epochs=1",
                    "--set", "n_train=32", "--out", "o", "--seed", "1"])
        assert code == EXIT_OK
        assert run(["train", "--config", "net.cfg", "--set", "bogus=1",
                    "--out", "o2"]) == EXIT_USAGE


class TestEvalExportInspect:
    def test_eval_checkpoint_and_model(self, workdir, capsys):
        assert run(["train", "--config", "net.cfg", "--out", "t", "--seed", "2",
                    "--export"]) == EXIT_OK
        capsys.readouterr()
        assert run(["eval", "--config", "net.cfg", "--model", "t/final.npz",
                    "--out", "o", "--seed", "2"]) == EXIT_OK
        ck = capsys.readouterr().out
        assert "top1" in ck
        assert run(["eval", "--config", "net.cfg", "--model", "t/model.mobi",
                    "--out", "o", "--seed", "2"]) == EXIT_OK
        mv = capsys.readouterr().out
        assert mv == ck  # 1-bit model reproduces the checkpointed forward

    def test_export_then_inspect(self, workdir, capsys):
        assert run(["train", "--config", "net.cfg", "--out", "t", "--seed", "3"]) == EXIT_OK
        assert run(["export", "--checkpoint", "t/final.npz", "--out", "e"]) == EXIT_OK
        assert (workdir / "e" / "model.mobi").exists()
        capsys.readouterr()
        assert run(["inspect", "--model", "e/model.mobi", "--out", "o"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "bit1" in out and "variant = mid" in out


class TestBenchCommand:
    def test_bench_writes_csv(self, workdir, capsys):
        code = run(["bench", "--kernel", "xnor_gemm", "--sizes", "64",
                    "--reps", "2", "--out", "bo"])
        assert code == EXIT_OK
        assert (workdir / "bo" / "bench.csv").exists()
        assert "median_ns" in capsys.readouterr().out

    def test_unknown_kernel_is_usage_error(self, workdir):
        assert run(["bench", "--kernel", "nope", "--out", "bo"]) == EXIT_USAGE


@pytest.mark.slow
class TestAblateCommand:
    def test_skip_suite_emits_two_curve_csv(self, workdir, capsys):
        code = run(["ablate", "--suite", "skip", "--config", "net.cfg",
                    "--epochs", "2", "--out", "ab", "--seed", "1",
                    "--set", "n_train=100", "--set", "n_test=40"])
        assert code == EXIT_OK
        csv_path = workdir / "ab" / "curves_skip_loss.csv"
        assert csv_path.exists()
        header = csv_path.read_text().splitlines()[0]
        assert header == "epoch,vanilla-K0,mid-K0"
        assert (workdir / "ab" / "curves_skip_loss.svg").exists()


class TestHelpSnapshots:
    def test_every_documented_flag_appears_in_help(self):
        parser = build_parser()
        # each subcommand's help mentions each of its option strings
        for action in parser._subparsers._group_actions[0].choices.items():
            name, sub = action
            text = sub.format_help()
            for act in sub._actions:
                for opt in act.option_strings:
                    assert opt in text, (name, opt)

    def test_help_snapshot_files(self, capsys):
        snap_dir = Path(__file__).parent / "data"
        parser = build_parser()
        got = {"mobinet": parser.format_help()}
        for name, sub in parser._subparsers._group_actions[0].choices.items():
            got[f"mobinet-{name}"] = sub.format_help()
        for name, text in got.items():
            snap = snap_dir / f"help_{name}.txt"
            assert snap.exists(), f"snapshot {snap} missing; regenerate with tests/update_help_snapshots.py"
            norm = " ".join(text.split())
            want = " ".join(snap.read_text().split())
            assert norm == want, f"help text for {name} drifted from snapshot"
