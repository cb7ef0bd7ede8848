import argparse
import csv
import json

import pytest

from dianet import cli
from dianet.data import SynthConfig, export_dataset, synth_generate
from dianet.dynimg import read_dir1
from dianet.model import load_checkpoint

TINY_NET = ["--epochs", "1", "--patience", "0", "--feature-dim", "8", "--tokens", "2", "--stages", "4x3x1"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    seqs = synth_generate(SynthConfig(n_subjects=2, samples_per_subject=5, frame_size=8, sequence_length=6))
    return export_dataset(seqs, root, ["a", "b", "c"])


def run(tmp_path, *argv):
    return cli.main(["--out-dir", str(tmp_path), "--threads", "1", *argv])


def degenerate_manifest(corpus, tmp_path):
    rows = list(csv.reader(open(corpus, newline="")))
    rows[1][4] = rows[1][3]
    for row in rows[1:]:
        row[0] = str(corpus.parent / row[0])
    path = tmp_path / "bad.csv"
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    return path


class TestDi:
    def test_all_phases_write_three_files_per_sequence(self, corpus, tmp_path):
        assert run(tmp_path, "di", str(corpus), "--phase", "all") == 0
        assert len(list(tmp_path.glob("*.dir1"))) == 30

    @pytest.mark.parametrize("phase", ["onset", "offset", "full"])
    def test_single_phase(self, corpus, tmp_path, phase):
        assert run(tmp_path, "di", str(corpus), "--phase", phase, "--png") == 0
        assert len(list(tmp_path.glob(f"*.{phase}.dir1"))) == len(list(tmp_path.glob("*.png"))) == 10

    def test_normalize_flag_bounds_rasters(self, corpus, tmp_path):
        run(tmp_path, "di", str(corpus), "--phase", "onset", "--normalize")
        for path in tmp_path.glob("*.dir1"):
            x = read_dir1(path)
            assert x.min() >= 0.0 and x.max() <= 1.0

    def test_rerun_is_idempotent(self, corpus, tmp_path):
        run(tmp_path, "di", str(corpus), "--phase", "full")
        first = {p.name: p.read_bytes() for p in tmp_path.glob("*.dir1")}
        run(tmp_path, "di", str(corpus), "--phase", "full")
        assert {p.name: p.read_bytes() for p in tmp_path.glob("*.dir1")} == first

    def test_degenerate_phase_is_listed_and_processing_continues(self, corpus, tmp_path, capsys):
        bad = degenerate_manifest(corpus, tmp_path)
        assert run(tmp_path / "out", "di", str(bad), "--phase", "onset") == cli.EXIT_DOMAIN
        err = capsys.readouterr().err
        assert "OnsetDegenerateError" in err and err.count("FAILED") == 1
        assert len(list((tmp_path / "out").glob("*.dir1"))) == 9

    def test_strict_aborts(self, corpus, tmp_path):
        bad = degenerate_manifest(corpus, tmp_path)
        assert run(tmp_path / "out", "di", str(bad), "--phase", "onset", "--strict") == cli.EXIT_DOMAIN
        assert not list((tmp_path / "out").glob("*.dir1"))

    def test_missing_manifest_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run(tmp_path, "di", str(tmp_path / "none.csv"))
        assert exc.value.code == cli.EXIT_USAGE


class TestSynth:
    def test_writes_loadable_corpus(self, tmp_path):
        argv = ["synth", "--subjects", "2", "--samples-per-subject", "2", "--frame-size", "8", "--length", "6"]
        assert cli.main(["--seed", "3", "--out-dir", str(tmp_path), *argv]) == 0
        with open(tmp_path / "manifest.csv", newline="") as fh:
            assert len(list(csv.reader(fh))) == 5

    def test_seed_drives_the_corpus(self, tmp_path):
        argv = ["synth", "--subjects", "1", "--samples-per-subject", "1", "--frame-size", "8", "--length", "6"]
        for seed in ("1", "1", "2"):
            cli.main(["--seed", seed, "--out-dir", str(tmp_path / seed), *argv])
        frames = {s: sorted((tmp_path / s).rglob("*.png"))[3].read_bytes() for s in ("1", "2")}
        assert frames["1"] != frames["2"]


class TestTrainingCommands:
    def test_train_saves_checkpoint(self, corpus, tmp_path):
        assert run(tmp_path, "train", "--manifest", str(corpus), *TINY_NET) == 0
        params, manifest = load_checkpoint(tmp_path / "checkpoint")
        assert manifest["class_names"] == ["a", "b", "c"] and params.config.n_classes == 3

    def test_loso_prints_and_writes_reports(self, corpus, tmp_path, capsys):
        assert run(tmp_path, "loso", "--manifest", str(corpus), "--format", "json", *TINY_NET) == 0
        printed = json.loads(capsys.readouterr().out)
        assert printed == json.loads((tmp_path / "loso.json").read_text())
        assert {p.name for p in tmp_path.iterdir()} == {"loso.txt", "loso.csv", "loso.json"}

    def test_loso_is_deterministic(self, corpus, tmp_path):
        run(tmp_path / "a", "loso", "--manifest", str(corpus), *TINY_NET)
        run(tmp_path / "b", "loso", "--manifest", str(corpus), *TINY_NET)
        assert (tmp_path / "a" / "loso.json").read_bytes() == (tmp_path / "b" / "loso.json").read_bytes()

    def test_ablate_on_synth(self, tmp_path, capsys):
        synth = ["--synth", "--subjects", "2", "--samples-per-subject", "3", "--frame-size", "8", "--length", "6"]
        assert run(tmp_path, "ablate", *synth, "--format", "csv", *TINY_NET) == 0
        assert len(capsys.readouterr().out.strip().splitlines()) == 7
        assert (tmp_path / "ablation.csv").exists()

    def test_bad_hyperparameters_are_domain_errors(self, corpus, tmp_path):
        assert run(tmp_path, "loso", "--manifest", str(corpus), "--epochs", "2", "--patience", "5") == cli.EXIT_DOMAIN


class TestUsage:
    @pytest.mark.parametrize(
        "argv,needle",
        [
            (["loso", "--synth", "--manifest", "x.csv"], "--manifest and --synth"),
            (["loso", "--manifest", "{corpus}", "--subjects", "3"], "--subjects"),
            (["loso"], "--manifest PATH or --synth"),
            (["train", "--manifest", "missing.csv"], "does not exist"),
            (["train", "--synth", "--stages", "8x3"], "bad stage list"),
            (["train", "--synth", "--unknown"], "unrecognized arguments"),
        ],
    )
    def test_usage_errors_exit_2(self, corpus, tmp_path, capsys, argv, needle):
        argv = [a.replace("{corpus}", str(corpus)) for a in argv]
        with pytest.raises(SystemExit) as exc:
            run(tmp_path, *argv)
        assert exc.value.code == cli.EXIT_USAGE
        assert needle in capsys.readouterr().err

    @pytest.mark.parametrize("command", sorted(cli.COMMANDS))
    def test_help_documents_every_flag(self, command, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main([command, "--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        sub = cli.build_parser()._subparsers._group_actions[0].choices[command]
        for action in sub._actions:
            for flag in action.option_strings:
                assert flag in out
            assert action.help


class TestGradcheck:
    def test_passes(self, capsys):
        assert cli.main(["gradcheck", "--coords", "4"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 2 and "cross" in out and "simple" in out


def test_stage_parser():
    assert cli._stages("8x3x1,16x3x2") == ((8, 3, 1), (16, 3, 2))
    with pytest.raises(argparse.ArgumentTypeError):
        cli._stages("4x0x1")
