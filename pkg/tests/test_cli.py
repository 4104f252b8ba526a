import json

import pandas as pd
import pytest
from click.testing import CliRunner

from avm_lab import __version__
from avm_lab.avmd import DATA_FILE
from avm_lab.cli import cli
from avm_lab.config import load_run_config
from avm_lab.experiment import AdaptationExperiment

TINY_CONFIG = {
    "backbone": {"image_h": 8, "image_w": 16, "patch": 4, "embed_dim": 8, "num_blocks": 2, "num_heads": 2, "behavior_dim": 2},
    "modulation": {"bottleneck_dim": 3},
    "world": {
        "num_neurons": 4,
        "image_h": 8,
        "image_w": 16,
        "behavior_dim": 2,
        "num_train_images": 30,
        "num_test_images": 4,
        "test_repeats": 3,
    },
    "train": {"batch_size": 10, "max_epochs": 2},
}


def invoke(*args):
    result = CliRunner().invoke(cli, [str(a) for a in args], catch_exceptions=False)
    return result


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Config, synthetic conditions and a phase-1 checkpoint shared by the module."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "config.json"
    config.write_text(json.dumps(TINY_CONFIG))
    synth = invoke("synth", "-c", config, "-o", root / "data", "--shift", "subject")
    assert synth.exit_code == 0, synth.output
    train = invoke("train", root / "data" / "source", "-c", config, "--max-epochs", 1, "-o", root / "phase1")
    assert train.exit_code == 0, train.output
    return root


class TestPipeline:
    def test_synth_layout(self, workspace):
        for condition in ("source", "subject"):
            names = sorted(p.name for p in (workspace / "data" / condition).iterdir())
            assert names == ["test.avmd", "train.avmd", "val.avmd", "world.avmd"]
        assert (workspace / "data" / "effective_config.json").exists()

    def test_train_outputs(self, workspace):
        assert (workspace / "phase1" / "phase1.ckpt" / DATA_FILE).exists()
        log = pd.read_csv(workspace / "phase1" / "train_log.csv")
        assert list(log.columns) == ["epoch", "split", "loss", "lr", "seconds"]
        assert log["epoch"].tolist() == [0, 0, 1, 1]

    def test_train_is_deterministic(self, workspace, tmp_path):
        config = workspace / "config.json"
        result = invoke("train", workspace / "data" / "source", "-c", config, "--max-epochs", 1, "-o", tmp_path)
        assert result.exit_code == 0, result.output
        first = pd.read_csv(workspace / "phase1" / "train_log.csv")["loss"]
        second = pd.read_csv(tmp_path / "train_log.csv")["loss"]
        assert first.tolist() == second.tolist()

    def test_adapt_then_eval(self, workspace, tmp_path):
        config = workspace / "config.json"
        adapt = invoke(
            "adapt", workspace / "phase1" / "phase1.ckpt", workspace / "data" / "subject",
            "--variant", "avm", "-c", config, "--max-epochs", 1, "-o", tmp_path / "adapt",
        )
        assert adapt.exit_code == 0, adapt.output
        assert "trainable parameters" in adapt.output
        assert (tmp_path / "adapt" / "adapt_log.csv").exists()

        evaluate = invoke(
            "eval", tmp_path / "adapt" / "phase2.ckpt", workspace / "data" / "subject", "-c", config, "-o", tmp_path / "eval"
        )
        assert evaluate.exit_code == 0, evaluate.output
        metrics = pd.read_csv(tmp_path / "eval" / "metrics.csv")
        assert list(metrics.columns) == ["neuron", "rho_trial", "rho_avg", "feve", "included", "reason"]
        assert len(metrics) == 5 and metrics["neuron"].iloc[-1] == "mean"
        summary = json.loads((tmp_path / "eval" / "eval_summary.json").read_text())
        assert summary["strategy"] == "avm" and summary["split"] == "test"
        assert summary["num_neurons"] == 4

    def test_camu_weights(self, workspace, tmp_path):
        config = workspace / "config.json"
        invoke(
            "adapt", workspace / "phase1" / "phase1.ckpt", workspace / "data" / "subject",
            "--variant", "avm-s", "-c", config, "--max-epochs", 1, "-o", tmp_path / "adapt",
        )
        result = invoke("camu-weights", tmp_path / "adapt" / "phase2.ckpt", "-o", tmp_path / "weights")
        assert result.exit_code == 0, result.output
        assert len(list((tmp_path / "weights").glob("camu_block*_unit*.csv"))) == 3
        assert len(list((tmp_path / "weights").glob("camu_hist_unit*.svg"))) == 3

    def test_camu_weights_needs_modulation(self, workspace, tmp_path):
        result = invoke("camu-weights", workspace / "phase1" / "phase1.ckpt", "-o", tmp_path)
        assert result.exit_code == 2


class TestStudies:
    def test_ablate(self, workspace, tmp_path):
        result = invoke(
            "ablate", workspace / "phase1" / "phase1.ckpt", workspace / "data" / "subject",
            "--weights", "0.5,1.0", "--dims", "2,3", "-c", workspace / "config.json", "--max-epochs", 1, "-o", tmp_path,
        )
        assert result.exit_code == 0, result.output
        frame = pd.read_csv(tmp_path / "ablation.csv")
        assert list(frame.columns) == ["weight", "dim", "rho_trial", "rho_avg", "feve", "trainable_params", "seconds"]
        assert list(zip(frame["weight"], frame["dim"])) == [(0.5, 2), (0.5, 3), (1.0, 2), (1.0, 3)]
        assert sorted(p.name for p in tmp_path.glob("*.svg")) == [
            "ablation_feve.svg", "ablation_rho_avg.svg", "ablation_rho_trial.svg",
        ]

    def test_ablate_rejects_bad_list(self, workspace, tmp_path):
        result = invoke(
            "ablate", workspace / "phase1" / "phase1.ckpt", workspace / "data" / "subject",
            "--dims", "two", "-o", tmp_path,
        )
        assert result.exit_code == 2

    def test_compare(self, workspace, tmp_path):
        result = invoke(
            "compare", workspace / "phase1" / "phase1.ckpt", workspace / "data" / "subject",
            "-c", workspace / "config.json", "--max-epochs", 1, "-o", tmp_path,
        )
        assert result.exit_code == 0, result.output
        frame = pd.read_csv(tmp_path / "comparison.csv")
        assert frame["strategy"].tolist() == ["frozen", "full-ft", "avm-s", "avm", "avm-b"]
        assert frame.loc[frame["strategy"] == "frozen", "trainable_params"].item() == 0
        trainable = dict(zip(frame["strategy"], frame["trainable_params"]))
        assert trainable["avm-s"] < trainable["avm"] < trainable["avm-b"] < trainable["full-ft"]


class TestCommands:
    def test_version(self):
        result = invoke("version")
        assert result.exit_code == 0
        assert result.output.strip() == f"avm-lab version {__version__}"

    def test_params(self, workspace):
        result = invoke("params", "-c", workspace / "config.json")
        assert result.exit_code == 0, result.output
        for variant in ("plain", "avm-s", "avm", "avm-b", "full-ft"):
            assert variant in result.output

    def test_params_writes_csv(self, workspace, tmp_path):
        result = invoke("params", "-c", workspace / "config.json", "-o", tmp_path)
        assert result.exit_code == 0, result.output
        frame = pd.read_csv(tmp_path / "parameters.csv")
        assert frame["variant"].tolist()[0] == "plain"
        assert {"backbone", "modulation", "readout", "trainable"} <= set(frame.columns)
        assert (frame.set_index("variant").loc["plain", "modulation"]) == 0

    def test_bad_config_exits_2(self, tmp_path, workspace):
        config = tmp_path / "bad.json"
        config.write_text(json.dumps({"train": {"momentum": 0.9}}))
        result = invoke("train", workspace / "data" / "source", "-c", config, "-o", tmp_path / "out")
        assert result.exit_code == 2
        assert "momentum" in result.output

    def test_corrupt_checkpoint_exits_3(self, workspace, tmp_path):
        source = workspace / "phase1" / "phase1.ckpt"
        copy = tmp_path / "phase1.ckpt"
        copy.mkdir()
        for name in ("manifest.json", DATA_FILE):
            (copy / name).write_bytes((source / name).read_bytes())
        data = bytearray((copy / DATA_FILE).read_bytes())
        data[0] ^= 0xFF
        (copy / DATA_FILE).write_bytes(bytes(data))
        result = invoke("eval", copy, workspace / "data" / "source", "-o", tmp_path / "eval")
        assert result.exit_code == 3

    def test_wrong_neuron_count_exits_2(self, workspace, tmp_path):
        config = tmp_path / "wide.json"
        config.write_text(json.dumps({**TINY_CONFIG, "world": {**TINY_CONFIG["world"], "num_neurons": 6}}))
        assert invoke("synth", "-c", config, "-o", tmp_path / "data").exit_code == 0
        result = invoke(
            "eval", workspace / "phase1" / "phase1.ckpt", tmp_path / "data" / "source", "-c", config, "-o", tmp_path / "eval"
        )
        assert result.exit_code == 2


class TestReproducibility:
    def run_pipeline(self, workspace, out, seed):
        config = workspace / "config.json"
        data = workspace / "data"
        steps = [
            ("train", data / "source", "-c", config, "--seed", seed, "--max-epochs", 2, "-o", out / "phase1"),
            (
                "adapt", out / "phase1" / "phase1.ckpt", data / "subject", "--variant", "avm-b",
                "-c", config, "--seed", seed, "--max-epochs", 2, "-o", out / "adapt",
            ),
            ("eval", out / "adapt" / "phase2.ckpt", data / "subject", "-c", config, "-o", out / "eval"),
        ]
        for step in steps:
            result = invoke(*step)
            assert result.exit_code == 0, result.output

    def test_same_seed_gives_identical_artifacts(self, workspace, tmp_path):
        self.run_pipeline(workspace, tmp_path / "a", 11)
        self.run_pipeline(workspace, tmp_path / "b", 11)
        artifacts = [
            "phase1/phase1.ckpt/manifest.json",
            f"phase1/phase1.ckpt/{DATA_FILE}",
            "adapt/phase2.ckpt/manifest.json",
            f"adapt/phase2.ckpt/{DATA_FILE}",
            "eval/metrics.csv",
        ]
        for name in artifacts:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name

    def test_other_seed_changes_weights(self, workspace, tmp_path):
        self.run_pipeline(workspace, tmp_path / "a", 11)
        self.run_pipeline(workspace, tmp_path / "b", 12)
        name = f"phase1/phase1.ckpt/{DATA_FILE}"
        assert (tmp_path / "a" / name).read_bytes() != (tmp_path / "b" / name).read_bytes()


class TestAblationPersistence:
    def test_finished_cells_survive_a_crash(self, workspace, tmp_path, monkeypatch):
        config = load_run_config(workspace / "config.json")
        experiment = AdaptationExperiment(config)
        real_adapt = experiment._adapt
        calls = []

        def crash_on_second(*args, **kwargs):
            calls.append(args)
            if len(calls) == 2:
                raise RuntimeError("worker lost")
            return real_adapt(*args, **kwargs)

        monkeypatch.setattr(experiment, "_adapt", crash_on_second)
        with pytest.raises(RuntimeError, match="worker lost"):
            experiment.ablate(
                workspace / "phase1" / "phase1.ckpt", workspace / "data" / "subject", tmp_path,
                weights=(1.0,), dims=(2, 3), max_epochs=1,
            )
        frame = pd.read_csv(tmp_path / "ablation.csv")
        assert len(frame) == 1
        assert (frame["weight"].item(), frame["dim"].item()) == (1.0, 2)
        assert frame["rho_avg"].notna().all()
