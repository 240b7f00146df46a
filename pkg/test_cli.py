"""
Tests for the command-line entry point
"""
import hashlib
import json
from unittest.mock import patch

import pytest

from mulmon.cli import main
from mulmon.errors import NumericError


@pytest.fixture
def dataset_dir(env_clean):
    """Micro dataset generated through the CLI"""
    assert main(["gen-data", "--preset", "micro", "--output", str(env_clean / "gen")]) == 0
    return env_clean / "gen" / "dataset"


@pytest.fixture
def checkpoint_dir(env_clean, dataset_dir):
    """Checkpoints from a two-step micro run"""
    output = env_clean / "train"
    assert main(["train", "--preset", "micro", "--data", str(dataset_dir), "--steps", "2", "--output", str(output)]) == 0
    return output / "checkpoints"


def _directory_digest(root):
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(path.relative_to(root).as_posix().encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


class TestGenData:
    """Test dataset generation"""

    def test_writes_dataset_and_config(self, env_clean, dataset_dir):
        """Test the manifest, chunks and effective config are written"""
        manifest = json.loads((dataset_dir / "manifest.json").read_text())
        assert manifest["splits"] == {"train": 8, "test": 4}
        assert len(list((dataset_dir / "scenes").glob("*.npz"))) == 12
        effective = json.loads((env_clean / "gen" / "effective_config.json").read_text())
        assert effective["run"]["command"] == "gen-data"
        assert effective["config"]["data"]["image_size"] == 16

    def test_default_output_root(self, env_clean):
        """Test MULMON_OUTPUT_ROOT is used when --output is absent"""
        assert main(["gen-data", "--preset", "micro", "--set", "data.splits.train.num_scenes=1",
                     "--set", "data.splits.test.num_scenes=1"]) == 0
        assert (env_clean / "runs" / "gen-data" / "dataset" / "manifest.json").exists()

    def test_same_seed_same_directory(self, env_clean):
        """Test two runs with one seed write byte-identical datasets"""
        for name in ("a", "b"):
            assert main(["gen-data", "--preset", "micro", "--seed", "3", "--output", str(env_clean / name)]) == 0
        assert _directory_digest(env_clean / "a" / "dataset") == _directory_digest(env_clean / "b" / "dataset")
        assert "created_at" not in (env_clean / "a" / "dataset" / "manifest.json").read_text()

    def test_bad_override_exit_code(self, env_clean):
        """Test configuration errors exit with code 2"""
        assert main(["gen-data", "--preset", "micro", "--set", "data.nonsense=1"]) == 2


class TestTrainAndEval:
    """Test training, evaluation and prediction commands"""

    def test_train_writes_checkpoints(self, env_clean, checkpoint_dir):
        """Test a short run leaves checkpoints and metrics"""
        assert (checkpoint_dir / "ckpt-00000002.pt").exists()
        lines = (env_clean / "train" / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 2

    def test_missing_dataset_exit_code(self, env_clean):
        """Test a missing dataset exits with code 3"""
        assert main(["train", "--preset", "micro", "--data", str(env_clean / "nowhere")]) == 3

    def test_numeric_failure_exit_code(self, env_clean, dataset_dir):
        """Test numeric failures exit with code 4"""
        with patch("mulmon.training.Trainer.fit", side_effect=NumericError("non-finite training loss", scene_id="train-00000")):
            code = main(["train", "--preset", "micro", "--data", str(dataset_dir), "--output", str(env_clean / "nan")])
        assert code == 4

    def test_resume_restores_before_fit(self, env_clean, dataset_dir, checkpoint_dir):
        """Test --resume loads the checkpoint before training continues"""
        calls = []
        with patch("mulmon.training.Trainer.resume", side_effect=lambda path: calls.append(("resume", str(path)))), patch(
            "mulmon.training.Trainer.fit", side_effect=lambda progress=True: calls.append(("fit", None))
        ):
            code = main([
                "train", "--preset", "micro", "--data", str(dataset_dir), "--output", str(env_clean / "resumed"),
                "--resume", str(checkpoint_dir),
            ])
        assert code == 0
        assert calls == [("resume", str(checkpoint_dir)), ("fit", None)]

    def test_eval(self, env_clean, dataset_dir, checkpoint_dir):
        """Test evaluation writes a summary table and metrics record"""
        output = env_clean / "eval"
        code = main([
            "eval", "--preset", "micro", "--checkpoint", str(checkpoint_dir), "--data", str(dataset_dir),
            "--metrics", "miou,rmse", "--output", str(output),
        ])
        assert code == 0
        record = json.loads((output / "metrics.jsonl").read_text().splitlines()[0])
        assert set(record["metrics"]) == {"miou", "rmse"}
        assert "miou" in (output / "summary.txt").read_text()

    def test_predict(self, env_clean, dataset_dir, checkpoint_dir):
        """Test predictions at query azimuths are saved as images"""
        output = env_clean / "predict"
        code = main([
            "predict", "--checkpoint", str(checkpoint_dir), "--data", str(dataset_dir), "--scene", "test-00000",
            "--observed", "0,1", "--azimuths", "0,90", "--output", str(output),
        ])
        assert code == 0
        for label in ("az0", "az90"):
            assert (output / f"{label}_image.png").exists()
            assert (output / f"{label}_segmentation.png").exists()
        assert (output / "queries.csv").read_text().startswith("query,")

    def test_sample(self, env_clean, checkpoint_dir):
        """Test random prior scenes are saved"""
        output = env_clean / "sample"
        assert main(["sample", "--checkpoint", str(checkpoint_dir), "--count", "2", "--output", str(output)]) == 0
        assert len(list(output.glob("sample*_image.png"))) == 2

    def test_missing_checkpoint_exit_code(self, env_clean):
        """Test a missing checkpoint exits with code 3"""
        assert main(["sample", "--checkpoint", str(env_clean / "none.pt")]) == 3
