"""Tests for CLI module."""

from pathlib import Path
from unittest.mock import MagicMock, Mock, patch

import pytest
from typer.testing import CliRunner

from harness.cli import app
from lib.api import EvalOutcome
from lib.errors import DivergenceError, UsageError
from lib.models import ProtocolResult, ProtocolRow
from lib.osadapt import IterationSweep

runner = CliRunner()


@pytest.fixture
def mock_lab() -> Mock:
    """Create a mock lab."""
    lab = Mock()
    lab.close = Mock()
    return lab


@pytest.fixture(autouse=True)
def quiet_context():
    """Skip probing git and the device for every manifest."""
    with patch("harness.cli.get_run_context", return_value={"os": "linux"}):
        yield


def protocol_result(status: str = "ok") -> ProtocolResult:
    return ProtocolResult(
        protocol="dg_loo",
        rows=[
            ProtocolRow(
                protocol="dg_loo",
                target="synth0",
                method="ges",
                os_iterations=0,
                run=0,
                seed=1,
                accuracy=0.5 if status == "ok" else None,
                status=status,  # type: ignore[arg-type]
            )
        ],
    )


class TestPermgen:
    """Tests for permgen command."""

    def test_permgen_writes_the_set(self, tmp_path: Path) -> None:
        """Test a real run and its summary."""
        out = tmp_path / "perms.txt"
        result = runner.invoke(app, ["permgen", "--tiles", "9", "--count", "5", "--out", str(out)])

        assert result.exit_code == 0
        assert "Wrote 5 permutations of 9 tiles" in result.stdout
        assert "min pairwise Hamming distance" in result.stdout
        assert out.read_text(encoding="utf-8").startswith("n=9 V=5 seed=0")
        assert (tmp_path / "manifest.json").is_file()

    def test_permgen_infeasible(self, tmp_path: Path) -> None:
        """Test that asking for more permutations than exist exits with status 2."""
        out = tmp_path / "perms.txt"
        result = runner.invoke(app, ["permgen", "--tiles", "3", "--count", "7", "--out", str(out)])

        assert result.exit_code == 2
        assert "infeasible: 7 > 3! = 6" in result.stdout
        assert not out.exists()


class TestSynth:
    """Tests for synth command."""

    @patch("harness.cli.get_lab")
    def test_synth(self, mock_get_lab: Mock, mock_lab: Mock, tmp_path: Path) -> None:
        """Test that the SynthSpec reaches the lab and the count is reported."""
        mock_get_lab.return_value = mock_lab
        dataset = MagicMock()
        dataset.__len__.return_value = 12
        dataset.domains = {"synth0": [], "synth1": []}
        mock_lab.synthesize.return_value = dataset

        result = runner.invoke(
            app, ["synth", "--out", str(tmp_path), "--domains", "2", "--per-class", "2"]
        )

        assert result.exit_code == 0
        assert "12 images in 2 domains" in result.stdout
        spec = mock_lab.synthesize.call_args[0][0]
        assert spec.num_domains == 2
        assert mock_lab.synthesize.call_args[1] == {"export": True}

    @patch("harness.cli.get_lab")
    def test_synth_invalid_spec(self, mock_get_lab: Mock, mock_lab: Mock, tmp_path: Path) -> None:
        """Test that an impossible dataset is a usage error."""
        mock_get_lab.return_value = mock_lab
        result = runner.invoke(app, ["synth", "--out", str(tmp_path), "--classes", "9"])
        assert result.exit_code == 2
        mock_lab.synthesize.assert_not_called()


class TestTrain:
    """Tests for train command."""

    @patch("harness.cli.get_lab")
    def test_train(self, mock_get_lab: Mock, mock_lab: Mock) -> None:
        """Test that flags override the preset and the summary is printed."""
        mock_get_lab.return_value = mock_lab
        outcome = mock_lab.train.return_value
        outcome.metadata.best_epoch = 2
        outcome.metadata.best_val_metric = 0.75
        outcome.checkpoint = Path("runs/train/checkpoint.pt")
        outcome.log = Path("runs/train/log.csv")

        result = runner.invoke(
            app,
            ["train", "--preset", "desk", "--epochs", "3", "--target", "synth2", "--data", "d"],
        )

        assert result.exit_code == 0
        assert "Training finished" in result.stdout
        assert "best epoch 2" in result.stdout
        assert "0.7500" in result.stdout
        config = mock_lab.train.call_args[0][0]
        assert config.backbone == "desk_cnn"
        assert config.epochs == 3
        assert mock_lab.train.call_args[1]["target"] == "synth2"
        mock_lab.load_data.assert_called_once_with(Path("d"), 66, None)
        mock_lab.close.assert_called_once()

    @patch("harness.cli.get_lab")
    def test_train_bad_config(self, mock_get_lab: Mock, mock_lab: Mock, tmp_path: Path) -> None:
        """Test that an unknown config key exits with status 2 before any work."""
        mock_get_lab.return_value = mock_lab
        path = tmp_path / "train.env"
        path.write_text("learning_rate=1\n", encoding="utf-8")

        result = runner.invoke(app, ["train", "--config", str(path)])

        assert result.exit_code == 2
        assert "learning_rate" in result.stdout
        mock_lab.train.assert_not_called()

    @patch("harness.cli.get_lab")
    def test_train_usage_error(self, mock_get_lab: Mock, mock_lab: Mock) -> None:
        """Test that library usage errors become status 2 with the reason."""
        mock_get_lab.return_value = mock_lab
        mock_lab.train.side_effect = UsageError("--mode da needs --target")

        result = runner.invoke(app, ["train", "--mode", "da", "--preset", "desk"])

        assert result.exit_code == 2
        assert "--mode da needs --target" in result.stdout

    @patch("harness.cli.get_lab")
    def test_train_divergence(self, mock_get_lab: Mock, mock_lab: Mock) -> None:
        """Test that a non-finite loss exits with status 3."""
        mock_get_lab.return_value = mock_lab
        mock_lab.train.side_effect = DivergenceError("epoch1-step4", "L_a", float("inf"))

        result = runner.invoke(app, ["train", "--preset", "desk"])

        assert result.exit_code == 3
        assert "epoch1-step4" in result.stdout


class TestEval:
    """Tests for eval command."""

    @patch("harness.cli.get_lab")
    def test_eval_table(self, mock_get_lab: Mock, mock_lab: Mock) -> None:
        """Test one accuracy row per iteration count."""
        mock_get_lab.return_value = mock_lab
        mock_lab.load_checkpoint.return_value.metadata.network.input_size = 24
        mock_lab.evaluate.return_value = EvalOutcome(
            sweep=IterationSweep(labels=[0, 1], predictions=[[0, 0], [1, 0]]),
            target="synth2",
            trace=None,
        )

        result = runner.invoke(
            app, ["eval", "--checkpoint", "c.pt", "--data", "d", "--os-iterations", "1"]
        )

        assert result.exit_code == 0
        assert "Accuracy on synth2" in result.stdout
        assert "1.0000" in result.stdout
        assert "0.5000" in result.stdout
        mock_lab.load_data.assert_called_once_with(Path("d"), 24, None)
        os_config = mock_lab.evaluate.call_args[0][2]
        assert os_config.iterations == 1

    @patch("harness.cli.get_lab")
    def test_eval_resolution_override(self, mock_get_lab: Mock, mock_lab: Mock) -> None:
        """Test that --resolution replaces the checkpoint's input size for ingestion."""
        mock_get_lab.return_value = mock_lab
        mock_lab.evaluate.return_value = EvalOutcome(
            sweep=IterationSweep(labels=[0], predictions=[[0]]), target=None, trace=None
        )

        result = runner.invoke(
            app, ["eval", "--checkpoint", "c.pt", "--data", "d", "--resolution", "30"]
        )

        assert result.exit_code == 0
        assert "all domains" in result.stdout
        mock_lab.load_data.assert_called_once_with(Path("d"), 30, None)


class TestProtocol:
    """Tests for protocol command."""

    @patch("harness.cli.get_lab")
    def test_protocol(self, mock_get_lab: Mock, mock_lab: Mock) -> None:
        """Test the ProtocolSpec handed to the lab and the summary table."""
        mock_get_lab.return_value = mock_lab
        mock_lab.run_protocol.return_value = protocol_result()
        mock_lab.report.return_value = [Path("runs/protocol/result.csv")]

        result = runner.invoke(
            app,
            [
                "protocol",
                "--protocol",
                "dg_loo",
                "--preset",
                "desk",
                "--reps",
                "2",
                "-m",
                "ges",
                "-m",
                "geos",
                "--data",
                "d",
            ],
        )

        assert result.exit_code == 0
        assert "dg_loo results" in result.stdout
        assert "0.5000" in result.stdout
        spec = mock_lab.run_protocol.call_args[0][0]
        assert spec.repetitions == 2
        assert spec.methods == ["ges", "geos"]
        assert spec.train.backbone == "desk_cnn"

    @patch("harness.cli.get_lab")
    def test_protocol_failed_rows(self, mock_get_lab: Mock, mock_lab: Mock) -> None:
        """Test that failed cells exit with status 3 after the report is written."""
        mock_get_lab.return_value = mock_lab
        mock_lab.run_protocol.return_value = protocol_result("failed")
        mock_lab.report.return_value = []

        result = runner.invoke(app, ["protocol", "--protocol", "dg_loo", "--data", "d"])

        assert result.exit_code == 3
        assert "1 row(s) failed" in result.stdout
        mock_lab.report.assert_called_once()

    @pytest.mark.parametrize(
        "args",
        [["--protocol", "loo"], ["--protocol", "dg_loo", "-m", "jigsaw"]],
        ids=["protocol", "method"],
    )
    @patch("harness.cli.get_lab")
    def test_protocol_unknown_names(
        self, mock_get_lab: Mock, mock_lab: Mock, args: list[str]
    ) -> None:
        """Test that unknown protocols and methods are usage errors."""
        mock_get_lab.return_value = mock_lab
        result = runner.invoke(app, ["protocol", *args])
        assert result.exit_code == 2
        assert "unknown" in result.stdout
        mock_lab.run_protocol.assert_not_called()


class TestReport:
    """Tests for report command."""

    @patch("harness.cli.get_lab")
    def test_report(self, mock_get_lab: Mock, mock_lab: Mock) -> None:
        """Test re-rendering an earlier result."""
        mock_get_lab.return_value = mock_lab
        mock_lab.load_result.return_value = protocol_result()
        mock_lab.report.return_value = [Path("runs/report/result.md")]

        result = runner.invoke(app, ["report", "--result", "result.csv", "--gains"])

        assert result.exit_code == 0
        assert "result.md" in result.stdout
        mock_lab.report.assert_called_once_with(protocol_result(), "md", True, False)
