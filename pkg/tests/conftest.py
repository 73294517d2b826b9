import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from lssl.cli import main

PIPELINE_COMMANDS = ("generate", "train", "verify", "analyze", "classify", "plot")


@pytest.fixture(scope="session")
def standard_run(tmp_path_factory):
    """One full pipeline run at the standard desk configuration.

    All defaults: 200 subjects (100/100), 2-5 annual visits, 32x32 images,
    32-D latent, 30 epochs, seed 17. Shared by every acceptance criterion.
    """
    root = tmp_path_factory.mktemp("standard_run")
    config_path = root / "config.json"
    config_path.write_text(json.dumps({"seed": 17}))
    out = root / "out"
    runner = CliRunner()
    exit_codes = {}
    for command in PIPELINE_COMMANDS:
        result = runner.invoke(main, [command, "--config", str(config_path),
                                      "--out", str(out)])
        exit_codes[command] = result.exit_code
        assert result.exit_code == 0, f"{command} failed:\n{result.output}"
    return {"root": root, "config_path": config_path, "out": out,
            "exit_codes": exit_codes}


class CriterionReport:
    """Collects one pass/fail line per acceptance criterion."""

    def __init__(self):
        self.lines = []

    def record(self, name: str, passed: bool, detail: str):
        line = f"{name}: {'PASS' if passed else 'FAIL'} - {detail}"
        self.lines.append(line)
        print(line)
        return passed


@pytest.fixture(scope="session")
def criterion_report(tmp_path_factory):
    report = CriterionReport()
    yield report
    path = Path(tmp_path_factory.getbasetemp()) / "acceptance_report.txt"
    path.write_text("\n".join(report.lines) + "\n")
    print("\n=== acceptance criteria summary ===")
    for line in report.lines:
        print(line)
