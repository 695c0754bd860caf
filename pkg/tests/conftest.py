import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hdasim.archspec import HardwareConfig, reference_design  # noqa: E402
from hdasim.workload import fixture_model, load_model_spec  # noqa: E402


@pytest.fixture(scope="session")
def llama8b():
    return fixture_model("llama3_8b")


@pytest.fixture(scope="session")
def llama70b():
    return fixture_model("llama3_70b")


@pytest.fixture(scope="session")
def ref_cfg():
    return reference_design()


@pytest.fixture(scope="session")
def tiny_spec():
    return load_model_spec({"name": "tiny", "num_layers": 1, "hidden": 4, "num_heads": 1,
                            "num_kv_heads": 1, "ffn_dim": 8, "vocab": 16, "max_seq": 64,
                            "gated_ffn": False})


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
