import numpy as np
import pytest
import torch

from glocalclip import RunConfig, build_toy, init_bank

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def backbone():
    return build_toy()


@pytest.fixture
def toy_cfg():
    return RunConfig.toy()


@pytest.fixture
def bank(backbone, toy_cfg):
    return init_bank(toy_cfg, backbone.text)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL/SKIP line per acceptance criterion (tests that record a ``criterion`` property)."""
    rows = []
    for outcome in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props and (rep.when == "call" or rep.outcome != "passed"):
                rows.append((props["criterion"], rep.outcome, props.get("detail", "")))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, detail in sorted(rows):
        status = {"passed": "PASS", "skipped": "SKIP"}.get(outcome, "FAIL")
        line = f"{status}  {name}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
