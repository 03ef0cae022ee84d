import numpy as np
import pytest

from summix.mixing import SummaryMixingParams
from summix.numkernel import Linear


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def identity_summary_params(dim: int = 1) -> SummaryMixingParams:
    """f and s are identities, c is the plain concatenation (test-only linear params)."""
    return SummaryMixingParams(Linear.identity(dim), Linear.identity(dim), Linear.identity(2 * dim),
                               local_act="identity", summary_act="identity", combine_act="identity")


def tiny_config(**overrides):
    from summix.encoder import EncoderConfig

    base = dict(input_dim=6, num_blocks=2, d_model=8, num_heads=2, conv_kernel=5)
    base.update(overrides)
    return EncoderConfig(**base)


# acceptance criteria report one line each; printed after the run regardless of capture
CRITERIA: dict[int, str] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    CRITERIA[number] = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} ({detail})"
    print(CRITERIA[number])


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[number])
