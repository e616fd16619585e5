import numpy as np
import pytest

from sdeep.model import ModelConfig


def tiny_config(**kw) -> ModelConfig:
    base = dict(conv_widths=[4, 3], kernel_lens=[3, 3], d_a=3, head_widths=[6], num_classes=3,
                num_channels=4, num_timesteps=8, channel_groups=[[0, 1], [2, 3]], dropout_rate=0.2)
    base.update(kw)
    return ModelConfig(**base).validate()


def tiny_data(n=60, seed=0, num_classes=3, t=8, b=4):
    """Separable toy series: class c has a bump on channel c % b."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % num_classes
    x = rng.normal(0.0, 0.05, size=(n, t, b)) + 0.5
    for i, c in enumerate(y):
        x[i, t // 2 :, c % b] += 0.4
    return x, y


@pytest.fixture
def tiny():
    return tiny_config, tiny_data


# -- acceptance summary -------------------------------------------------------

ACCEPTANCE_LINES = []


@pytest.fixture
def record_criterion():
    """Collect one ``CRITERION n: PASS|FAIL`` line; printed in the terminal summary."""

    def record(number, passed, detail):
        ACCEPTANCE_LINES.append((number, f"CRITERION {number}: {'PASS' if passed else 'FAIL'} - {detail}"))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES, key=lambda t: t[0]):
            terminalreporter.write_line(line)
