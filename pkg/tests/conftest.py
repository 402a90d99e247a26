import pytest

from mpnet_lab.model import ModelConfig, init_params

TINY = ModelConfig(layers=2, hidden=8, heads=2, ffn=16, vocab=13, max_pos=16,
                   rel_buckets=8, rel_max_dist=16, dropout=0.0)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_params():
    # larger init than training so the attention pattern is far from uniform
    return init_params(TINY, seed=3, std=0.5)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
