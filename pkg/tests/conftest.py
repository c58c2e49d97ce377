import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY = """\
# small enough for a few seconds per run
height = 8
width = 8
n_min = 3
n_max = 6
count = 120
tail = 0.0
holdout = 0.3
d = 4
blocks = 1
t_max = 50
ddim_steps = 5
steps = 12
checkpoint_every = 5
eval_frames = 4
eval_clips = 17
eval_noise_draws = 1
smooth_window = 4
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


_ACCEPTANCE: dict = {}


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion; printed again in the terminal summary."""
    def record(number: int, title: str, ok: bool, detail: str = ""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else "")
        _ACCEPTANCE[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
