import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from duo import autodiff as ad

settings.register_profile("duo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("duo")


@pytest.fixture(autouse=True)
def double_precision():
    prev = ad.DEFAULT_DTYPE
    ad.DEFAULT_DTYPE = np.float64
    yield
    ad.DEFAULT_DTYPE = prev


LEXSUB_CONFIG = """\
task = translation
[model]
n_layers = 2
heads = 4
d_model = 32
d_ff = 64
[data]
synthetic = lexsub
synth_vocab = 40
synth_min_len = 3
synth_max_len = 8
synth_train = 2000
synth_valid = 200
[train]
max_epochs = 30
seed = 0
"""


class LexsubRun:
    def __init__(self, root):
        from duo.cli import main
        from duo.config import parse_config
        from duo.harness import load_translation

        self.config = root / "lexsub.cfg"
        self.config.write_text(LEXSUB_CONFIG, encoding="utf-8")
        self.out = root / "run"
        self.exit_code = main(["train-translator", "--config", str(self.config), "--out", str(self.out)])
        self.task = load_translation(parse_config(self.config))
        self.checkpoint = self.out / "checkpoint.duo"


@pytest.fixture(scope="session")
def lexsub_run(tmp_path_factory):
    """Toy translator trained once on the lexsub task through the CLI."""
    return LexsubRun(tmp_path_factory.mktemp("lexsub"))


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion and return the verdict."""
    def record(number, title, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {title}" + (f" [{detail}]" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
