import time
from dataclasses import dataclass

import pytest

from dvk import envs
from dvk import model as M

# desk-scale pendulum model shared by the prediction and control acceptance checks
DESK_TRIALS, DESK_STEPS = 200, 128
DESK_CONFIG = dict(T=32, H=32, epochs=40, steps_per_epoch=100, seed=0, kl_warmup_epochs=6,
                   inverse_fit="invert")

_RESULTS = []


def record(name, passed, detail=""):
    """Log one acceptance criterion; the summary hook prints these at the end of the run."""
    _RESULTS.append((name, bool(passed), detail))


@pytest.fixture
def acceptance():
    return record


@dataclass
class TrainedModel:
    dvk: object
    cpu_seconds: float
    checkpoint: object


@pytest.fixture(scope="session")
def desk_model(tmp_path_factory):
    spec = envs.get_env("pendulum")
    trials = envs.generate_trials(spec, DESK_TRIALS, DESK_STEPS, seed=1)
    config = M.DvkConfig(spec.state_dim, spec.action_dim, **DESK_CONFIG)
    path = tmp_path_factory.mktemp("desk") / "ck"
    start = time.process_time()
    result = M.train(trials, config, checkpoint_dir=path)
    return TrainedModel(result.model, time.process_time() - start, path)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
