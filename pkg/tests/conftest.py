import os

import pytest
from hypothesis import HealthCheck, settings

from minority_lab.conditioning import build_vocab
from minority_lab.denoiser import TrainConfig, make_analytic, train_denoiser
from minority_lab.schedule import make_schedule
from minority_lab.world import default_world_params, gaussian_world_params, make_world

settings.register_profile("lab", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "lab"))


@pytest.fixture(scope="session")
def world():
    return make_world(default_world_params())


@pytest.fixture(scope="session")
def gauss_world():
    return make_world(gaussian_world_params(2), require_minority=False)


@pytest.fixture(scope="session")
def sched():
    return make_schedule(50, "cosine")


@pytest.fixture(scope="session")
def analytic(world, sched):
    return make_analytic(world, sched)


@pytest.fixture(scope="session")
def gauss_analytic(gauss_world, sched):
    return make_analytic(gauss_world, sched)


@pytest.fixture(scope="session")
def trained_small(world, sched):
    """A quickly trained model; enough for algebraic identities and plumbing."""
    model, report = train_denoiser(world, build_vocab(world, seed=0), TrainConfig(steps=2000, seed=0), sched)
    return model, report


@pytest.fixture(scope="session")
def trained_full(world, sched):
    """Default-config training run (20000 steps)."""
    cfg = TrainConfig(seed=0)
    model, report = train_denoiser(world, build_vocab(world, seed=0), cfg, sched)
    return model, report


# -- acceptance summary: one PASS/FAIL line per criterion at the end of the run ----------

_ACCEPTANCE: dict[int, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid or report.when != "call":
        return
    props = dict(report.user_properties)
    if "criterion" in props:
        verdict = "PASS" if report.passed else "FAIL"
        n = props["criterion"]
        _ACCEPTANCE[n] = f"{verdict} criterion {n:>2}: {props.get('title', '')}  [{props.get('detail', '')}]"


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
