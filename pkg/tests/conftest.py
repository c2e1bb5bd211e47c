import time
import warnings
from types import SimpleNamespace

import numpy as np
import pytest

from anisograph import config
from anisograph.foliation import integrate_sigma
from anisograph.integrand import Area, EvenSeries, IntegrandStack, build_phi
from anisograph.jacobi import select_epsilon0, solve_inhomogeneous
from anisograph.pipeline import STAGES, load_cached, run_pipeline

CRITERIA: dict = {}

warnings.filterwarnings("ignore", category=RuntimeWarning)


def record(number: int, passed: bool, detail: str):
    """Remember one acceptance line; printed in the terminal summary."""
    CRITERIA[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(CRITERIA[number])


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])


def _chain(kind, mu=None):
    prof = build_phi(kind, mu)
    curve = integrate_sigma(prof)
    f1 = solve_inhomogeneous(curve)
    pair = select_epsilon0(curve, f1)
    return SimpleNamespace(profile=prof, stack=IntegrandStack.from_profile(prof), curve=curve,
                           f1=f1, pair=pair)


@pytest.fixture(scope="session")
def area3():
    return _chain(Area(3))


@pytest.fixture(scope="session")
def aniso():
    return _chain(EvenSeries.with_degree(8), 0.25)


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    """Full pipeline runs for area k = 3 and the anisotropic mu = 1/4 default family."""
    out = {}
    for name, over in (("area", {"mode": "area", "k": 3}),
                       ("aniso", {"mode": "anisotropic", "mu": 0.25})):
        cfg = config.load(overrides=over)
        d = tmp_path_factory.mktemp(name)
        t0 = time.perf_counter()
        rep = run_pipeline(cfg, d)
        wall = time.perf_counter() - t0
        arts = {}
        for s in STAGES:
            hit = load_cached(cfg, s, d)
            arts[s] = None if hit is None else hit["artifact"]
        out[name] = SimpleNamespace(cfg=cfg, out=d, report=rep, arts=arts, wall=wall)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
