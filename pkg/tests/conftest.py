import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from implicit_flow import mlp
from implicit_flow.fields import AnalyticField, FitConfig, fit_sdf

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")


def richardson_fd(f, x, h=1e-4):
    """Central differences extrapolated from steps h and h/2 (error O(h^4))."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for k in range(x.size):
        def diff(step):
            e = np.zeros_like(x)
            e.flat[k] = step
            return (f(x + e) - f(x - e)) / (2 * step)
        out.flat[k] = (4 * diff(h / 2) - diff(h)) / 3
    return out


@pytest.fixture(scope="session")
def circle_net():
    """Small network fitted to a circle of radius 0.5."""
    return fit_sdf(AnalyticField("circle2d", center=np.zeros(2), radius=0.5),
                   FitConfig(hidden_width=32, depth=3, lr=3e-4, iterations=600, batch_size=1024),
                   seed=0, check=False)


@pytest.fixture(scope="session")
def sphere_net():
    return fit_sdf(AnalyticField("sphere", center=np.zeros(3), radius=0.5),
                   FitConfig(hidden_width=32, depth=3, lr=3e-4, iterations=1500, batch_size=1024),
                   seed=0, check=False)


@pytest.fixture
def random_net():
    return mlp.init_siren(3, 16, 3, 30.0, seed=7)


# one line per acceptance criterion, printed after the run
_CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    def record(name: str, ok: bool, detail: str) -> bool:
        line = f"{name}: {'PASS' if ok else 'FAIL'} ({detail})"
        _CRITERIA.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
