import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stylegs.gaussians import GaussianCloud

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_cloud(seed, n=8, spread=0.5, log_scale=np.log(0.15)):
    rng = np.random.default_rng(seed)
    return GaussianCloud(
        means=rng.uniform(-spread, spread, (n, 3)),
        rotations=rng.normal(size=(n, 4)),
        log_scales=log_scale + 0.3 * rng.normal(size=(n, 3)),
        opacity_logits=rng.normal(size=(n, 1)),
        colors=rng.uniform(size=(n, 3)),
    )


@pytest.fixture
def cloud8():
    return random_cloud(0)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def report_criterion(number, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'}  criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
