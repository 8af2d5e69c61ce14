import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from turbidspike.events import EventStream

settings.register_profile(
    "repo",
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("repo")


@st.composite
def event_streams(draw, max_events=60, max_dim=12, max_t=5000, with_triggers=False):
    """Random valid streams on a small sensor."""
    w = draw(st.integers(1, max_dim))
    h = draw(st.integers(1, max_dim))
    n = draw(st.integers(0, max_events))
    t = draw(st.lists(st.integers(0, max_t), min_size=n, max_size=n))
    x = draw(st.lists(st.integers(0, w - 1), min_size=n, max_size=n))
    y = draw(st.lists(st.integers(0, h - 1), min_size=n, max_size=n))
    p = draw(st.lists(st.sampled_from([1, -1]), min_size=n, max_size=n))
    trig = ()
    if with_triggers:
        edges = draw(st.lists(st.integers(0, max_t), max_size=6, unique=True).map(sorted))
        trig = tuple((tt, "rise" if i % 2 == 0 else "fall") for i, tt in enumerate(edges))
    return EventStream(t, x, y, p, (w, h), trig, sort=True)


def random_stream(rng, n, w=16, h=16, t_max=50_000):
    return EventStream(
        rng.integers(0, t_max, n), rng.integers(0, w, n), rng.integers(0, h, n),
        rng.choice([-1, 1], n), (w, h), sort=True,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria record one line each; printed at the end of the session
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
