import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from syschaos.metrics import Activity, MetricEpoch, MetricKind, MetricPoint, MetricSeries
from syschaos.profile import ConfigurationError, Steadiness, SteadyStateProfile, infer_steady_state


def epoch(columns, n=40, target="t", interval=15):
    e = MetricEpoch(target, interval, n * interval)
    for name, values in columns.items():
        pts = [MetricPoint(name, i * interval, v) for i, v in enumerate(values)]
        e.series[name] = MetricSeries(name, MetricKind.GAUGE, n, pts)
    return e


def gauss(seed, mu=0.0, n=40):
    rng = random.Random(seed)
    return [rng.gauss(mu, 1.0) for _ in range(n)]


@pytest.fixture
def pair():
    e1 = epoch({"same": gauss(1), "shift": gauss(2), "flat": [3.0] * 40, "only1": gauss(5),
                "sparse": gauss(6)[:15]})
    e2 = epoch({"same": gauss(3), "shift": gauss(4, mu=4.0), "flat": [3.0] * 40, "sparse": gauss(7)})
    return e1, e2


class TestInference:
    def test_classification(self, pair):
        prof = infer_steady_state(*pair)
        assert prof.metrics["same"].steadiness is Steadiness.STEADY
        assert prof.metrics["shift"].steadiness is Steadiness.UNSTABLE
        for name in ("flat", "only1", "sparse"):
            assert prof.metrics[name].activity is Activity.INACTIVE
            assert prof.metrics[name].steadiness is None
        assert (prof.total, prof.active, prof.inactive, prof.unstable) == (5, 2, 3, 1)
        assert prof.steady_metrics == ["same"]

    def test_reference_is_pooled_epochs(self, pair):
        prof = infer_steady_state(*pair)
        assert prof.reference("same") == pair[0].values("same") + pair[1].values("same")
        with pytest.raises(KeyError):
            prof.reference("shift")

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6), st.floats(0.001, 0.2), st.floats(0.001, 0.2))
    def test_steady_set_shrinks_as_alpha_grows(self, seed, a, b):
        lo, hi = sorted((a, b))
        rng = random.Random(seed)
        cols1 = {f"m{i}": gauss(rng.random()) for i in range(8)}
        cols2 = {f"m{i}": gauss(rng.random(), mu=rng.uniform(0, 1)) for i in range(8)}
        e1, e2 = epoch(cols1), epoch(cols2)
        loose = set(infer_steady_state(e1, e2, lo).steady_metrics)
        strict = set(infer_steady_state(e1, e2, hi).steady_metrics)
        assert strict <= loose

    def test_rejects_mismatched_epochs(self):
        with pytest.raises(ConfigurationError):
            infer_steady_state(epoch({}, target="a"), epoch({}, target="b"))
        with pytest.raises(ConfigurationError):
            infer_steady_state(epoch({}, interval=15), epoch({}, interval=5))
        with pytest.raises(ConfigurationError):
            infer_steady_state(epoch({}), epoch({}), alpha=1.5)


class TestSerialization:
    def test_round_trip(self, pair, tmp_path):
        prof = infer_steady_state(*pair)
        path = prof.save(tmp_path / "p" / "profile.json")
        back = SteadyStateProfile.load(path)
        assert back.to_dict() == prof.to_dict()
        assert back.steady_metrics == prof.steady_metrics
        assert back.to_dict()["counts"] == {"total": 5, "active": 2, "steady": 1}
