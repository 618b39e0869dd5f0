import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icodoa.evaluation import EvalConfig, EvaluationError, RunRecord, angular_error, rmsae


def test_angular_error_examples():
    assert angular_error([1, 0, 0], [1, 0, 0]) == pytest.approx(0.0)
    assert angular_error([1, 0, 0], [0, 1, 0]) == pytest.approx(90.0)
    assert angular_error([0.5, 0, 0], [1, 0, 0]) == pytest.approx(0.0)
    assert angular_error([0, 0, 0], [1, 0, 0]) == 90.0
    assert angular_error([-1, 0, 0], [1, 0, 0]) == pytest.approx(180.0)
    out = angular_error(np.array([[1, 0, 0], [0, 0, 1]]), np.array([[0, 1, 0], [0, 0, 1]]))
    assert np.allclose(out, [90, 0])


@settings(max_examples=100, deadline=None)
@given(st.tuples(*[st.floats(-10, 10)] * 3), st.floats(0.01, 100))
def test_angular_error_scale_invariant(v, s):
    v = np.asarray(v)
    if np.linalg.norm(v) < 1e-3:
        return
    u = np.array([0.6, 0.0, 0.8])
    assert angular_error(v * s, u) == pytest.approx(angular_error(v, u), abs=1e-6)


def test_rmsae_examples():
    cfg = EvalConfig(skip_initial_frames=0)
    assert rmsae(np.zeros(5), cfg) == 0.0
    assert rmsae(np.full(9, 7.5), cfg) == pytest.approx(7.5)
    assert rmsae([3.0, 4.0], cfg) == pytest.approx(3.5355339059327378)


def test_rmsae_skip_and_silence():
    e = [100, 100, 3, 4]
    assert rmsae(e, EvalConfig(skip_initial_frames=2)) == pytest.approx(3.5355339059327378)
    cfg = EvalConfig(skip_initial_frames=0, exclude_silent=True)
    assert rmsae([3, 50, 4], cfg, active=[1, 0, 1]) == pytest.approx(3.5355339059327378)
    with pytest.raises(EvaluationError):
        rmsae([1, 2], cfg)
    with pytest.raises(EvaluationError):
        rmsae([1, 2], EvalConfig(skip_initial_frames=5))
    with pytest.raises(EvaluationError):
        EvalConfig(skip_initial_frames=-1)


def test_run_record_roundtrip():
    rec = RunRecord({"r": 1}, 7, {"a": 3.0, "b": 5.0}, {"note": "x"})
    agg = rec.aggregates()
    assert agg == {"mean": 4.0, "median": 4.0, "std": 1.0, "count": 2}
    back = RunRecord.from_json(rec.to_json())
    assert back == rec
    assert RunRecord({}, None).aggregates()["count"] == 0
