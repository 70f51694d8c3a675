import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ipsgp.errors import IngestionError
from ipsgp.observations import ObservationSet, preprocess_real_data, read_frames_csv

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@st.composite
def observation_sets(draw):
    M, L, N, d = (draw(st.integers(1, 3)) for _ in range(4))
    shape = (M, L, N, d)
    X = draw(arrays(float, shape, elements=finite))
    Z = draw(arrays(float, shape, elements=finite))
    V = draw(st.one_of(st.none(), arrays(float, shape, elements=finite)))
    return ObservationSet(times=np.arange(L) * 0.5, X=X, targets=Z, V=V, sigma_true=0.1, seed=4)


def _same(a, b):
    assert a.data_hash == b.data_hash
    for name in ("times", "X", "targets"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert (a.V is None) == (b.V is None)
    if a.V is not None:
        assert np.array_equal(a.V, b.V)


@settings(max_examples=30, deadline=None)
@given(observation_sets())
def test_json_roundtrip_exact(obs):
    _same(obs, ObservationSet.from_json(obs.to_json()))


@settings(max_examples=30, deadline=None)
@given(observation_sets())
def test_csv_roundtrip_exact(obs):
    _same(obs, ObservationSet.from_csv(obs.to_csv()))


def test_csv_columns():
    obs = ObservationSet(times=[0.0], X=np.zeros((1, 1, 2, 1)), targets=np.zeros((1, 1, 2, 1)), V=np.zeros((1, 1, 2, 1)))
    header = obs.to_csv().splitlines()[1]
    assert header == "m,l,t,agent,coord,x,v,target"


def test_hash_changes_with_data():
    X = np.zeros((1, 1, 2, 1))
    a = ObservationSet(times=[0.0], X=X, targets=X)
    b = ObservationSet(times=[0.0], X=X, targets=np.full_like(X, 1e-300))
    c = ObservationSet(times=[0.0], X=X, targets=X, seed=1)
    assert a.data_hash != b.data_hash
    assert a.data_hash != c.data_hash


def test_subset():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(3, 4, 2, 1))
    obs = ObservationSet(times=np.arange(4.0), X=X, targets=X)
    sub = obs.subset(m=[0, 2], l=[1, 3])
    assert sub.X.shape == (2, 2, 2, 1)
    assert np.array_equal(sub.times, [1.0, 3.0])
    assert np.array_equal(sub.X[1, 0], X[2, 1])


def test_arrays_are_read_only():
    obs = ObservationSet(times=[0.0], X=np.zeros((1, 1, 2, 1)), targets=np.zeros((1, 1, 2, 1)))
    with pytest.raises(ValueError):
        obs.X[0, 0, 0, 0] = 1.0


def test_constant_frames():
    frames = np.tile(np.array([[0.2, 0.4], [0.9, 0.1], [0.5, 0.5]]), (12, 1, 1))
    obs = preprocess_real_data(frames, window=3, dt=0.1)
    assert np.all(obs.V == 0.0)
    assert np.all(obs.targets == 0.0)


def test_linear_motion():
    t = np.arange(15) * 0.2
    a, b = np.array([1.0, -2.0]), np.array([0.5, 3.0])
    frames = np.stack([a + b * tk for tk in t])[:, None, :]
    frames = np.concatenate([frames, frames + 1.0], axis=1)
    obs = preprocess_real_data(frames, window=4, dt=0.2)
    span = (frames.max(axis=(0, 1)) - frames.min(axis=(0, 1)))
    assert np.allclose(obs.V, b / span, rtol=1e-12, atol=0)
    assert np.allclose(obs.targets, 0.0, rtol=0, atol=1e-12)


def test_quadratic_acceleration_exact():
    t = np.arange(5.0)
    frames = np.stack([t**2, np.zeros_like(t)], axis=1)[:, :, None]
    obs = preprocess_real_data(frames, window=1, dt=1.0)
    # positions are divided by their range 16, so the acceleration 2 becomes 2/16
    assert np.all(obs.targets[..., 0, 0] * 16.0 == 2.0)


def test_too_few_frames():
    with pytest.raises(IngestionError):
        preprocess_real_data(np.zeros((5, 2, 2)), window=4, dt=1.0)


def test_missing_agent_reports_frame():
    text = "frame,agent,x,y\n0,0,0,0\n0,1,1,1\n1,0,0,0\n2,0,0,0\n2,1,1,1\n"
    with pytest.raises(IngestionError) as info:
        read_frames_csv(text, is_text=True)
    assert info.value.frame == 1


def test_nonfinite_frame_reports_index():
    frames = np.zeros((8, 2, 2))
    frames[5, 1, 0] = np.nan
    with pytest.raises(IngestionError) as info:
        preprocess_real_data(frames, window=2, dt=1.0)
    assert info.value.frame == 5


def test_read_frames_csv_shape():
    text = "frame,agent,x,y\n0,0,0,0\n0,1,1,2\n1,1,3,4\n1,0,5,6\n"
    frames = read_frames_csv(text, is_text=True)
    assert frames.shape == (2, 2, 2)
    assert np.array_equal(frames[1, 0], [5, 6])
