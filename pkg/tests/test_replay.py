import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fql.envs import ENV_REGISTRY, make_env
from fql.replay import (
    ActionBoxFrame,
    ReplayBuffer,
    density_histogram,
    orthonormal_actions,
    orthonormal_complement,
)


def make_buffer(capacity=10, sd=2, ad=2):
    return ReplayBuffer(sd, ad, -np.ones(ad), np.ones(ad), capacity)


def push_item(buf, k):
    buf.push(np.full(buf.state_dim, k), np.full(buf.action_dim, 0.1 * k), float(k), np.full(buf.state_dim, k + 1), False)


def test_ring_evicts_oldest():
    buf = make_buffer(capacity=2)
    for k in range(3):
        push_item(buf, k)
    assert len(buf) == 2
    assert [buf[i].reward for i in range(2)] == [1.0, 2.0]


def test_size_never_exceeds_capacity():
    buf = make_buffer(capacity=5)
    for k in range(23):
        push_item(buf, k)
        assert len(buf) == min(k + 1, 5)
    assert [buf[i].reward for i in range(5)] == [18.0, 19.0, 20.0, 21.0, 22.0]


def test_pushed_item_retrievable():
    buf = make_buffer()
    push_item(buf, 4)
    t = buf[-1]
    assert t.reward == 4.0 and np.array_equal(t.state, [4.0, 4.0]) and np.array_equal(t.next_state, [5.0, 5.0])


def test_push_rejects_wrong_dims():
    buf = make_buffer()
    with pytest.raises(ValueError):
        buf.push(np.zeros(3), np.zeros(2), 0.0, np.zeros(2), False)
    with pytest.raises(ValueError):
        buf.push(np.zeros(2), np.zeros(1), 0.0, np.zeros(2), False)


def test_sample_single_item_repeats():
    buf = make_buffer()
    push_item(buf, 7)
    batch = buf.sample(4, np.random.default_rng(0))
    assert len(batch) == 4
    assert np.all(batch.rewards == 7.0)


def test_sample_empty_raises():
    with pytest.raises(ValueError):
        make_buffer().sample(1, np.random.default_rng(0))


def test_sample_reproducible():
    buf = make_buffer()
    for k in range(10):
        push_item(buf, k)
    a = buf.sample(32, np.random.default_rng(5))
    b = buf.sample(32, np.random.default_rng(5))
    assert np.array_equal(a.rewards, b.rewards)


def test_sample_uniform_within_binomial_bound():
    buf = make_buffer()
    for k in range(10):
        push_item(buf, k)
    n = 100_000
    draws = buf.sample(n, np.random.default_rng(123)).rewards.astype(int)
    counts = np.bincount(draws, minlength=10)
    sigma = np.sqrt(n * 0.1 * 0.9)
    assert np.all(np.abs(counts - n / 10) < 3 * sigma)


def test_frame_round_trip():
    frame = ActionBoxFrame([-2.0, 0.0, 1.0], [4.0, 1.0, 1.5])
    rng = np.random.default_rng(0)
    a = rng.uniform(frame.low, frame.high, size=(100, 3))
    np.testing.assert_allclose(frame.from_centered(frame.to_centered(a)), a, rtol=0, atol=1e-12)
    np.testing.assert_allclose(frame.shift, [1.0, 0.5, 1.25])
    np.testing.assert_allclose(frame.radius, [3.0, 0.5, 0.25])


def test_frame_rejects_empty_box():
    with pytest.raises(ValueError):
        ActionBoxFrame([0.0, 1.0], [1.0, 1.0])


def test_axis_case():
    frame = ActionBoxFrame(-np.ones(2), np.ones(2))
    np.testing.assert_allclose(orthonormal_actions(np.array([1.0, 0.0]), frame), [[0.0, 1.0]], atol=1e-15)


def test_rotation_convention():
    frame = ActionBoxFrame(-np.ones(2), np.ones(2))
    (v,) = orthonormal_actions(np.array([0.6, 0.8]), frame)
    np.testing.assert_allclose(v, [-0.8, 0.6], atol=1e-15)
    assert abs(v @ np.array([0.6, 0.8])) < 1e-15
    assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-15)


def gram_schmidt(vectors):
    """Classical Gram-Schmidt on rows, used only as an independent check."""
    basis = []
    for v in vectors:
        w = v - sum((v @ b) * b for b in basis)
        basis.append(w / np.linalg.norm(w))
    return np.array(basis)


def test_eight_dim_gram_is_identity_and_spans_complement():
    rng = np.random.default_rng(2)
    frame = ActionBoxFrame(-np.ones(8), np.ones(8))
    for _ in range(50):
        a = rng.uniform(-1, 1, 8)
        v = orthonormal_actions(a, frame)
        assert v.shape == (7, 8)
        stack = np.vstack([a / np.linalg.norm(a), v])
        np.testing.assert_allclose(stack @ stack.T, np.eye(8), atol=1e-9)
        # same complement as Gram-Schmidt on (a, e1..e8): projectors agree
        gs = gram_schmidt(np.vstack([a, np.eye(8)[:7] + 1e-3 * rng.normal(size=(7, 8))]))[1:]
        np.testing.assert_allclose(v.T @ v, gs.T @ gs, atol=1e-9)


def test_degenerate_center_returns_standard_basis():
    frame = ActionBoxFrame([0.0, 0.0, 0.0], [2.0, 4.0, 6.0])
    v = orthonormal_actions(frame.shift, frame)
    np.testing.assert_allclose(frame.to_centered(v), np.eye(3)[1:])
    v2 = orthonormal_complement(np.zeros((1, 2)))
    np.testing.assert_allclose(v2[0], [[0.0, 1.0]])


def test_one_dim_action_rejected():
    with pytest.raises(ValueError):
        orthonormal_actions(np.array([0.5]), ActionBoxFrame([-1.0], [1.0]))


def test_count_truncates():
    frame = ActionBoxFrame(-np.ones(5), np.ones(5))
    assert orthonormal_actions(np.full(5, 0.3), frame, count=2).shape == (2, 5)
    with pytest.raises(ValueError):
        orthonormal_actions(np.full(5, 0.3), frame, count=5)


@settings(max_examples=300, deadline=None)
@given(st.integers(2, 9).flatmap(lambda n: st.tuples(
    arrays(float, n, elements=st.floats(-1, 1)),
    arrays(float, n, elements=st.floats(-3, 3)),
    arrays(float, n, elements=st.floats(0.01, 5)),
)))
def test_orthonormality_and_box_containment(args):
    unit, shift, radius = args
    frame = ActionBoxFrame(shift - radius, shift + radius)
    a = frame.from_centered(unit)
    v = orthonormal_actions(a, frame)
    vhat = frame.to_centered(v)
    ahat = frame.to_centered(a)
    if np.linalg.norm(ahat) > 1e-12:
        assert np.all(np.abs(vhat @ (ahat / np.linalg.norm(ahat))) < 1e-9)
    np.testing.assert_allclose(vhat @ vhat.T, np.eye(len(unit) - 1), atol=1e-9)
    assert frame.contains(v, tol=1e-9)


@pytest.mark.parametrize("env_id", sorted(ENV_REGISTRY))
def test_env_boxes_supported(env_id):
    spec = make_env(env_id).spec
    frame = ActionBoxFrame(spec.action_low, spec.action_high)
    a = np.random.default_rng(0).uniform(spec.action_low, spec.action_high, (200, spec.action_dim))
    v = orthonormal_actions(a, frame)
    assert v.shape == (200, spec.action_dim - 1, spec.action_dim)


def test_histogram_identical_actions_single_bin():
    buf = make_buffer(capacity=20)
    for _ in range(20):
        buf.push(np.zeros(2), np.array([0.3, -0.5]), 0.0, np.zeros(2), False)
    h = density_histogram(buf, bins=10)
    assert np.all(np.count_nonzero(h.action, axis=1) == 1)
    np.testing.assert_allclose(h.action.max(axis=1), 1.0)
    np.testing.assert_allclose(h.orthonormal.sum(axis=1), 1.0, atol=1e-9)


def test_histogram_uniform_within_multinomial_bound():
    n, bins = 20_000, 10
    rng = np.random.default_rng(11)
    buf = ReplayBuffer(1, 3, -np.ones(3), np.ones(3), n)
    for a in rng.uniform(-1, 1, (n, 3)):
        buf.push(np.zeros(1), a, 0.0, np.zeros(1), False)
    h = density_histogram(buf, bins=bins)
    sigma = np.sqrt((1 / bins) * (1 - 1 / bins) / n)
    assert np.max(np.abs(h.action - 1 / bins)) < 3 * sigma
    np.testing.assert_allclose(h.action.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(h.orthonormal.sum(axis=1), 1.0, atol=1e-9)


def test_histogram_empty_raises():
    with pytest.raises(ValueError):
        density_histogram(make_buffer())


def test_csv_round_trip(tmp_path):
    buf = make_buffer(capacity=4)
    rng = np.random.default_rng(0)
    for _ in range(6):
        buf.push(rng.normal(size=2), rng.uniform(-1, 1, 2), rng.normal(), rng.normal(size=2), bool(rng.integers(2)))
    path = tmp_path / "buf.csv"
    buf.to_csv(path)
    back = ReplayBuffer.from_csv(path, -np.ones(2), np.ones(2))
    assert len(back) == 4
    for i in range(4):
        a, b = buf[i], back[i]
        assert np.array_equal(a.state, b.state) and np.array_equal(a.action, b.action)
        assert a.reward == b.reward and a.done == b.done and np.array_equal(a.next_state, b.next_state)
    assert path.read_text().splitlines()[0].split(",")[-2:] == ["v0_0", "v0_1"]
