import numpy as np
import pytest

from continuum_rl.errors import DomainError
from continuum_rl.nn import (
    AGENT_TOPOLOGY,
    AdamState,
    MlpParams,
    adam_step,
    copy_weights,
    dump_params,
    forward,
    load_params,
    loss,
    loss_gradient,
    mlp_init,
)


def fd_gradient(params, states, actions, targets, h=1e-5):
    g = np.zeros(params.size)
    for i in range(params.size):
        orig = params.flat[i]
        params.flat[i] = orig + h
        lp = loss(params, states, actions, targets)
        params.flat[i] = orig - h
        lm = loss(params, states, actions, targets)
        params.flat[i] = orig
        g[i] = (lp - lm) / (2 * h)
    return g


def test_init_deterministic_and_bounded():
    a, b = mlp_init(AGENT_TOPOLOGY, 3), mlp_init(AGENT_TOPOLOGY, 3)
    assert a == b
    assert not np.array_equal(a.flat, mlp_init(AGENT_TOPOLOGY, 4).flat)
    for W, bias in zip(a.weights, a.biases):
        assert np.all(bias == 0)
        assert np.max(np.abs(W)) <= np.sqrt(6 / sum(W.shape))
    assert a.size == 2 * 180 + 180 + 2 * (180 * 180 + 180) + 180 * 4 + 4


def test_zero_weights_give_zero_output():
    p = MlpParams((2, 5, 5, 4))
    assert np.all(forward(p, [3.0, -1.0]) == 0)


def test_hand_computed_forward():
    p = MlpParams((2, 1, 1))
    p.weights[0][...] = [[1.0], [2.0]]
    p.biases[0][...] = [-1.0]
    p.weights[1][...] = [[3.0]]
    p.biases[1][...] = [0.5]
    # hidden = relu(1 + 2 - 1) = 2 -> 3 * 2 + 0.5
    assert forward(p, [1.0, 1.0]).tolist() == [6.5]
    # hidden pre-activation -2 is clipped -> only the output bias remains
    assert forward(p, [-1.0, 0.0]).tolist() == [0.5]
    assert forward(p, [-3.0, 0.0]).tolist() == [0.5]


def test_forward_batch_and_single_agree():
    p = mlp_init((2, 6, 6, 4), 0)
    x = np.array([[0.1, 0.2], [3.0, -4.0]])
    out = forward(p, x)
    assert out.shape == (2, 4)
    assert np.allclose(out[1], forward(p, x[1]), rtol=1e-14, atol=1e-15)


def test_forward_rejects_non_finite():
    p = mlp_init((2, 3, 4), 0)
    with pytest.raises(DomainError):
        forward(p, [np.nan, 0.0])
    with pytest.raises(DomainError):
        forward(p, [np.inf, 0.0])


def test_gradient_check_tiny_net():
    rng = np.random.default_rng(11)
    p = mlp_init((2, 3, 4), rng)
    p.biases[0][...] = rng.normal(size=3) * 0.3
    p.biases[1][...] = rng.normal(size=4) * 0.3
    for _ in range(5):
        s = rng.normal(size=(1, 2)) * 2
        a = rng.integers(4, size=1)
        y = rng.normal(size=1)
        g, _ = loss_gradient(p, s, a, y)
        gfd = fd_gradient(p, s, a, y)
        for gi, fi in zip(g, gfd):
            if abs(fi) < 1e-10 and abs(gi) < 1e-10:
                continue
            assert abs(gi - fi) / max(abs(gi), abs(fi)) < 1e-4


def test_gradient_check_batch_deep_net():
    rng = np.random.default_rng(5)
    p = mlp_init((2, 7, 6, 4), rng)
    s = rng.normal(size=(9, 2)) * 3
    a = rng.integers(4, size=9)
    y = rng.normal(size=9)
    g, lv = loss_gradient(p, s, a, y)
    assert lv == pytest.approx(loss(p, s, a, y))
    assert np.allclose(g, fd_gradient(p, s, a, y), rtol=1e-5, atol=1e-8)


def test_gradient_zero_at_fit_and_linear_in_residual():
    p = mlp_init((2, 5, 4), 1)
    s = np.array([[1.0, 2.0], [0.5, -1.0]])
    a = np.array([0, 3])
    q = forward(p, s)[np.arange(2), a]
    g0, l0 = loss_gradient(p, s, a, q)
    assert np.all(g0 == 0) and l0 == 0
    g1, _ = loss_gradient(p, s, a, q + 0.25)
    g2, _ = loss_gradient(p, s, a, q + 0.5)
    assert np.allclose(g2, 2 * g1, rtol=1e-12, atol=1e-15)


def test_gradient_only_through_selected_output():
    p = mlp_init((2, 4), 2)
    g, _ = loss_gradient(p, [[1.0, 1.0]], [2], [5.0])
    grad = MlpParams((2, 4), g)
    assert np.all(grad.weights[0][:, [0, 1, 3]] == 0)
    assert grad.biases[0][2] != 0


def test_gradient_errors():
    p = mlp_init((2, 3, 4), 0)
    with pytest.raises(IndexError):
        loss_gradient(p, [[0.0, 0.0]], [4], [1.0])
    with pytest.raises(ValueError):
        loss_gradient(p, np.zeros((0, 2)), [], [])


def test_adam_zero_gradient_keeps_params():
    p = mlp_init((2, 3, 4), 0)
    before = p.flat.copy()
    st = AdamState.for_params(p)
    adam_step(p, np.zeros(p.size), st)
    assert np.array_equal(p.flat, before)
    assert st.step == 1


def test_adam_scalar_reference():
    p = MlpParams((1, 1), np.zeros(2))
    st = AdamState.for_params(p, lr=1e-4)
    adam_step(p, np.ones(2), st)
    assert p.flat == pytest.approx([-9.999999900000002e-05] * 2, rel=1e-12)
    prev = p.flat.copy()
    adam_step(p, np.full(2, 0.5), st)
    assert (p.flat - prev) == pytest.approx([-9.32179627018389e-05] * 2, rel=1e-12)


def test_adam_shape_mismatch():
    p = mlp_init((2, 3, 4), 0)
    with pytest.raises(ValueError):
        adam_step(p, np.zeros(p.size + 1), AdamState.for_params(p))


def test_training_reduces_loss_monotonically():
    rng = np.random.default_rng(0)
    p = mlp_init((2, 8, 4), rng)
    s = rng.uniform(-1, 1, size=(32, 2))
    a = rng.integers(4, size=32)
    y = s[:, 0] - 0.5 * s[:, 1]
    st = AdamState.for_params(p, lr=1e-3)
    losses = []
    for _ in range(100):
        g, lv = loss_gradient(p, s, a, y)
        losses.append(lv)
        adam_step(p, g, st)
    assert all(b < a_ for a_, b in zip(losses, losses[1:]))


def test_copy_weights_is_deep():
    src = mlp_init((2, 4, 4), 9)
    c = copy_weights(src)
    assert c == src and copy_weights(c) == src
    x = [0.3, -0.7]
    assert np.array_equal(forward(c, x), forward(src, x))
    c.flat[0] += 1.0
    assert c != src


def test_determinism_of_pipeline():
    def run():
        p = mlp_init((2, 6, 4), 42)
        st = AdamState.for_params(p)
        for k in range(5):
            g, _ = loss_gradient(p, [[k, 1.0]], [k % 4], [1.0])
            adam_step(p, g, st)
        return p.flat.tobytes()

    assert run() == run()


def test_checkpoint_roundtrip():
    p = mlp_init((2, 5, 4), 3)
    st = AdamState.for_params(p)
    g, _ = loss_gradient(p, [[1.0, 2.0]], [1], [0.0])
    adam_step(p, g, st)
    blob = dump_params(p, st)
    assert blob[:4] == b"CRQN"
    q, st2 = load_params(blob)
    assert q == p
    assert np.array_equal(st2.m, st.m) and np.array_equal(st2.v, st.v) and st2.step == 1
    q, none = load_params(dump_params(p))
    assert q == p and none is None
    with pytest.raises(ValueError):
        load_params(blob[:-3])
    with pytest.raises(ValueError):
        load_params(b"XXXX" + blob[4:])
