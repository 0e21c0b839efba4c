import numpy as np
import pytest

from fgcnn import nn


# --- affine ----------------------------------------------------------------

def test_affine_identity_weights():
    x = np.random.default_rng(0).standard_normal((3, 4))
    out = nn.affine(x, np.eye(4), np.zeros(4))
    assert np.array_equal(out, x)


def test_affine_zero_input_gives_bias_rows():
    b = np.array([1.0, -2.0])
    out = nn.affine(np.zeros((5, 3)), np.zeros((3, 2)), b)
    assert np.array_equal(out, np.tile(b, (5, 1)))


def test_affine_matches_triple_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 2))
    b = rng.standard_normal(2)
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            acc = b[j]
            for m in range(4):
                acc += x[i, m] * w[m, j]
            expected[i, j] = acc
    assert np.max(np.abs(nn.affine(x, w, b) - expected)) < 1e-12


def test_affine_shape_mismatch_raises():
    with pytest.raises(ValueError):
        nn.affine(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros(2))


def test_affine_is_bilinear():
    rng = np.random.default_rng(2)
    x1, x2 = rng.standard_normal((2, 3, 4))
    w1, w2 = rng.standard_normal((2, 4, 2))
    b = np.zeros(2)
    lhs = nn.affine(2.0 * x1 + 3.0 * x2, w1, b)
    rhs = 2.0 * nn.affine(x1, w1, b) + 3.0 * nn.affine(x2, w1, b)
    assert np.allclose(lhs, rhs, atol=1e-12)
    lhs = nn.affine(x1, 2.0 * w1 + 3.0 * w2, b)
    rhs = 2.0 * nn.affine(x1, w1, b) + 3.0 * nn.affine(x1, w2, b)
    assert np.allclose(lhs, rhs, atol=1e-12)


# --- activations -------------------------------------------------------------

def test_activation_fixed_points():
    assert nn.tanh(np.array(0.0)) == 0.0
    assert nn.relu(np.array(-1.0)) == 0.0
    assert nn.sigmoid(np.array(0.0)) == 0.5


def test_sigmoid_no_underflow_at_minus_50():
    assert nn.sigmoid(np.array(-50.0)) > 0.0


def test_activation_derivatives_match_central_differences():
    rng = np.random.default_rng(3)
    xs = rng.uniform(-3, 3, size=10)
    eps = 1e-6
    for x in xs:
        num = (np.tanh(x + eps) - np.tanh(x - eps)) / (2 * eps)
        ana = nn.tanh_grad_from_output(np.tanh(x))
        assert abs(num - ana) / max(abs(num), abs(ana)) < 1e-8
        s = nn.sigmoid(np.array(x))
        num = (nn.sigmoid(np.array(x + eps)) - nn.sigmoid(np.array(x - eps))) / (2 * eps)
        assert abs(num - nn.sigmoid_grad_from_output(s)) / max(abs(num), 1e-8) < 1e-8
        if abs(x) > 1e-4:  # stay off the relu kink
            num = (nn.relu(np.array(x + eps)) - nn.relu(np.array(x - eps))) / (2 * eps)
            assert abs(num - nn.relu_grad(np.array(x))) < 1e-8


# --- batch norm --------------------------------------------------------------

def test_batchnorm_constant_column_outputs_shift():
    x = np.full((6, 3), 2.5)
    g = np.array([1.0, 2.0, 3.0])
    b = np.array([0.5, -1.0, 0.0])
    state = nn.init_bn_state(3, np.float64)
    out, _, _ = nn.batchnorm_forward(x, g, b, state, "train")
    assert np.allclose(out, np.tile(b, (6, 1)), atol=1e-6)


def test_batchnorm_normalizes_in_train_mode():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((64, 5)) * 3.0 + 1.0
    state = nn.init_bn_state(5, np.float64)
    out, _, _ = nn.batchnorm_forward(x, np.ones(5), np.zeros(5), state, "train")
    assert np.max(np.abs(out.mean(axis=0))) < 1e-10
    assert np.max(np.abs(out.var(axis=0) - 1.0)) < 1e-4


def test_batchnorm_batch_of_one_rejected_in_train_mode():
    state = nn.init_bn_state(2, np.float64)
    with pytest.raises(ValueError):
        nn.batchnorm_forward(np.zeros((1, 2)), np.ones(2), np.zeros(2), state, "train")


def test_batchnorm_running_stats_feed_infer_mode():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((32, 2)) + 4.0
    state = nn.init_bn_state(2, np.float64)
    for _ in range(800):
        _, _, state = nn.batchnorm_forward(x, np.ones(2), np.zeros(2), state, "train")
    out, _, _ = nn.batchnorm_forward(x, np.ones(2), np.zeros(2), state, "infer")
    # after convergence of the running stats, infer matches train normalization
    assert np.max(np.abs(out.mean(axis=0))) < 1e-2


def test_batchnorm_gradient_vs_finite_differences():
    from fgcnn.checks import check_batchnorm
    assert check_batchnorm(0) < 1e-4


# --- Adam --------------------------------------------------------------------

def test_adam_zero_grad_never_moves_param():
    p = np.array([1.0, -2.0, 3.0])
    state = nn.adam_init(p, lr=0.1)
    q = p.copy()
    for _ in range(50):
        q, state = nn.adam_step(q, np.zeros(3), state)
    assert np.array_equal(q, p)


def test_adam_converges_on_scalar_quadratic():
    # minimize (x - 3)^2 by running the update recursion itself
    x = np.array([0.0])
    state = nn.adam_init(x, lr=0.1)
    for _ in range(200):
        grad = 2.0 * (x - 3.0)
        x, state = nn.adam_step(x, grad, state)
    assert abs(x[0] - 3.0) < 1e-3


def test_adam_is_deterministic():
    rng = np.random.default_rng(6)
    grads = [rng.standard_normal(4) for _ in range(20)]

    def run():
        p = np.ones(4)
        st = nn.adam_init(p, lr=0.01)
        for g in grads:
            p, st = nn.adam_step(p, g, st)
        return p

    a, b = run(), run()
    assert np.array_equal(a, b)


def test_adam_is_pure():
    p = np.array([1.0, 2.0])
    g = np.array([0.5, -0.5])
    state = nn.adam_init(p, lr=0.1)
    p2, state2 = nn.adam_step(p, g, state)
    assert np.array_equal(p, [1.0, 2.0])
    assert state.t == 0 and np.all(state.m == 0)
    assert state2.t == 1
    p3, _ = nn.adam_step(p, g, state)
    assert np.array_equal(p2, p3)


# --- grad_check itself --------------------------------------------------------

def test_grad_check_linear_map_is_exact():
    rng = np.random.default_rng(7)
    c = rng.standard_normal(5)

    def f(params):
        return float(c @ params["x"]), {"x": c.copy()}

    # the derivative is constant, so a wide step leaves only rounding noise
    err = nn.grad_check(f, {"x": rng.standard_normal(5)}, eps=1e-3)
    assert err < 1e-9


def test_grad_check_kink_filter_skips_relu_corner():
    def f(params):
        x = params["x"]
        return float(nn.relu(x).sum()), {"x": nn.relu_grad(x)}

    x = np.array([1.0, -1.0, 1e-7])  # last coordinate sits on the kink
    eps = 1e-5

    def skip(name, idx, value):
        return abs(value) < 10 * eps

    err = nn.grad_check(f, {"x": x}, eps=eps, skip=skip)
    assert err < 1e-9


def test_grad_check_reports_nonfinite():
    def f(params):
        return float(params["x"].sum()), {"x": np.array([np.nan])}

    with pytest.raises(nn.NumericError):
        nn.grad_check(f, {"x": np.array([1.0])})


def test_check_finite_names_coordinate():
    arr = np.ones((2, 3))
    arr[1, 2] = np.inf
    with pytest.raises(nn.NumericError, match=r"\(1, 2\)"):
        nn.check_finite("probe", arr)
