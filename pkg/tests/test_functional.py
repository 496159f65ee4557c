import numpy as np
import pytest

from convmpn import functional as F
from convmpn.tensor import ShapeError, Tensor, precision

from oracles import analytic_grad, conv2d_loops, linear_loops, max_pool_loops, numeric_grad, rel_err

GRAD_INSTANCES = 20


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# -- conv2d ------------------------------------------------------------------
@pytest.mark.parametrize("stride,padding,k", [(1, 0, 2), (1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 3, 7), (2, 3, 7)])
def test_conv2d_matches_loops(stride, padding, k):
    rng = np.random.default_rng(stride * 10 + padding + k)
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    with precision(np.float64):
        out = F.conv2d(t64(x), t64(w), t64(b), stride, padding).data
    np.testing.assert_allclose(out, conv2d_loops(x, w, b, stride, padding), atol=1e-6, rtol=0)


def test_conv2d_single_image_and_tiny_case():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 3, 3))
    w = rng.normal(size=(1, 1, 2, 2))
    with precision(np.float64):
        out = F.conv2d(t64(x), t64(w), None, 1, 0).data
    assert out.shape == (1, 2, 2)
    np.testing.assert_allclose(out, conv2d_loops(x[None], w, None, 1, 0)[0], atol=1e-6)


def test_conv2d_identity_kernel_is_exact():
    x = np.random.default_rng(1).normal(size=(1, 5, 6)).astype(np.float32)
    out = F.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)), 1, 0)
    assert np.array_equal(out.data, x)


def test_conv2d_output_size_formula():
    x = Tensor(np.zeros((4, 256, 256)))
    w = Tensor(np.zeros((16, 4, 7, 7)))
    assert F.conv2d(x, w, None, 1, 3).shape == (16, 256, 256)
    assert F.conv_output_size(64, 3, 2, 1) == 32


def test_conv2d_shape_errors_name_both_shapes():
    x = Tensor(np.zeros((2, 3, 8, 8)))
    w = Tensor(np.zeros((4, 5, 3, 3)))
    with pytest.raises(ShapeError, match=r"\(2, 3, 8, 8\).*\(4, 5, 3, 3\)"):
        F.conv2d(x, w)
    with pytest.raises(ShapeError):
        F.conv2d(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.zeros((1, 3, 5, 5))))
    with pytest.raises(ValueError):
        F.conv2d(x, Tensor(np.zeros((4, 3, 3, 3))), stride=0)


def test_conv2d_shared_equals_dense_concat():
    rng = np.random.default_rng(3)
    image = rng.random((3, 12, 12))
    masks = (rng.random((5, 1, 12, 12)) > 0.7).astype(float)
    w = rng.normal(size=(4, 4, 7, 7))
    b = rng.normal(size=4)
    dense = np.concatenate([np.broadcast_to(image, (5, 3, 12, 12)), masks], axis=1)
    with precision(np.float64):
        wt, bt = t64(w, True), t64(b, True)
        shared = F.conv2d_shared(image, masks, wt, bt, 1, 3)
        shared.sum().backward()
        wt2, bt2 = t64(w, True), t64(b, True)
        full = F.conv2d(t64(dense), wt2, bt2, 1, 3)
        full.sum().backward()
    np.testing.assert_allclose(shared.data, full.data, atol=1e-10)
    np.testing.assert_allclose(wt.grad, wt2.grad, atol=1e-8)
    np.testing.assert_allclose(bt.grad, bt2.grad, atol=1e-8)


# -- linear ------------------------------------------------------------------
def test_linear_matches_loops_and_identity():
    rng = np.random.default_rng(4)
    x, w, b = rng.normal(size=(3, 7)), rng.normal(size=(5, 7)), rng.normal(size=5)
    with precision(np.float64):
        out = F.linear(t64(x), t64(w), t64(b)).data
    np.testing.assert_allclose(out, linear_loops(x, w, b), atol=1e-6)
    x32 = rng.normal(size=(2, 4)).astype(np.float32)
    assert np.array_equal(F.linear(Tensor(x32), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x32)
    assert F.linear(Tensor(np.zeros((1, 512))), Tensor(np.zeros((2, 512)))).shape == (1, 2)
    with pytest.raises(ShapeError):
        F.linear(Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 4))))


# -- pooling -----------------------------------------------------------------
def test_max_pool_matches_loops():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 8, 8))
    np.testing.assert_array_equal(F.max_pool2d(t64(x), 2).data, max_pool_loops(x, 2, 2))
    x = rng.normal(size=(2, 3, 8, 8))
    np.testing.assert_array_equal(F.max_pool2d(t64(x), 4, 2).data, max_pool_loops(x, 4, 2))


def test_max_pool_shapes_and_errors():
    assert F.max_pool2d(Tensor(np.ones((128, 64, 64))), 32, 32).shape == (128, 2, 2)
    out = F.max_pool2d(Tensor(np.full((2, 4, 4), 3.0)), 2)
    assert np.all(out.data == 3.0) and out.shape == (2, 2, 2)
    with pytest.raises(ShapeError):
        F.max_pool2d(Tensor(np.zeros((1, 6, 6))), 4)


def test_max_pool_ties_route_to_first_element():
    x = Tensor(np.ones((1, 2, 2)), requires_grad=True)
    F.max_pool2d(x, 2).sum().backward()
    np.testing.assert_array_equal(x.grad, [[[1, 0], [0, 0]]])


# -- batch norm --------------------------------------------------------------
def test_batch_norm_train_normalizes_and_updates_running_stats():
    rng = np.random.default_rng(6)
    x = rng.normal(2.0, 3.0, size=(2, 3, 4, 4))
    rm, rv = np.zeros(3), np.ones(3)
    with precision(np.float64):
        out = F.batch_norm(t64(x), t64(np.ones(3)), t64(np.zeros(3)), rm, rv, training=True).data
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-4)
    assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1) < 1e-4)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))


def test_batch_norm_eval_uses_running_stats():
    x = np.full((2, 3, 4, 4), 5.0)
    rm, rv = np.full(3, 5.0), np.ones(3)
    out = F.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, training=False)
    assert np.all(out.data == 0)
    np.testing.assert_array_equal(rm, 5.0)


def test_batch_norm_rejects_empty_and_mismatched():
    with pytest.raises(ShapeError):
        F.batch_norm(Tensor(np.zeros((0, 3, 2, 2))), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                     np.zeros(3), np.ones(3), True)
    with pytest.raises(ShapeError):
        F.batch_norm(Tensor(np.zeros((2, 3, 2, 2))), Tensor(np.ones(4)), Tensor(np.zeros(4)),
                     np.zeros(4), np.ones(4), True)


def test_batch_norm_channels_last_input_matches_contiguous():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(3, 5, 6, 6))
    xcl = np.ascontiguousarray(x.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2)
    args = (t64(np.ones(5)), t64(np.zeros(5)))
    with precision(np.float64):
        a = F.batch_norm(t64(x), *args, np.zeros(5), np.ones(5), True).data
        b = F.batch_norm(t64(xcl), *args, np.zeros(5), np.ones(5), True).data
    np.testing.assert_allclose(a, b, atol=1e-12)


# -- neighbor pooling --------------------------------------------------------
def test_neighbor_pool_modes_and_empty_lists():
    x = Tensor(np.arange(12, dtype=float).reshape(4, 3))
    nb = [[1, 2], [0], [], [0, 1, 2]]
    np.testing.assert_array_equal(F.neighbor_pool(x, nb, "max").data,
                                  [[6, 7, 8], [0, 1, 2], [0, 0, 0], [6, 7, 8]])
    np.testing.assert_array_equal(F.neighbor_pool(x, nb, "sum").data,
                                  [[9, 11, 13], [0, 1, 2], [0, 0, 0], [9, 12, 15]])
    np.testing.assert_array_equal(F.neighbor_pool(x, nb, "mean").data,
                                  [[4.5, 5.5, 6.5], [0, 1, 2], [0, 0, 0], [3, 4, 5]])


def test_neighbor_pool_permutation_and_duplicates():
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(size=(5, 2, 3, 3)))
    nb = [[1, 2, 3], [0, 4], [0], [0, 4], [1, 3]]
    base = F.neighbor_pool(x, nb, "max").data
    perm = [list(reversed(v)) for v in nb]
    assert np.array_equal(F.neighbor_pool(x, perm, "max").data, base)
    dup = [v + v for v in nb]
    assert np.array_equal(F.neighbor_pool(x, dup, "max").data, base)
    s = F.neighbor_pool(x, nb, "sum").data
    assert np.array_equal(F.neighbor_pool(x, perm, "sum").data, s)
    assert not np.allclose(F.neighbor_pool(x, dup, "sum").data, s)


# -- gradient checks ---------------------------------------------------------
def _check(build, arrays, tol=1e-3):
    num = numeric_grad(lambda *a: build(*[t64(v) for v in a]).item(), arrays)
    ana = analytic_grad(build, arrays)
    for a, n in zip(ana, num):
        assert rel_err(a, n) < tol


def _proj(shape, seed):
    return np.random.default_rng(seed).normal(size=shape)


@pytest.mark.parametrize("seed", range(GRAD_INSTANCES))
def test_conv2d_gradient(seed):
    rng = np.random.default_rng(seed)
    stride = 1 + seed % 2
    k = (1, 3, 3, 7)[seed % 4]
    pad = k // 2
    x, w, b = rng.normal(size=(2, 2, 6, 6)), rng.normal(size=(3, 2, k, k)), rng.normal(size=3)
    hout = F.conv_output_size(6, k, stride, pad)
    r = _proj((2, 3, hout, hout), seed + 100)
    _check(lambda x, w, b: F.weighted_sum(F.conv2d(x, w, b, stride, pad), r), [x, w, b])


@pytest.mark.parametrize("seed", range(GRAD_INSTANCES))
def test_conv2d_shared_gradient(seed):
    rng = np.random.default_rng(seed)
    image = rng.random((3, 6, 6))
    masks = (rng.random((3, 1, 6, 6)) > 0.5).astype(float)
    w, b = rng.normal(size=(2, 4, 3, 3)), rng.normal(size=2)
    r = _proj((3, 2, 6, 6), seed + 200)
    _check(lambda w, b: F.weighted_sum(F.conv2d_shared(image, masks, w, b, 1, 1), r), [w, b])


@pytest.mark.parametrize("seed", range(GRAD_INSTANCES))
def test_linear_gradient(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(3, 5)), rng.normal(size=(4, 5)), rng.normal(size=4)
    r = _proj((3, 4), seed + 300)
    _check(lambda x, w, b: F.weighted_sum(F.linear(x, w, b), r), [x, w, b])


@pytest.mark.parametrize("seed", range(GRAD_INSTANCES))
def test_batch_norm_gradient(seed):
    rng = np.random.default_rng(seed)
    shape = (3, 4, 3, 3) if seed % 2 else (5, 4)
    x, g, b = rng.normal(size=shape), rng.normal(size=4), rng.normal(size=4)
    r = _proj(shape, seed + 400)
    training = seed % 3 != 0

    def build(x, g, b):
        return F.weighted_sum(F.batch_norm(x, g, b, np.zeros(4), np.ones(4), training), r)

    _check(build, [x, g, b])


@pytest.mark.parametrize("seed", range(GRAD_INSTANCES))
def test_relu_pool_softmax_log_gradient(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 4, 4))
    # keep values away from relu kinks and pooling ties
    x = x + np.sign(x) * 0.1
    r = _proj((2, 3, 2, 2), seed + 500)
    _check(lambda x: F.weighted_sum(F.max_pool2d(F.relu(x), 2), r), [x])
    z = rng.normal(size=(4, 2))
    _check(lambda z: F.weighted_sum(F.log(F.softmax(z)), _proj((4, 2), seed)), [z])


@pytest.mark.parametrize("seed", range(GRAD_INSTANCES))
def test_neighbor_pool_and_concat_gradient(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 2, 3, 3))
    nb = [[1, 2], [0, 3], [], [0, 1, 2]]
    mode = ("max", "sum", "mean")[seed % 3]
    r = _proj((4, 4, 3, 3), seed + 600)
    _check(lambda x: F.weighted_sum(F.concat_channels([x, F.neighbor_pool(x, nb, mode)]), r), [x])


def test_conv_relu_pool_linear_chain_gradient():
    rng = np.random.default_rng(11)
    x, w = rng.normal(size=(1, 2, 8, 8)), rng.normal(size=(3, 2, 3, 3))
    lw = rng.normal(size=(2, 12))

    def build(x, w, lw):
        h = F.max_pool2d(F.relu(F.conv2d(x, w, None, 1, 1)), 4)
        return F.linear(h.reshape(1, 12), lw).sum()

    num = numeric_grad(lambda *a: build(*[t64(v) for v in a]).item(), [x, w, lw])
    ana = analytic_grad(build, [x, w, lw])
    for a, n in zip(ana, num):
        assert rel_err(a, n) < 1e-2
