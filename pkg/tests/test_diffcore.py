"""Autodiff core: per-op finite-difference oracle, backward properties,
optimizers and checkpoint round-trips."""

import numpy as np
import pytest

from advcomm import diffcore as dc


def _tree(**arrays):
    return dc.ParamTree({k: dc.Tensor(v) for k, v in arrays.items()})


def _fd_check(params, loss_fn, tol=1e-4, **kw):
    rep = dc.grad_check(params, loss_fn, tol=tol, **kw)
    assert rep.passed, rep.summary()
    return rep


# ---------------------------------------------------------------------------
# forward examples


def test_sigmoid_at_zero():
    assert dc.sigmoid(dc.Tensor([0.0])).data[0] == pytest.approx(0.5)


def test_softmax_symmetry():
    out = dc.softmax(dc.Tensor([1.7, 1.7, 1.7])).data
    np.testing.assert_allclose(out, np.full(3, 1 / 3), rtol=1e-6)


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 5, 5)).astype(np.float32)
    w = np.zeros((3, 3, 1, 1), dtype=np.float32)
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    out = dc.conv2d(dc.Tensor(x), dc.Tensor(w), dc.Tensor(np.zeros(3, np.float32)))
    np.testing.assert_array_equal(out.data, x)


def test_forward_deterministic_bitwise():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 2, 8, 8)).astype(np.float32)
    w = rng.normal(size=(6, 2, 3, 3)).astype(np.float32)

    def run():
        h = dc.leaky_relu(dc.conv2d(dc.Tensor(x), dc.Tensor(w), padding=1))
        return dc.reduce_mean(dc.avgpool2x(h)).data.copy()

    assert np.array_equal(run(), run())


# ---------------------------------------------------------------------------
# backward basics


def test_backward_square():
    x = dc.Tensor([3.0])
    tree = dc.ParamTree({"x": x})
    with dc.ComputationRecord() as rec:
        loss = dc.reduce_sum(dc.mul(x, x))
    g = dc.backward(rec, loss, tree)
    np.testing.assert_allclose(g["x"].data, [6.0])


def test_backward_mse_scalar():
    w = dc.Tensor([2.0])
    tree = dc.ParamTree({"w": w})
    with dc.ComputationRecord() as rec:
        pred = dc.mul(w, np.ones(1, np.float32))
        loss = dc.mse(pred, np.zeros(1, np.float32))
    g = dc.backward(rec, loss, tree)
    np.testing.assert_allclose(g["w"].data, [4.0])


def test_backward_rejects_nonscalar_loss():
    x = dc.Tensor([1.0, 2.0])
    with dc.ComputationRecord() as rec:
        y = dc.mul(x, x)
    with pytest.raises(dc.ShapeError):
        dc.backward(rec, y, dc.ParamTree({"x": x}))


def test_unused_parameter_gets_exact_zero():
    used = dc.Tensor([1.5])
    unused = dc.Tensor(np.ones((3, 3), np.float32))
    tree = dc.ParamTree({"used": used, "unused": unused})
    with dc.ComputationRecord() as rec:
        loss = dc.reduce_sum(dc.mul(used, used))
    g = dc.backward(rec, loss, tree)
    assert np.all(g["unused"].data == 0.0)

    def loss_fn(p):
        return dc.reduce_sum(dc.mul(p["used"], p["used"]))

    rep = dc.grad_check(tree, loss_fn)
    assert rep.passed
    entry = {e.path: e for e in rep.entries}["unused"]
    assert entry.max_rel_err == 0.0


def test_backward_is_linear_in_loss():
    rng = np.random.default_rng(11)
    w = dc.Tensor(rng.normal(size=(4, 3)).astype(np.float32))
    x = rng.normal(size=(5, 4)).astype(np.float32)
    tree = dc.ParamTree({"w": w})
    a, b = 2.5, -1.25

    def grads_of(fn):
        with dc.ComputationRecord() as rec:
            loss = fn()
        return dc.backward(rec, loss, tree)["w"].data

    l1 = lambda: dc.reduce_sum(dc.dense(x, w))
    l2 = lambda: dc.reduce_mean(dc.sigmoid(dc.dense(x, w)))
    combo = lambda: dc.add(dc.scale(l1(), a), dc.scale(l2(), b))
    np.testing.assert_allclose(grads_of(combo), a * grads_of(l1) + b * grads_of(l2),
                               rtol=1e-5, atol=1e-6)


# ---------------------------------------------------------------------------
# per-op finite-difference oracle (random inputs, shapes <= 4x8x8x8)


_OP_CASES = {
    "dense": lambda p: dc.reduce_sum(dc.sigmoid(dc.dense(p["x2"], p["w_fc"], p["b_fc"]))),
    "conv2d": lambda p: dc.reduce_sum(dc.conv2d(p["x4"], p["w_cv"], p["b_cv"], padding=1)),
    "conv2d_nopad": lambda p: dc.reduce_sum(dc.conv2d(p["x4"], p["w_cv"], p["b_cv"])),
    "leaky_relu": lambda p: dc.reduce_sum(dc.leaky_relu(p["x2"])),
    "relu": lambda p: dc.reduce_sum(dc.relu(p["x2"])),
    "sigmoid": lambda p: dc.reduce_sum(dc.sigmoid(p["x2"])),
    "softmax": lambda p: dc.reduce_sum(dc.mul(dc.softmax(p["x2"]), p["w_like_x2"])),
    "log_softmax": lambda p: dc.reduce_sum(dc.mul(dc.log_softmax(p["x2"]), p["w_like_x2"])),
    "add": lambda p: dc.reduce_sum(dc.sigmoid(dc.add(p["x2"], p["w_like_x2"]))),
    "add_broadcast": lambda p: dc.reduce_sum(dc.sigmoid(dc.add(p["x2"], p["row"]))),
    "sub": lambda p: dc.reduce_sum(dc.sigmoid(dc.sub(p["x2"], p["w_like_x2"]))),
    "mul": lambda p: dc.reduce_sum(dc.mul(p["x2"], p["w_like_x2"])),
    "scale": lambda p: dc.reduce_sum(dc.scale(p["x2"], -1.7)),
    "matmul": lambda p: dc.reduce_sum(dc.matmul(p["x2"], p["w_fc"])),
    "matmul_batched": lambda p: dc.reduce_sum(dc.matmul(p["x3"], p["w_sq"])),
    "concat": lambda p: dc.reduce_sum(dc.sigmoid(dc.concat([p["x2"], p["w_like_x2"]], axis=1))),
    "mean": lambda p: dc.reduce_mean(p["x4"]),
    "mean_axis": lambda p: dc.reduce_sum(dc.sigmoid(dc.reduce_mean(p["x3"], axis=1))),
    "sum_axis": lambda p: dc.reduce_sum(dc.sigmoid(dc.reduce_sum(p["x3"], axis=0))),
    "upsample2x": lambda p: dc.reduce_sum(dc.mul(dc.upsample2x(p["x4"]), 1.5)),
    "avgpool2x": lambda p: dc.reduce_sum(dc.sigmoid(dc.avgpool2x(p["x4"]))),
    "mse": lambda p: dc.mse(p["x2"], np.full((3, 5), 0.25, np.float32)),
    "bce_with_mask": lambda p: dc.bce_with_mask(
        dc.sigmoid(p["x2"]),
        (np.arange(15).reshape(3, 5) % 2).astype(np.float32),
        np.array([[1, 1, 0, 1, 1]] * 3, np.float32)),
    "exp": lambda p: dc.reduce_sum(dc.exp(dc.scale(p["x2"], 0.3))),
    "log": lambda p: dc.reduce_sum(dc.log(dc.add(dc.sigmoid(p["x2"]), 0.5))),
    "minimum": lambda p: dc.reduce_sum(dc.minimum(p["x2"], p["w_like_x2"])),
    "clip": lambda p: dc.reduce_sum(dc.clip(p["x2"], -0.4, 0.4)),
    "take": lambda p: dc.reduce_sum(dc.sigmoid(dc.take(p["x2"], [2, 0, 0, 1], axis=0))),
    "gather_last": lambda p: dc.reduce_sum(dc.gather_last(p["x2"], np.array([0, 4, 2]))),
    "reshape": lambda p: dc.reduce_sum(dc.sigmoid(dc.reshape(p["x2"], (5, 3)))),
}


@pytest.mark.parametrize("op", sorted(_OP_CASES))
def test_op_gradients_match_finite_differences(op):
    rng = np.random.default_rng(hash(op) % 2**32)
    params = _tree(
        x2=rng.normal(size=(3, 5)).astype(np.float32),
        x3=rng.normal(size=(2, 4, 4)).astype(np.float32),
        x4=rng.normal(size=(2, 3, 6, 6)).astype(np.float32),
        w_fc=rng.normal(size=(5, 4)).astype(np.float32),
        b_fc=rng.normal(size=(4,)).astype(np.float32),
        w_sq=rng.normal(size=(4, 4)).astype(np.float32),
        w_cv=rng.normal(size=(4, 3, 3, 3)).astype(np.float32),
        b_cv=rng.normal(size=(4,)).astype(np.float32),
        w_like_x2=rng.normal(size=(3, 5)).astype(np.float32),
        row=rng.normal(size=(5,)).astype(np.float32),
    )
    _fd_check(params, _OP_CASES[op])


def test_two_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(42)
    params = _tree(
        w0=(rng.normal(size=(6, 16)) * 0.4).astype(np.float32),
        b0=np.zeros(16, np.float32),
        w1=(rng.normal(size=(16, 1)) * 0.4).astype(np.float32),
        b1=np.zeros(1, np.float32),
    )
    x = rng.normal(size=(8, 6)).astype(np.float32)
    y = rng.normal(size=(8, 1)).astype(np.float32)

    def loss_fn(p):
        h = dc.leaky_relu(dc.dense(x, p["w0"], p["b0"]))
        return dc.mse(dc.dense(h, p["w1"], p["b1"]), y)

    rep = _fd_check(params, loss_fn)
    assert rep.max_rel_err < 1e-4


def test_linear_model_rel_err_near_zero():
    rng = np.random.default_rng(7)
    params = _tree(w=rng.normal(size=(3, 2)).astype(np.float32))
    x = rng.normal(size=(4, 3)).astype(np.float32)

    def loss_fn(p):
        return dc.reduce_sum(dc.dense(x, p["w"]))

    rep = dc.grad_check(params, loss_fn)
    assert rep.max_rel_err < 1e-9


# ---------------------------------------------------------------------------
# shape diagnostics


def test_shape_errors_name_the_op():
    with pytest.raises(dc.ShapeError, match="dense"):
        dc.dense(dc.Tensor(np.zeros((2, 3))), dc.Tensor(np.zeros((4, 5))))
    with pytest.raises(dc.ShapeError, match="conv2d"):
        dc.conv2d(dc.Tensor(np.zeros((1, 2, 4, 4))), dc.Tensor(np.zeros((3, 5, 3, 3))))
    with pytest.raises(dc.ShapeError, match="matmul"):
        dc.matmul(dc.Tensor(np.zeros((2, 3))), dc.Tensor(np.zeros((4, 5))))
    with pytest.raises(dc.ShapeError, match="mse"):
        dc.mse(dc.Tensor(np.zeros(3)), np.zeros(4, np.float32))


# ---------------------------------------------------------------------------
# optimizers


def test_sgd_ascends():
    params = _tree(w=np.zeros(1, np.float32))
    grads = _tree(w=np.ones(1, np.float32))
    out = dc.Sgd(lr=0.1).step(params, grads)
    np.testing.assert_allclose(out["w"].data, [0.1])


def test_zero_gradient_leaves_params_unchanged():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(4, 4)).astype(np.float32)
    params = _tree(w=w)
    grads = _tree(w=np.zeros_like(w))
    for opt in (dc.Sgd(0.3), dc.Adam(0.3)):
        out = opt.step(params, grads)
        np.testing.assert_array_equal(out["w"].data, w)


def test_adam_matches_hand_computed_trace():
    # constant gradient, three steps; recurrences replayed in float64
    g = 0.75
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    params = _tree(w=np.array([0.0], np.float32))
    grads = _tree(w=np.array([g], np.float32))
    opt = dc.Adam(lr, b1, b2, eps)

    w_ref, m, v = 0.0, 0.0, 0.0
    for t in range(1, 4):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w_ref += lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        params = opt.step(params, grads)
        np.testing.assert_allclose(params["w"].data, [w_ref], rtol=1e-6)


def test_optimizer_rejects_structure_mismatch():
    params = _tree(w=np.zeros(2, np.float32))
    with pytest.raises(ValueError):
        dc.Sgd(0.1).step(params, _tree(other=np.zeros(2, np.float32)))
    with pytest.raises(ValueError):
        dc.Sgd(0.1).step(params, _tree(w=np.zeros(3, np.float32)))


def test_untouched_params_carried_by_reference():
    params = _tree(a=np.ones(2, np.float32), b=np.ones(2, np.float32))
    out = dc.Adam(0.1).step(params, _tree(a=np.ones(2, np.float32)))
    assert out["b"] is params["b"]


def test_clip_by_global_norm():
    grads = _tree(a=np.array([3.0], np.float32), b=np.array([4.0], np.float32))
    clipped, norm = dc.clip_by_global_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    total = np.sqrt(sum(float(np.sum(t.data ** 2)) for _, t in clipped.items()))
    assert total == pytest.approx(1.0, rel=1e-6)
    # already small: untouched
    same, norm2 = dc.clip_by_global_norm(grads, 10.0)
    assert same is grads and norm2 == pytest.approx(5.0)


# ---------------------------------------------------------------------------
# masked BCE edge cases


def test_bce_all_off_mask_is_exact_zero():
    p = dc.Tensor(np.full((4, 4), 0.7, np.float32))
    tree = dc.ParamTree({"p": p})
    with dc.ComputationRecord() as rec:
        loss = dc.bce_with_mask(p, np.ones((4, 4), np.float32), np.zeros((4, 4), np.float32))
    assert loss.item() == 0.0
    g = dc.backward(rec, loss, tree)
    assert np.all(g["p"].data == 0.0)


# ---------------------------------------------------------------------------
# checkpoint file format


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    tree = _tree(
        **{"actor.gnn.tap.k2": rng.normal(size=(3, 4)).astype(np.float32),
           "actor.enc.fc.w": rng.normal(size=(5,)).astype(np.float32),
           "z.scalar": np.array(2.5, np.float32)})
    path = tmp_path / "ckpt.advc"
    dc.save_param_tree(tree, str(path))
    loaded = dc.load_param_tree(str(path))
    assert loaded.paths() == tree.paths()
    for p, t in tree.items():
        np.testing.assert_array_equal(loaded[p].data, t.data)
        assert loaded[p].data.dtype == np.float32


def test_checkpoint_header_layout(tmp_path):
    tree = _tree(w=np.arange(6, dtype=np.float32).reshape(2, 3))
    path = tmp_path / "c.advc"
    dc.save_param_tree(tree, str(path))
    raw = path.read_bytes()
    assert raw[:4] == b"ADVC"
    assert int.from_bytes(raw[4:8], "little") == 1      # version
    assert int.from_bytes(raw[8:12], "little") == 1     # entry count
    assert int.from_bytes(raw[12:16], "little") == 1    # path length
    assert raw[16:17] == b"w"
    assert int.from_bytes(raw[17:21], "little") == 2    # rank
    assert int.from_bytes(raw[21:25], "little") == 2    # dim 0
    assert int.from_bytes(raw[25:29], "little") == 3    # dim 1
    np.testing.assert_array_equal(np.frombuffer(raw[29:], "<f4"), np.arange(6, dtype=np.float32))


def test_checkpoint_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.advc"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        dc.load_param_tree(str(path))
