import numpy as np
import pytest

from brickforge.autodiff import (
    Adam,
    Linear,
    Parameter,
    Tensor,
    adam_step,
    backward,
    bce_with_logits,
    clip_upper,
    concat,
    decode_tensors,
    embedding,
    encode_tensors,
    gelu,
    getitem,
    init_adam_state,
    layer_norm,
    load_tensors,
    masked_fill,
    matmul,
    mean,
    no_grad,
    nonzero_mean,
    precision,
    reshape,
    save_tensors,
    scale,
    sigmoid,
    softmax,
    threshold_keep,
    transpose,
    tsum,
)
from brickforge.autodiff.gradcheck import check_coordinates, numeric_grad, sample_indices
from brickforge.errors import FormatError, NotScalar, ShapeMismatch, VersionError


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_matmul_identity():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor(np.eye(2)))
    assert np.array_equal(out.data, [[1, 2], [3, 4]])
    with pytest.raises(ShapeMismatch):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_sigmoid_value_and_grad():
    x = leaf([0.0])
    y = sigmoid(x)
    backward(tsum(y))
    assert y.data[0] == 0.5 and x.grad[0] == 0.25


def test_layer_norm_constant_is_zero():
    x = Tensor(np.full((2, 5), 3.0))
    out = layer_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)))
    assert np.allclose(out.data, 0.0)


def test_threshold_keep_examples():
    x = leaf([0.39, 0.40, 0.7])
    y = threshold_keep(x, 0.4)
    backward(tsum(y))
    assert np.allclose(y.data, [0.0, 0.40, 0.7])
    assert np.array_equal(x.grad, [0.0, 1.0, 1.0])
    with precision(np.float64):
        arr = np.array([0.7])
        t = Tensor(arr, requires_grad=True)
        backward(tsum(threshold_keep(t, 0.4)))
        num = numeric_grad(lambda: threshold_keep(Tensor(arr), 0.4).data.sum(), arr, 0, 1e-3)
        assert abs(t.grad[0] - num) < 1e-6


def test_clip_upper_examples():
    x = leaf([0.5, 1.0, 1.3])
    y = clip_upper(x, 1.0)
    backward(tsum(y))
    assert np.allclose(y.data, [0.5, 1.0, 1.0])
    assert np.array_equal(x.grad, [1.0, 1.0, 0.0])


def test_nonzero_mean_examples():
    a, b, c = leaf([0.6]), leaf([0.8]), leaf([0.0])
    out = nonzero_mean([a, b, c])
    backward(tsum(out))
    assert np.isclose(out.data[0], 0.7)
    assert np.allclose([a.grad[0], b.grad[0], c.grad[0]], [0.5, 0.5, 0.0])
    z = leaf([0.0])
    out = nonzero_mean([z, Tensor([0.0])])
    backward(tsum(out))
    assert out.data[0] == 0 and z.grad[0] == 0
    s = leaf([0.5])
    out = nonzero_mean([s])
    backward(tsum(out))
    assert out.data[0] == 0.5 and s.grad[0] == 1.0
    with pytest.raises(ShapeMismatch):
        nonzero_mean([Tensor([1.0]), Tensor([1.0, 2.0])])


def test_backward_contracts():
    w = leaf([1.0, 2.0, 3.0])
    x = np.array([4.0, 5.0, 6.0])
    loss = tsum(w * x)
    backward(loss)
    assert np.array_equal(w.grad, x)
    backward(loss)
    assert np.array_equal(w.grad, 2 * x)
    with pytest.raises(NotScalar):
        backward(w * x)


def test_no_grad_records_nothing():
    w = leaf([1.0])
    with no_grad():
        y = w * 2.0
    assert not y.requires_grad


def test_softmax_rows_and_sigmoid_range(rng):
    s = softmax(Tensor(rng.normal(size=(4, 9)) * 10))
    assert np.allclose(s.data.sum(-1), 1.0, atol=1e-6)
    sg = sigmoid(Tensor(rng.normal(size=100) * 5)).data
    assert ((sg > 0) & (sg < 1)).all()


def test_masked_fill_and_getitem():
    x = leaf([[1.0, 2.0], [3.0, 4.0]])
    y = masked_fill(x, np.array([[True, False], [False, True]]), -5.0)
    backward(tsum(getitem(y, (slice(None), 0))))
    assert np.array_equal(y.data, [[-5, 2], [3, -5]])
    assert np.array_equal(x.grad, [[0, 0], [1, 0]])


def composite_loss(params, x, idx):
    w1, b1, g, b, table, w2 = params
    h = gelu(matmul(x, w1) + b1)
    h = layer_norm(h, g, b)
    e = embedding(table, idx)
    h = concat([h, e], axis=-1)
    att = softmax(matmul(h, transpose(h)))
    h = matmul(att, h)
    h = reshape(h, (h.shape[0] * h.shape[1],))
    h = threshold_keep(sigmoid(scale(h, 0.7)), 0.1)
    z = matmul(reshape(h, (1, h.shape[0])), w2)
    return mean(z * z) + bce_with_logits(z, np.ones(z.shape), np.full(z.shape, 0.5))


def test_composite_gradcheck_f64():
    rng = np.random.default_rng(0)
    with precision(np.float64):
        x = Tensor(rng.normal(size=(3, 4)))
        idx = np.array([0, 2, 1])
        arrays = [rng.normal(size=s) * 0.5 for s in [(4, 5), (5,), (5,), (5,), (3, 2), (21, 2)]]
        arrays[2] += 1.0
        params = [Tensor(a, requires_grad=True) for a in arrays]
        backward(composite_loss(params, x, idx))

        def f():
            return composite_loss([Tensor(q) for q in arrays], x, idx).data.sum()

        for p, a in zip(params, arrays):
            assert check_coordinates(f, a, p.grad, sample_indices(a.shape, 6, rng), 1e-6) < 1e-6


def test_composite_gradcheck_f32_against_f64_reference():
    rng = np.random.default_rng(1)
    x64 = rng.normal(size=(3, 4))
    idx = np.array([0, 2, 1])
    arrays = [rng.normal(size=s) * 0.5 for s in [(4, 5), (5,), (5,), (5,), (3, 2), (21, 2)]]
    arrays[2] += 1.0
    with precision(np.float64):
        ref = [Tensor(a, requires_grad=True) for a in arrays]
        backward(composite_loss(ref, Tensor(x64), idx))
    low = [Tensor(a.astype(np.float32), requires_grad=True) for a in arrays]
    backward(composite_loss(low, Tensor(x64.astype(np.float32)), idx))
    for r, q in zip(ref, low):
        err = np.abs(q.grad - r.grad) / np.maximum(np.abs(r.grad), 1e-3)
        assert err.max() < 1e-3


def test_adam_examples():
    p = {"w": np.array([1.0, -2.0])}
    state = init_adam_state()
    adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
    assert np.array_equal(p["w"], [1.0, -2.0])

    p = {"s": np.array([0.5])}
    state = init_adam_state()
    adam_step(p, {"s": np.array([1.0])}, state, lr=0.1)
    assert np.isclose(p["s"][0], 0.4, atol=1e-6)

    p = {"s": np.array([2.0])}
    state = init_adam_state()
    adam_step(p, {"s": np.array([0.0])}, state, lr=0.1, weight_decay=5e-4)
    assert np.isclose(p["s"][0], 2.0 * (1 - 0.1 * 5e-4))


def test_adam_module_wrapper(rng):
    lin = Linear(3, 2, rng)
    opt = Adam(lin, lr=0.05)
    x = Tensor(rng.normal(size=(8, 3)).astype(np.float32))
    first = None
    for _ in range(50):
        loss = mean(lin(x) * lin(x))
        first = first if first is not None else loss.item()
        backward(loss)
        opt.step()
        opt.zero_grad()
    assert loss.item() < first


def test_module_names_and_state(rng):
    lin = Linear(3, 2, rng)
    assert set(lin.named_parameters()) == {"w", "b"}
    state = lin.state_dict()
    lin.w.data[:] = 0
    lin.load_state_dict(state)
    assert np.array_equal(lin.w.data, state["w"])
    assert isinstance(lin.w, Parameter)


def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {"a.w": rng.normal(size=(3, 4)).astype(np.float32), "s": np.array(7.0, dtype=np.float32)}
    save_tensors(tmp_path / "c.tsba", tensors)
    back = load_tensors(tmp_path / "c.tsba")
    assert all(np.array_equal(back[k], tensors[k]) for k in tensors)
    save_tensors(tmp_path / "d.tsba", back)
    assert (tmp_path / "c.tsba").read_bytes() == (tmp_path / "d.tsba").read_bytes()


def test_checkpoint_errors():
    blob = encode_tensors({"x": np.ones((2, 2), dtype=np.float32)})
    with pytest.raises(FormatError) as exc:
        decode_tensors(blob[:-3])
    assert exc.value.offset is not None and "offset" in str(exc.value)
    with pytest.raises(FormatError):
        decode_tensors(b"XXXX" + blob[4:])
    with pytest.raises(VersionError):
        decode_tensors(blob[:4] + (9).to_bytes(4, "little") + blob[8:])
