import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradmask import tensor as T
from gradmask.errors import DomainError, DTypeError, FormatError, ShapeError
from gradmask.tensor import Tensor

from oracles import conv2d_loops, kahan_sum, matmul_loops, maxpool_scan


def test_tensor_is_immutable_and_rank_limited():
    t = Tensor([[1.0, 2.0]])
    with pytest.raises(ValueError):
        t.data[0, 0] = 5.0
    assert Tensor(3.0).shape == ()
    assert Tensor(3.0).size == 1
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 1, 1, 1, 1)))
    with pytest.raises(DTypeError):
        Tensor([1], dtype="int32")


def test_elementwise_examples():
    z = T.elementwise("mul", Tensor([1.0, 2.0, 3.0]), Tensor([0.0, 0.0, 0.0]))
    assert z.data.tolist() == [0.0, 0.0, 0.0]
    assert T.elementwise("relu", Tensor([-1.5, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert T.elementwise("sigmoid", Tensor([0.0])).data.tolist() == [0.5]
    assert T.elementwise("softplus", Tensor([0.0])).data[0] == pytest.approx(np.log(2.0))
    assert T.elementwise("sqrt_eps", Tensor([0.0])).data[0] == pytest.approx(1e-6)
    assert T.elementwise("scale", Tensor([1.0, -2.0]), 3.0).data.tolist() == [3.0, -6.0]


def test_elementwise_errors():
    with pytest.raises(ShapeError):
        T.elementwise("add", Tensor([1.0, 2.0]), Tensor([1.0]))
    with pytest.raises(DTypeError):
        T.elementwise("add", Tensor([1.0], dtype="float32"), Tensor([1.0]))


def test_kernels_stay_finite_at_extremes():
    big = Tensor([-1e4, -50.0, 0.0, 50.0, 1e4])
    for op in ("sigmoid", "softplus", "relu", "abs", "sqrt_eps"):
        v = T.elementwise(op, T.elementwise("abs", big) if op == "sqrt_eps" else big)
        assert np.isfinite(v.data).all(), op


def test_float32_kernels_keep_dtype():
    a = Tensor([1.0, -2.0], dtype="float32")
    for op in ("relu", "sigmoid", "softplus", "abs", "sqrt_eps"):
        assert T.elementwise(op, T.elementwise("abs", a)).dtype == np.float32
    assert T.elementwise("scale", a, 0.1).dtype == np.float32


def test_matmul_examples():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert T.matmul(eye, m) == m
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_matches_triple_loop():
    rs = np.random.default_rng(5)
    a, b = rs.normal(size=(5, 4)), rs.normal(size=(4, 3))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, matmul_loops(a, b), rtol=0, atol=1e-14)


def test_conv2d_examples():
    x = Tensor(np.arange(9.0).reshape(1, 3, 3))
    ident = T.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor([0.0]))
    assert ident == x
    const = T.conv2d(x, Tensor(np.zeros((2, 1, 3, 3))), Tensor([1.5, -2.0]), pad=1)
    assert np.all(const.data[0] == 1.5) and np.all(const.data[1] == -2.0)


def test_conv2d_matches_nested_loops():
    rs = np.random.default_rng(11)
    x, w, b = rs.normal(size=(2, 8, 8)), rs.normal(size=(3, 2, 3, 3)), rs.normal(size=3)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, pad=1).data
    assert np.max(np.abs(got - conv2d_loops(x, w, b, 1, 1))) < 1e-12


def test_conv2d_shape_errors():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 6, 6))), Tensor(np.ones((1, 1, 3, 3))), stride=2)  # (6-3)/2 not integral
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 6, 6))), Tensor(np.ones((1, 1, 2, 2))))
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((2, 6, 6))), Tensor(np.ones((1, 1, 3, 3))))


@st.composite
def conv_case(draw):
    c = draw(st.integers(1, 3))
    f = draw(st.integers(1, 3))
    k = draw(st.sampled_from([1, 3, 5]))
    stride = draw(st.integers(1, 2))
    pad = draw(st.integers(0, 2))
    h = draw(st.integers(k, 7))
    w = draw(st.integers(k, 7))
    # choose extents that make the output extent integral
    h += (h + 2 * pad - k) % stride
    w += (w + 2 * pad - k) % stride
    seed = draw(st.integers(0, 2**32 - 1))
    return c, f, k, stride, pad, h, w, seed


@settings(max_examples=100, deadline=None)
@given(conv_case())
def test_conv2d_property_vs_oracle(case):
    c, f, k, stride, pad, h, w, seed = case
    rs = np.random.default_rng(seed)
    x, wt, b = rs.normal(size=(c, h, w)), rs.normal(size=(f, c, k, k)), rs.normal(size=f)
    got = T.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride, pad).data
    assert np.max(np.abs(got - conv2d_loops(x, wt, b, stride, pad))) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_matmul_property_vs_oracle(m, k, n, seed):
    rs = np.random.default_rng(seed)
    a, b = rs.normal(size=(m, k)), rs.normal(size=(k, n))
    assert np.max(np.abs(T.matmul(Tensor(a), Tensor(b)).data - matmul_loops(a, b))) < 1e-12


def test_conv_adjoints_satisfy_inner_product_identity():
    # <g, conv(x, w)> == <conv_input_grad(g, w), x> == <conv_weight_grad(x, g), w>
    rs = np.random.default_rng(3)
    for stride, pad in [(1, 1), (2, 0), (2, 1), (1, 0)]:
        x, w = rs.normal(size=(2, 7, 7)), rs.normal(size=(3, 2, 3, 3))
        y = T.conv2d(Tensor(x), Tensor(w), None, stride, pad)
        g = rs.normal(size=y.shape)
        lhs = np.sum(g * y.data)
        gx = T.conv2d_input_grad(Tensor(g), Tensor(w), x.shape, stride, pad).data
        gw = T.conv2d_weight_grad(Tensor(x), Tensor(g), w.shape, stride, pad).data
        assert np.sum(gx * x) == pytest.approx(lhs, rel=1e-12)
        assert np.sum(gw * w) == pytest.approx(lhs, rel=1e-12)


def test_maxpool_examples():
    vals, idx = T.maxpool2d(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), 2, 2)
    assert vals.data.tolist() == [[[4.0]]]
    assert idx.tolist() == [[[3]]]
    vals, idx = T.maxpool2d(Tensor(np.full((1, 4, 4), 7.0)), 2, 2)
    assert idx.tolist() == [[[0, 2], [8, 10]]]
    with pytest.raises(ShapeError):
        T.maxpool2d(Tensor(np.ones((1, 2, 2))), 3, 1)


def test_maxpool_matches_window_scan():
    x = np.random.default_rng(2).normal(size=(1, 6, 6))
    vals, idx = T.maxpool2d(Tensor(x), 2, 2)
    ref_vals, ref_idx = maxpool_scan(x, 2, 2)
    assert np.array_equal(vals.data, ref_vals)
    assert np.array_equal(idx, ref_idx)
    assert np.array_equal(vals.data, x.reshape(-1)[idx])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 3), st.integers(2, 7), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_maxpool_property(c, n, k, stride, seed):
    k = min(k, n)
    # coarse values force plenty of ties
    x = np.random.default_rng(seed).integers(0, 3, size=(c, n, n)).astype(np.float64)
    vals, idx = T.maxpool2d(Tensor(x), k, stride)
    ref_vals, ref_idx = maxpool_scan(x, k, stride)
    assert np.array_equal(vals.data, ref_vals)
    assert np.array_equal(idx, ref_idx)
    assert np.array_equal(vals.data, x.reshape(-1)[idx])


def test_reduce():
    assert T.reduce("sum", Tensor([1.0, 2.0, 3.0])).item() == 6.0
    assert T.reduce("sum", Tensor([1.0, 2.0, 3.0])).shape == ()
    with pytest.raises(DomainError):
        T.reduce("mean", Tensor(np.zeros(0)))
    v = np.random.default_rng(9).random(100).astype(np.float32)
    got = T.reduce("sum", Tensor(v)).item()
    ref = kahan_sum(v)
    assert abs(got - ref) / abs(ref) < 1e-6


def test_kernels_are_deterministic():
    rs = np.random.default_rng(4)
    x, w = Tensor(rs.normal(size=(2, 9, 9))), Tensor(rs.normal(size=(4, 2, 3, 3)))
    a = T.conv2d(x, w, None, 1, 1)
    b = T.conv2d(x, w, None, 1, 1)
    assert a.data.tobytes() == b.data.tobytes()


@pytest.mark.parametrize("dtype", ["float32", "float64"])
@pytest.mark.parametrize("shape", [(), (3,), (2, 3), (1, 4, 5), (2, 1, 3, 3)])
def test_gmt1_round_trip(dtype, shape, tmp_path):
    rs = np.random.default_rng(0)
    t = Tensor(rs.normal(size=shape), dtype=dtype)
    buf = T.encode_tensor(t)
    back, end = T.decode_tensor(buf)
    assert end == len(buf)
    assert back == t
    assert T.encode_tensor(back) == buf
    T.save_tensor(tmp_path / "t.gmt", t)
    assert (tmp_path / "t.gmt").read_bytes() == buf


def test_gmt1_layout():
    buf = T.encode_tensor(Tensor([[1.0, 2.0]], dtype="float32"))
    assert buf[:4] == b"GMT1"
    assert buf[4] == 0 and buf[5] == 2
    assert buf[6:14] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert np.frombuffer(buf[14:], dtype="<f4").tolist() == [1.0, 2.0]


def test_gmt1_corruption_is_detected():
    buf = T.encode_tensor(Tensor([1.0, 2.0]))
    with pytest.raises(FormatError):
        T.decode_tensor(b"XMT1" + buf[4:])
    with pytest.raises(FormatError):
        T.decode_tensor(buf[:-3])
    with pytest.raises(FormatError):
        T.decode_tensor(buf[:4] + bytes([7]) + buf[5:])


def test_write_tensors_concatenates():
    stream = io.BytesIO()
    ts = [Tensor([1.0]), Tensor(np.ones((2, 2)), dtype="float32")]
    T.write_tensors(stream, ts)
    buf = stream.getvalue()
    a, pos = T.decode_tensor(buf)
    b, pos = T.decode_tensor(buf, pos)
    assert pos == len(buf) and a == ts[0] and b == ts[1]
