import math

import numpy as np
import pytest

from dgan import autodiff as ad
from dgan.autodiff import Tape, Tensor, parameter
from dgan.errors import NonFiniteError, ParseError, ShapeError, TapeError
from dgan.gradcheck import check_gradients

H = 1e-5
TOL = 1e-5


def away_from_zero(rng, shape, gap=0.1):
    x = rng.uniform(-1.0, 1.0, shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap + x, x)


def weighted(out, seed=99):
    w = np.random.default_rng(seed).normal(size=out.shape)
    return ad.tsum(ad.mul(out, w))


def primitive_cases():
    """(name, params, loss closure) for every differentiable primitive."""
    rng = np.random.default_rng(0)
    P = lambda *shape: parameter(rng.normal(size=shape))
    cases = []

    a, b = P(3, 4), P(1, 4)
    cases.append(("add_broadcast", [a, b], lambda a=a, b=b: weighted(ad.add(a, b))))
    a, b = P(3, 4), P(3, 1)
    cases.append(("sub_broadcast", [a, b], lambda a=a, b=b: weighted(ad.sub(a, b))))
    a, b = P(2, 3), P(2, 3)
    cases.append(("mul", [a, b], lambda a=a, b=b: weighted(ad.mul(a, b))))
    a, b = P(3, 4), P(4, 2)
    cases.append(("matmul", [a, b], lambda a=a, b=b: weighted(ad.matmul(a, b))))
    a = P(3, 4, 2)
    cases.append(("sum_axis", [a], lambda a=a: weighted(ad.tsum(a, axis=1))))
    cases.append(("mean_axis", [a], lambda a=a: weighted(ad.mean(a, axis=-1))))
    cases.append(("reshape", [a], lambda a=a: weighted(ad.reshape(a, (6, 4)))))
    m = P(3, 5)
    cases.append(("transpose", [m], lambda m=m: weighted(ad.transpose(m))))
    cases.append(("getitem_slice", [m], lambda m=m: weighted(m[1:, ::2])))
    idx = (np.array([0, 2, 2]), np.array([1, 1, 4]))
    cases.append(("getitem_fancy_repeat", [m], lambda m=m: weighted(ad.getitem(m, idx))))
    a, b = P(2, 3), P(2, 2)
    cases.append(("concat", [a, b], lambda a=a, b=b: weighted(ad.concat([a, b], axis=-1))))
    x = parameter(away_from_zero(rng, (4, 3)))
    cases.append(("relu", [x], lambda x=x: weighted(ad.relu(x))))
    cases.append(("leaky_relu", [x], lambda x=x: weighted(ad.leaky_relu(x, 0.2))))
    cases.append(("clamp_min", [x], lambda x=x: weighted(ad.clamp_min(x, 0.0))))
    y = P(4, 3)
    cases.append(("tanh", [y], lambda y=y: weighted(ad.tanh(y))))
    cases.append(("sigmoid", [y], lambda y=y: weighted(ad.sigmoid(y))))
    cases.append(("exp", [y], lambda y=y: weighted(ad.exp(y))))
    pos = parameter(rng.uniform(0.5, 2.0, (3, 3)))
    cases.append(("log", [pos], lambda pos=pos: weighted(ad.log(pos))))
    cases.append(("sqrt", [pos], lambda pos=pos: weighted(ad.sqrt(pos))))
    s = P(3, 5)
    cases.append(("softmax", [s], lambda s=s: weighted(ad.softmax(s))))
    mask = rng.random((3, 5)) < 0.6
    mask[:, 0] = True
    cases.append(("masked_softmax", [s], lambda s=s: weighted(ad.masked_softmax(s, mask))))
    img, k = P(2, 6, 6), P(3, 2, 3, 3)
    cases.append(("conv2d_pad1", [img, k], lambda img=img, k=k: weighted(ad.conv2d(img, k, padding=1))))
    img2, k2 = P(1, 5, 5), P(2, 1, 3, 3)
    cases.append(("conv2d_stride2", [img2, k2], lambda img2=img2, k2=k2: weighted(ad.conv2d(img2, k2, stride=2))))
    fm = P(2, 7, 7)
    centers = [(0, 0), (3, 3), (6, 2), (3, 3)]
    cases.append(("gather_patches", [fm], lambda fm=fm: weighted(ad.gather_patches(fm, centers, 3))))
    x, w, bias = P(4, 3), P(3, 2), P(1, 2)
    cases.append(("linear", [x, w, bias], lambda x=x, w=w, bias=bias: weighted(ad.linear(x, w, bias))))
    u = 3
    xs, hs, cs = P(2, 4), P(2, u), P(2, u)
    wx, wh, bb = P(4, 4 * u), P(u, 4 * u), P(1, 4 * u)

    def lstm_loss(xs=xs, hs=hs, cs=cs, wx=wx, wh=wh, bb=bb):
        h, c = ad.lstm_cell(xs, hs, cs, wx, wh, bb)
        return ad.add(weighted(h, 1), weighted(c, 2))

    cases.append(("lstm_cell", [xs, hs, cs, wx, wh, bb], lstm_loss))
    return cases


@pytest.mark.parametrize("name,params,fn", primitive_cases(), ids=[c[0] for c in primitive_cases()])
def test_primitive_gradients(name, params, fn):
    errs = check_gradients(fn, params, h=H)
    assert max(errs.values()) < TOL, errs


class TestExamples:
    def test_matmul(self):
        assert np.array_equal((Tensor([[1, 0], [0, 1]]) @ Tensor([[5, 6], [7, 8]])).data, [[5, 6], [7, 8]])
        assert (Tensor([[1, 2]]) @ Tensor([[3], [4]])).data.tolist() == [[11]]

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_matmul_gradient_closed_form(self):
        a, b = parameter(np.random.default_rng(0).normal(size=(2, 3))), Tensor(np.arange(12.0).reshape(3, 4))
        with Tape() as tape:
            loss = ad.tsum(a @ b)
        tape.backward(loss)
        assert np.allclose(a.grad, np.ones((2, 4)) @ b.data.T)

    def test_elementwise(self):
        assert ad.relu(Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
        assert ad.sigmoid(Tensor(0.0)).item() == 0.5
        assert ad.tanh(Tensor(0.0)).item() == 0.0
        assert ad.leaky_relu(Tensor([-1.0])).data.tolist() == [-0.2]
        assert ad.concat([Tensor([1.0, 2.0]), Tensor([3.0, 4.0, 5.0])]).shape == (5,)

    def test_softmax(self):
        assert np.allclose(ad.softmax(Tensor([2.0, 2.0, 2.0])).data, [1 / 3] * 3, atol=1e-15)
        assert np.allclose(ad.softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-15)

    def test_softmax_contracts(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            x = rng.normal(0, 30, 7)
            y = ad.softmax(Tensor(x)).data
            assert abs(y.sum() - 1.0) <= 1e-12 and (y > 0).all()
            assert np.allclose(ad.softmax(Tensor(x + 123.4)).data, y, atol=1e-12, rtol=0)

    def test_masked_softmax_ignores_masked_values(self):
        x = np.array([[1.0, 2.0, 1e300]])
        y = ad.masked_softmax(Tensor(x), np.array([[True, True, False]])).data
        assert y[0, 2] == 0.0 and np.allclose(y[0, :2], ad.softmax(Tensor(x[:, :2])).data)

    def test_conv_identity_and_box(self):
        x = np.random.default_rng(0).random((1, 3, 3))
        assert np.array_equal(ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1)))).data, x)
        const = np.full((1, 6, 6), 2.5)
        out = ad.conv2d(Tensor(const), Tensor(np.ones((1, 1, 3, 3))), padding=1).data
        assert np.allclose(out[0, 1:-1, 1:-1], 22.5)

    def test_conv_geometry_errors(self):
        with pytest.raises(ShapeError):
            ad.conv2d(Tensor(np.zeros((1, 6, 6))), Tensor(np.zeros((1, 1, 3, 3))), stride=2)
        with pytest.raises(ShapeError):
            ad.conv2d(Tensor(np.zeros((1, 6, 6))), Tensor(np.zeros((1, 1, 2, 2))))

    def test_lstm_zero_params(self):
        z = lambda *s: Tensor(np.zeros(s))
        h, c = ad.lstm_cell(z(1, 2), z(1, 3), z(1, 3), z(2, 12), z(3, 12), z(1, 12))
        assert not h.data.any() and not c.data.any()
        h, c = ad.lstm_cell(z(1, 2), z(1, 3), Tensor(np.ones((1, 3))), z(2, 12), z(3, 12), z(1, 12))
        assert np.allclose(c.data, 0.5) and np.allclose(h.data, 0.5 * math.tanh(0.5))
        assert h.data[0, 0] == pytest.approx(0.231059, abs=1e-6)


class TestTape:
    def test_square(self):
        x = parameter(3.0)
        with Tape() as tape:
            loss = x * x
        tape.backward(loss)
        assert x.grad == 6.0

    def test_outer(self):
        w = parameter(np.zeros((2, 3)))
        x = np.array([[1.0], [2.0], [3.0]])
        with Tape() as tape:
            loss = ad.tsum(w @ x)
        tape.backward(loss)
        assert np.array_equal(w.grad, np.outer(np.ones(2), x[:, 0]))

    def test_second_backward_raises(self):
        x = parameter(2.0)
        with Tape() as tape:
            loss = x * x
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)

    def test_non_scalar(self):
        x = parameter(np.ones(3))
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ShapeError):
            tape.backward(y)

    def test_module_backward_uses_producing_tape(self):
        x = parameter(1.5)
        with Tape():
            loss = ad.exp(x)
        ad.backward(loss)
        assert x.grad == pytest.approx(math.exp(1.5))

    def test_reverse_order_and_reuse(self):
        x = parameter(2.0)
        with Tape() as tape:
            y = x * x
            loss = y * y + y
        assert tape.ops == ["mul", "mul", "add"]
        tape.backward(loss)
        assert x.grad == pytest.approx(4 * 2.0**3 + 2 * 2.0)

    def test_nan_names_op(self):
        with pytest.raises(NonFiniteError, match="log"):
            ad.log(Tensor([-1.0]))
        with pytest.raises(NonFiniteError, match="exp"):
            ad.exp(Tensor([1000.0]))

    def test_untracked_records_nothing(self):
        with Tape() as tape:
            ad.mul(Tensor(2.0), Tensor(3.0))
        assert len(tape) == 0

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(5)
            w = parameter(rng.normal(size=(4, 4)))
            with Tape() as tape:
                loss = ad.tsum(ad.tanh(w @ w))
            tape.backward(loss)
            return loss.data.tobytes() + w.grad.tobytes()

        assert run() == run()


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"b": rng.normal(size=(2, 3)), "a": rng.normal(size=(4,)), "s": np.array(3.0)}
    ad.save_tensors(tmp_path / "c.bin", tensors)
    back = ad.load_tensors(tmp_path / "c.bin")
    assert list(back) == ["a", "b", "s"]
    for k in tensors:
        assert np.array_equal(back[k], tensors[k])
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw[:8] == b"DGANTNSR" and int.from_bytes(raw[8:12], "little") == 1 and int.from_bytes(raw[12:16], "little") == 3


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"nonsense" * 4)
    with pytest.raises(ParseError):
        ad.load_tensors(tmp_path / "x.bin")
