import numpy as np
import pytest

from fluidrpm import autodiff as ad
from fluidrpm.autodiff import ShapeError, Tape, Tensor, UsageError


def param(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def naive_conv(x, k, b, padding):
    """Direct nested-loop cross-correlation over NHWC input."""
    n, h, w, c = x.shape
    kh, kw, _, co = k.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    out = np.zeros((n, ho, wo, co))
    for i in range(n):
        for r in range(ho):
            for s in range(wo):
                for o in range(co):
                    out[i, r, s, o] = b[o] + sum(
                        xp[i, r + u, s + v, ci] * k[u, v, ci, o] for u in range(kh) for v in range(kw) for ci in range(c)
                    )
    return out


def naive_pool(x, win, stride):
    n, h, w, c = x.shape
    ho, wo = (h - win) // stride + 1, (w - win) // stride + 1
    out = np.empty((n, ho, wo, c))
    for i in range(n):
        for r in range(ho):
            for s in range(wo):
                for ch in range(c):
                    out[i, r, s, ch] = x[i, r * stride : r * stride + win, s * stride : s * stride + win, ch].max()
    return out


def numeric_grad(f, arr, h=1e-6):
    g = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        orig = arr[idx]
        arr[idx] = orig + h
        up = f()
        arr[idx] = orig - h
        down = f()
        arr[idx] = orig
        g[idx] = (up - down) / (2 * h)
    return g


class TestElementwise:
    def test_tanh_at_zero(self):
        x = param([0.0])
        with Tape() as tape:
            y = ad.tanh(x)
            loss = ad.sum(y)
        tape.backward(loss)
        assert y.data[0] == 0 and x.grad[0] == 1

    def test_relu_negative(self):
        x = param([-2.0])
        with Tape() as tape:
            y = ad.relu(x)
            loss = ad.sum(y)
        tape.backward(loss)
        assert y.data[0] == 0 and x.grad[0] == 0

    def test_square_derivative(self):
        x = param([3.0])
        with Tape() as tape:
            y = ad.sum(ad.square(x))
        tape.backward(y)
        assert x.grad[0] == 6

    def test_abs_kink_subgradient_zero(self):
        x = param([0.0, -2.0, 3.0])
        with Tape() as tape:
            y = ad.sum(ad.abs(x))
        tape.backward(y)
        assert x.grad.tolist() == [0.0, -1.0, 1.0]

    def test_broadcast_grads(self):
        a = param(np.ones((3, 4)))
        b = param(np.arange(4.0))
        with Tape() as tape:
            y = ad.sum(ad.mul(ad.add(a, b), 2.0))
        tape.backward(y)
        assert np.all(a.grad == 2) and np.all(b.grad == 6)

    def test_reduce_max_first_argmax(self):
        x = param([1.0, 5.0, 5.0, 2.0])
        with Tape() as tape:
            y = ad.reduce_max(x)
        tape.backward(y)
        assert y.item() == 5 and x.grad.tolist() == [0, 1, 0, 0]

    def test_mean_and_take(self):
        x = param(np.arange(6.0))
        with Tape() as tape:
            y = ad.mean(x[1:4])
        tape.backward(y)
        assert y.item() == pytest.approx(2.0)
        assert np.allclose(x.grad, [0, 1 / 3, 1 / 3, 1 / 3, 0, 0])


class TestTape:
    def test_sum_of_params(self):
        ps = [param(np.random.default_rng(i).normal(size=(2, 3))) for i in range(3)]
        with Tape() as tape:
            total = ad.add(ad.add(ad.sum(ps[0]), ad.sum(ps[1])), ad.sum(ps[2]))
        tape.backward(total)
        assert all(np.all(p.grad == 1) for p in ps)

    def test_accumulation_doubles(self):
        x = param([0.3, -1.2])
        with Tape() as tape:
            y = ad.sum(ad.tanh(ad.mul(x, x)))
        tape.backward(y)
        once = x.grad.copy()
        tape.backward(y)
        assert np.array_equal(x.grad, 2 * once)

    def test_zero_grad(self):
        x = param([1.0])
        with Tape() as tape:
            y = ad.sum(ad.square(x))
        tape.backward(y)
        x.zero_grad()
        assert x.grad is None

    def test_non_scalar_needs_seed(self):
        x = param([1.0, 2.0])
        with Tape() as tape:
            y = ad.square(x)
        with pytest.raises(UsageError):
            tape.backward(y)
        tape.backward(y, seed=np.ones(2))
        assert x.grad.tolist() == [2.0, 4.0]

    def test_unrecorded_loss_rejected(self):
        x = param([1.0])
        with Tape() as tape:
            y = ad.square(x)
        with pytest.raises(UsageError):
            tape.backward(ad.sum(y))

    def test_no_recording_outside_tape(self):
        x = param([1.0])
        y = ad.square(x)
        with pytest.raises(UsageError):
            ad.backward(y)

    def test_weighted_backward_matches_separate_passes(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(3, 6, 6, 1)))
        k = param(rng.normal(size=(3, 3, 1, 2)))
        b = param(rng.normal(size=2))
        w = param(rng.normal(size=(18, 1)))
        c = param(rng.normal(size=1))
        with Tape() as tape:
            h = ad.maxpool2d(ad.relu(ad.conv2d(x, k, b, padding=1)), 2)
            z = ad.reshape(ad.dense(ad.reshape(h, (3, -1)), w, c), (3,))
        seeds = rng.normal(size=(4, 3))
        tape.backward(z, sample_weights=seeds)
        weighted = {name: t.grad.copy() for name, t in dict(k=k, b=b, w=w, c=c).items()}
        for row in range(4):
            for t in (k, b, w, c):
                t.zero_grad()
            tape.backward(z, seed=seeds[row])
            for name, t in dict(k=k, b=b, w=w, c=c).items():
                assert np.allclose(weighted[name][row], t.grad, rtol=1e-12, atol=1e-12)


class TestConv:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(2, 5, 5, 1))
        out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        assert np.array_equal(out.data, x)

    def test_zero_kernel_gives_bias(self):
        x = np.random.default_rng(0).normal(size=(1, 4, 4, 2))
        out = ad.conv2d(Tensor(x), Tensor(np.zeros((3, 3, 2, 3))), Tensor(np.array([1.0, -2.0, 0.5])), padding=1)
        assert np.all(out.data == np.array([1.0, -2.0, 0.5]))

    @pytest.mark.parametrize("padding,cin,cout", [(0, 1, 1), (1, 2, 3)])
    def test_matches_naive(self, padding, cin, cout):
        rng = np.random.default_rng(padding)
        x = rng.normal(size=(2, 6, 6, cin))
        k = rng.normal(size=(3, 3, cin, cout))
        b = rng.normal(size=cout)
        out = ad.conv2d(Tensor(x), Tensor(k), Tensor(b), padding=padding)
        assert np.allclose(out.data, naive_conv(x, k, b, padding), atol=1e-6)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(5)
        x, k, b = param(rng.normal(size=(2, 5, 5, 2))), param(rng.normal(size=(3, 3, 2, 3))), param(rng.normal(size=3))
        r = rng.normal(size=(2, 5, 5, 3))

        def f():
            return float((ad.conv2d(x, k, b, padding=1).data * r).sum())

        with Tape() as tape:
            y = ad.sum(ad.mul(ad.conv2d(x, k, b, padding=1), r))
        tape.backward(y)
        for t in (x, k, b):
            assert np.allclose(t.grad, numeric_grad(f, t.data), atol=1e-6)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            ad.conv2d(Tensor(np.zeros((1, 4, 4, 2))), Tensor(np.zeros((3, 3, 1, 1))), Tensor(np.zeros(1)))
        with pytest.raises(ShapeError):
            ad.conv2d(Tensor(np.zeros((4, 4))), Tensor(np.zeros((3, 3, 1, 1))), Tensor(np.zeros(1)))


class TestMaxPool:
    def test_two_by_two(self):
        out = ad.maxpool2d(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)), 2)
        assert out.data.item() == 4

    def test_constant_input_first_element_gets_gradient(self):
        x = param(np.ones((1, 4, 4, 1)))
        with Tape() as tape:
            y = ad.sum(ad.maxpool2d(x, 2))
        tape.backward(y)
        expected = np.zeros((4, 4))
        expected[::2, ::2] = 1
        assert np.array_equal(x.grad[0, :, :, 0], expected)

    @pytest.mark.parametrize("shape,win,stride", [((2, 8, 8, 3), 2, 2), ((1, 7, 9, 2), 2, 2), ((1, 7, 7, 1), 3, 2)])
    def test_matches_naive(self, shape, win, stride):
        x = np.random.default_rng(1).normal(size=shape)
        assert np.array_equal(ad.maxpool2d(Tensor(x), win, stride).data, naive_pool(x, win, stride))

    def test_gradient_routes_to_max(self):
        x = param(np.random.default_rng(2).normal(size=(1, 6, 6, 2)))
        with Tape() as tape:
            y = ad.sum(ad.maxpool2d(x, 2))
        tape.backward(y)
        assert np.allclose(x.grad, numeric_grad(lambda: float(ad.maxpool2d(x, 2).data.sum()), x.data), atol=1e-6)


class TestDense:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        assert np.array_equal(ad.dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)

    def test_zero_weights(self):
        out = ad.dense(Tensor(np.ones((2, 3))), Tensor(np.zeros((3, 2))), Tensor(np.array([0.5, -1.0])))
        assert np.array_equal(out.data, [[0.5, -1.0], [0.5, -1.0]])

    def test_matches_dot_products(self):
        rng = np.random.default_rng(4)
        x, w, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3)), rng.normal(size=3)
        expected = np.array([[sum(x[i, k] * w[k, j] for k in range(7)) + b[j] for j in range(3)] for i in range(5)])
        assert np.allclose(ad.dense(Tensor(x), Tensor(w), Tensor(b)).data, expected, atol=1e-6)

    def test_gradients(self):
        rng = np.random.default_rng(6)
        x, w, b = param(rng.normal(size=(4, 3))), param(rng.normal(size=(3, 2))), param(rng.normal(size=2))
        with Tape() as tape:
            y = ad.sum(ad.tanh(ad.dense(x, w, b)))
        tape.backward(y)
        f = lambda: float(np.tanh(x.data @ w.data + b.data).sum())  # noqa: E731
        for t in (x, w, b):
            assert np.allclose(t.grad, numeric_grad(f, t.data), atol=1e-6)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        arrays = {"a": Tensor(np.arange(6, dtype=np.float32).reshape(2, 3)), "b.c": Tensor(np.array([1.5], np.float32))}
        ad.save_checkpoint(tmp_path / "m.ckpt", arrays)
        loaded = ad.load_checkpoint(tmp_path / "m.ckpt")
        assert list(loaded) == ["a", "b.c"]
        assert np.array_equal(loaded["a"], arrays["a"].data)

    def test_rejects_truncated(self, tmp_path):
        path = tmp_path / "m.ckpt"
        ad.save_checkpoint(path, {"a": Tensor(np.ones(4, np.float32))})
        path.write_bytes(path.read_bytes()[:-2])
        with pytest.raises(ValueError):
            ad.load_checkpoint(path)

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"NOPE\n")
        with pytest.raises(ValueError):
            ad.load_checkpoint(path)
