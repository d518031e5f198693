import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bodyimage import autodiff as ad
from bodyimage.autodiff import ShapeError, Tape
from gradcheck import check_function


def loop_matmul(W, x, b):
    out = [0.0] * len(W)
    for i in range(len(W)):
        acc = b[i]
        for j in range(len(x)):
            acc += W[i][j] * x[j]
        out[i] = acc
    return out


def loop_conv(x, k, b):
    """Direct 3x3 same-padded cross-correlation, six nested loops."""
    h, w, c_in = x.shape
    c_out = k.shape[3]
    y = np.zeros((h, w, c_out))
    for i in range(h):
        for j in range(w):
            for d in range(c_out):
                acc = b[d]
                for dy in range(3):
                    for dx in range(3):
                        for c in range(c_in):
                            yy, xx = i + dy - 1, j + dx - 1
                            if 0 <= yy < h and 0 <= xx < w:
                                acc += x[yy, xx, c] * k[dy, dx, c, d]
                y[i, j, d] = acc
    return y


def run(op, *arrays, dtype=np.float64):
    tape = Tape(dtype)
    return op(*(tape.variable(a) for a in arrays)).value


class TestFullyConnected:
    def test_identity(self):
        x = np.array([1.0, -2.0, 3.0])
        assert np.array_equal(run(ad.fully_connected, x, np.eye(3), np.zeros(3)), x)

    def test_zero_weights(self):
        out = run(ad.fully_connected, np.ones(4), np.zeros((2, 4)), np.array([0.5, -0.5]))
        assert np.array_equal(out, [0.5, -0.5])

    def test_loop_oracle(self):
        rng = np.random.default_rng(0)
        W, x, b = rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=3)
        np.testing.assert_allclose(run(ad.fully_connected, x, W, b), loop_matmul(W.tolist(), x.tolist(), b.tolist()), atol=1e-6)
        out32 = run(ad.fully_connected, x, W, b, dtype=np.float32)
        np.testing.assert_allclose(out32, loop_matmul(W.tolist(), x.tolist(), b.tolist()), atol=1e-6)

    def test_batch_rows_independent(self):
        rng = np.random.default_rng(1)
        W, xs, b = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=3)
        batch = run(ad.fully_connected, xs, W, b)
        for i in range(5):
            np.testing.assert_allclose(batch[i], run(ad.fully_connected, xs[i], W, b), atol=1e-12)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            run(ad.fully_connected, np.ones(3), np.ones((2, 4)), np.ones(2))
        with pytest.raises(ShapeError):
            run(ad.fully_connected, np.ones(4), np.ones((2, 4)), np.ones(3))


class TestConv:
    def test_delta_kernel(self):
        k = np.zeros((3, 3, 1, 1))
        k[1, 1] = 1
        x = np.random.default_rng(0).random((5, 6, 1))
        np.testing.assert_array_equal(run(ad.conv2d, x, k, np.zeros(1)), x)

    def test_zero_kernel_bias(self):
        out = run(ad.conv2d, np.random.default_rng(0).random((4, 4, 2)), np.zeros((3, 3, 2, 3)), np.array([1.0, 2.0, 3.0]))
        assert np.array_equal(out, np.broadcast_to([1.0, 2.0, 3.0], (4, 4, 3)))

    def test_loop_oracle(self):
        rng = np.random.default_rng(3)
        x, k, b = rng.normal(size=(5, 5, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
        np.testing.assert_allclose(run(ad.conv2d, x, k, b), loop_conv(x, k, b), atol=1e-6)
        np.testing.assert_allclose(run(ad.conv2d, x, k, b, dtype=np.float32), loop_conv(x, k, b), atol=1e-5)

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
    @settings(max_examples=25, deadline=None)
    def test_loop_oracle_random_shapes(self, h, w, c_in, c_out, seed):
        rng = np.random.default_rng(seed)
        x, k, b = rng.normal(size=(2, h, w, c_in)), rng.normal(size=(3, 3, c_in, c_out)), rng.normal(size=c_out)
        out = run(ad.conv2d, x, k, b)
        for n in range(2):
            np.testing.assert_allclose(out[n], loop_conv(x[n], k, b), atol=1e-10)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            run(ad.conv2d, np.ones((4, 4, 2)), np.ones((3, 3, 3, 1)), np.ones(1))
        with pytest.raises(ShapeError):
            run(ad.conv2d, np.ones((4, 4, 2)), np.ones((5, 5, 2, 1)), np.ones(1))


class TestUpsample:
    def test_single_pixel(self):
        out = run(ad.upsample2x, np.array([[[0.25, 0.5, 0.75]]]))
        assert out.shape == (2, 2, 3)
        assert (out == [0.25, 0.5, 0.75]).all()

    def test_index_oracle(self):
        x = np.random.default_rng(0).random((3, 4, 2))
        out = run(ad.upsample2x, x)
        for i in range(6):
            for j in range(8):
                assert np.array_equal(out[i, j], x[i // 2, j // 2])

    def test_box_downsample_inverts(self):
        from bodyimage.dataset import downsample
        x = np.random.default_rng(1).random((3, 4, 3))
        np.testing.assert_allclose(downsample(run(ad.upsample2x, x), 2), x, atol=1e-15)

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31))
    @settings(max_examples=25, deadline=None)
    def test_fused_matches_composition(self, h, w, c_in, c_out, seed):
        rng = np.random.default_rng(seed)
        x, k, b = rng.normal(size=(2, h, w, c_in)), rng.normal(size=(3, 3, c_in, c_out)), rng.normal(size=c_out)
        tape = Tape(np.float64)
        xs, ks, bs = tape.variable(x), tape.variable(k), tape.variable(b)
        fused = ad.upsample_conv2d(xs, ks, bs)
        plain = ad.conv2d(ad.upsample2x(xs), ks, bs)
        np.testing.assert_allclose(fused.value, plain.value, atol=1e-12)
        weights = tape.constant(rng.normal(size=fused.shape))
        g1 = ad.backward(tape, ad.mean(ad.mul(fused, weights)))
        g2 = ad.backward(tape, ad.mean(ad.mul(plain, weights)))
        for v in (xs, ks, bs):
            np.testing.assert_allclose(g1[v], g2[v], atol=1e-12)


class TestCrop:
    def test_index_oracle(self):
        x = np.arange(2 * 5 * 6 * 3, dtype=np.float64).reshape(2, 5, 6, 3)
        out = run(lambda t: ad.crop2d(t, 1, 2, 3, 3), x)
        for n in range(2):
            for i in range(3):
                for j in range(3):
                    assert out[n, i, j].tolist() == x[n, i + 1, j + 2].tolist()

    def test_gradient_zero_outside(self):
        tape = Tape(np.float64)
        x = tape.variable(np.ones((1, 4, 4, 2)))
        grads = ad.backward(tape, ad.mean(ad.crop2d(x, 1, 1, 2, 2)))
        expected = np.zeros((1, 4, 4, 2))
        expected[:, 1:3, 1:3] = 1 / 8
        np.testing.assert_array_equal(grads[x], expected)

    def test_out_of_bounds(self):
        tape = Tape(np.float64)
        x = tape.variable(np.ones((1, 4, 4, 2)))
        with pytest.raises(ShapeError):
            ad.crop2d(x, 2, 0, 3, 4)
        with pytest.raises(ShapeError):
            ad.crop2d(x, 0, 0, 0, 4)


class TestActivations:
    def test_fixed_points(self):
        assert run(ad.selu, np.array([0.0]))[0] == 0
        assert run(ad.relu, np.array([0.0]))[0] == 0
        np.testing.assert_array_equal(run(ad.relu, np.array([-5.0, 5.0])), [0, 5])

    def test_selu_closed_form(self):
        expected = ad.SELU_LAMBDA * ad.SELU_ALPHA * (math.exp(-1) - 1)
        assert run(ad.selu, np.array([-1.0]))[0] == pytest.approx(expected, rel=1e-14)
        assert expected == pytest.approx(-1.1113, abs=1e-4)
        assert run(ad.selu, np.array([2.0]))[0] == pytest.approx(2 * ad.SELU_LAMBDA)

    def test_selu_constants(self):
        # the self-normalising fixed point constants
        assert ad.SELU_LAMBDA == pytest.approx(1.0507009873554805, abs=1e-15)
        assert ad.SELU_ALPHA == pytest.approx(1.6732632423543772, abs=1e-15)

    def test_relu_subgradient_zero(self):
        tape = Tape(np.float64)
        x = tape.variable(np.array([0.0, 1.0, -1.0]))
        g = ad.backward(tape, ad.mean(ad.relu(x)))[x]
        np.testing.assert_array_equal(g, [0.0, 1 / 3, 0.0])

    def test_selu_input_untouched(self):
        v = np.array([-1.0, 0.5])
        tape = Tape(np.float64)
        x = tape.variable(v)
        ad.selu(x)
        np.testing.assert_array_equal(x.value, v)


class TestL1:
    def test_equal(self):
        assert run(ad.l1_mean, np.ones(4), np.ones(4)) == 0

    def test_hand_sum(self):
        assert run(ad.l1_mean, np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 1.0

    def test_loop_oracle(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        total = 0.0
        for i in range(3):
            for j in range(4):
                total += abs(a[i, j] - b[i, j])
        assert run(ad.l1_mean, a, b) == pytest.approx(total / 12, rel=1e-12)

    def test_subgradient_zero_at_tie(self):
        tape = Tape(np.float64)
        a, b = tape.variable(np.array([1.0, 2.0])), tape.variable(np.array([1.0, 0.0]))
        g = ad.backward(tape, ad.l1_mean(a, b))
        np.testing.assert_array_equal(g[a], [0.0, 0.5])

    def test_no_broadcast(self):
        with pytest.raises(ShapeError):
            run(ad.l1_mean, np.ones(4), np.ones(1))
        with pytest.raises(ShapeError):
            run(ad.add, np.ones((2, 3)), np.ones(3))


class TestBackward:
    def test_identity_loss(self):
        tape = Tape(np.float64)
        p = tape.variable(np.array(3.0))
        assert ad.backward(tape, p)[p] == 1.0

    def test_constant_loss(self):
        tape = Tape(np.float64)
        p = tape.variable(np.ones(3))
        c = tape.constant(np.array(2.0))
        assert not ad.backward(tape, c)[p].any()

    def test_fan_out_accumulates(self):
        tape = Tape(np.float64)
        p = tape.variable(np.array([2.0]))
        g = ad.backward(tape, ad.mean(ad.mul(p, p)))[p]
        assert g[0] == pytest.approx(4.0)

    def test_non_scalar_loss(self):
        tape = Tape(np.float64)
        p = tape.variable(np.ones(3))
        with pytest.raises(ShapeError):
            ad.backward(tape, p)

    def test_foreign_tapes(self):
        a, b = Tape().variable(np.ones(2)), Tape().variable(np.ones(2))
        with pytest.raises(ValueError):
            ad.add(a, b)

    def test_forward_bit_reproducible(self):
        rng = np.random.default_rng(0)
        x, k, b = rng.normal(size=(2, 4, 4, 3)), rng.normal(size=(3, 3, 3, 2)), rng.normal(size=2)
        assert np.array_equal(run(ad.conv2d, x, k, b, dtype=np.float32), run(ad.conv2d, x, k, b, dtype=np.float32))

    def test_clear_releases_nodes(self):
        tape = Tape(np.float64)
        p = tape.variable(np.ones(2))
        ad.mean(p)
        tape.clear()
        assert len(tape) == 0 and tape.variables == []


class TestStopGradient:
    def test_value_pass_through(self):
        tape = Tape(np.float64)
        p = tape.variable(np.array([1.0, -2.0]))
        s = ad.stop_gradient(p)
        assert np.array_equal(s.value, p.value) and not s.requires_grad

    def test_product_rule_halved(self):
        tape = Tape(np.float64)
        v = np.array([0.5, -1.5, 2.0])
        p = tape.variable(v)
        loss = ad.mean(ad.mul(ad.stop_gradient(p), p))
        np.testing.assert_allclose(ad.backward(tape, loss)[p], v / 3)

    def test_stopped_loss_zero_gradient(self):
        tape = Tape(np.float64)
        p = tape.variable(np.array([0.5, 1.0]))
        assert not ad.backward(tape, ad.mean(ad.stop_gradient(p)))[p].any()


def small_net_4x4(rng):
    """Two-branch network at 4x4 with one fused upsampling stage per branch."""
    arrays = {
        "fc1.w": rng.normal(0, 0.7, (6, 2)), "fc1.b": rng.normal(0, 0.3, 6),
        "fc2.w": rng.normal(0, 0.4, (12, 6)), "fc2.b": rng.normal(0, 0.3, 12),
    }
    for br in ("image", "error"):
        arrays[f"{br}.up.k"] = rng.normal(0, 0.3, (3, 3, 3, 3))
        arrays[f"{br}.up.b"] = rng.normal(0, 0.3, 3)
        arrays[f"{br}.conv.k"] = rng.normal(0, 0.3, (3, 3, 3, 3))
        arrays[f"{br}.conv.b"] = rng.normal(0, 0.3, 3) + 0.5
    motors = rng.uniform(-1, 1, (2, 2))
    target = rng.random((2, 4, 4, 3))

    def build():
        tape = Tape(np.float64)
        v = {k: tape.variable(a) for k, a in arrays.items()}
        h = ad.selu(ad.fully_connected(tape.constant(motors), v["fc1.w"], v["fc1.b"]))
        h = ad.reshape(ad.selu(ad.fully_connected(h, v["fc2.w"], v["fc2.b"])), (2, 2, 2, 3))
        outs = []
        for br in ("image", "error"):
            z = ad.selu(ad.upsample_conv2d(h, v[f"{br}.up.k"], v[f"{br}.up.b"]))
            outs.append(ad.relu(ad.conv2d(z, v[f"{br}.conv.k"], v[f"{br}.conv.b"])))
        s_hat, e_hat = outs
        t = tape.constant(target)
        rec = ad.l1_mean(s_hat, t)
        err = ad.l1_mean(e_hat, ad.absolute(ad.sub(s_hat, t)))
        return tape, v, ad.add(rec, ad.scale(err, 0.6))

    return arrays, build


@pytest.mark.parametrize("seed", range(3))
def test_small_network_every_coordinate(seed):
    rng = np.random.default_rng(seed)
    arrays, build = small_net_4x4(rng)
    worst, compared, skipped = check_function(build, arrays, rng, per_tensor=None)
    assert worst < 1e-4
    assert skipped == 0
    assert sum(compared.values()) == sum(a.size for a in arrays.values())


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = [rng.normal(size=(2, 3)).astype(np.float32), np.zeros(4, np.float32), rng.normal(size=(3, 3, 2, 1)).astype(np.float32)]
        ad.save_arrays(arrays, tmp_path / "m.smnn")
        back = ad.load_arrays(tmp_path / "m.smnn")
        assert len(back) == 3
        for a, b in zip(arrays, back):
            assert a.shape == b.shape and np.array_equal(a, b)

    def test_layout(self, tmp_path):
        ad.save_arrays([np.array([[1.0, 2.0]], np.float32)], tmp_path / "m.smnn")
        expected = b"SMNN" + struct.pack("<IIIII", 1, 1, 2, 1, 2) + struct.pack("<2f", 1.0, 2.0)
        assert (tmp_path / "m.smnn").read_bytes() == expected

    @pytest.mark.parametrize("mutate", [
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:4] + struct.pack("<I", 9) + b[8:],
        lambda b: b[:-1],
        lambda b: b + b"\0",
        lambda b: b[:14],
    ])
    def test_corrupt(self, tmp_path, mutate):
        ad.save_arrays([np.ones((2, 2), np.float32)], tmp_path / "m.smnn")
        (tmp_path / "m.smnn").write_bytes(mutate((tmp_path / "m.smnn").read_bytes()))
        with pytest.raises(ad.CheckpointError):
            ad.load_arrays(tmp_path / "m.smnn")
