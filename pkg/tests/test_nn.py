import numpy as np
import pytest

from wiplab import nn


def fd_gradient_check(net, x, gy, eps=1e-5, tol=1e-4):
    """Central finite differences against the analytic backward pass."""
    net.forward(x)
    net.zero_grads()
    gx = net.backward(gy)
    loss = lambda: float((net.forward(x, cache=False) * gy).sum())
    worst = 0.0
    for arr, grad in zip(net.parameter_arrays(), net.gradient_arrays()):
        for i in range(arr.size):
            orig = arr.flat[i]
            arr.flat[i] = orig + eps
            fp = loss()
            arr.flat[i] = orig - eps
            fm = loss()
            arr.flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            denom = max(abs(num), abs(grad.flat[i]), 1e-6)
            worst = max(worst, abs(num - grad.flat[i]) / denom)
    assert worst < tol, f"gradient mismatch {worst}"
    return gx


class TestSpecs:
    def test_actor_param_count(self):
        assert nn.param_count(nn.actor_spec()) == 4929

    def test_critic_param_count(self):
        assert nn.param_count(nn.critic_spec()) == 10 * 64 + 64 + 64 * 64 + 64 + 64 + 1

    def test_encoder_param_count(self):
        assert nn.param_count(nn.encoder_spec()) == 7

    def test_empty_spec(self):
        assert nn.param_count(nn.NetworkSpec(())) == 0

    def test_adaptation_flatten_width(self):
        spec = nn.adaptation_spec()
        assert spec.layers[2].in_dim == 2560          # 64 kernels x length 40

    def test_conv_preserves_length_40(self):
        conv = nn.Conv1dSpec(9, 64, 3, stride=1, padding=1, in_length=40)
        assert conv.out_length == 40


class TestForward:
    def test_zero_params_zero_output(self, rng):
        spec = nn.actor_spec()
        params = [[np.zeros_like(p) for p in layer]
                  for layer in nn.init_params(spec, rng)]
        net = nn.Network(spec, params)
        x = rng.standard_normal((4, 10))
        assert np.all(net.forward(x) == 0.0)

    def test_identity_like_encoder(self):
        spec = nn.encoder_spec()
        params = [
            [np.array([[1.0, 0.0]]), np.zeros(2)],
            [np.array([[1.0], [0.0]]), np.zeros(1)],
        ]
        net = nn.Network(spec, params)
        out = net.forward(np.array([[0.7]]))
        assert out[0, 0] == pytest.approx(0.7)        # positive path through lrelu

    def test_adaptation_shapes(self, rng):
        net = nn.Network.create(nn.adaptation_spec(), rng)
        out = net.forward(rng.standard_normal((3, 9, 40)))
        assert out.shape == (3, 1)

    def test_forward_pure(self, rng):
        net = nn.Network.create(nn.actor_spec(), rng)
        x = rng.standard_normal((5, 10))
        a = net.forward(x, cache=False)
        b = net.forward(x, cache=False)
        assert np.array_equal(a, b)

    def test_shape_mismatch(self, rng):
        net = nn.Network.create(nn.actor_spec(), rng)
        with pytest.raises(nn.ShapeMismatch):
            net.forward(rng.standard_normal((4, 7)))


class TestBackward:
    def test_dense_stack_matches_finite_differences(self):
        for trial in range(10):
            r = np.random.default_rng(200 + trial)
            spec = nn.NetworkSpec((
                nn.DenseSpec(5, 7, "lrelu"), nn.DenseSpec(7, 6, "tanh"),
                nn.DenseSpec(6, 4, "relu"), nn.DenseSpec(4, 3, "linear"),
            ))
            net = nn.Network.create(spec, r, out_gain=1.0)
            fd_gradient_check(net, r.standard_normal((3, 5)), r.standard_normal((3, 3)))

    def test_conv_stack_matches_finite_differences(self):
        for trial in range(5):
            r = np.random.default_rng(300 + trial)
            net = nn.Network.create(nn.adaptation_spec(3, 8), r, out_gain=1.0)
            fd_gradient_check(net, r.standard_normal((2, 3, 8)), r.standard_normal((2, 1)))

    def test_zero_output_gradient(self, rng):
        net = nn.Network.create(nn.actor_spec(), rng)
        x = rng.standard_normal((4, 10))
        y = net.forward(x)
        net.zero_grads()
        net.backward(np.zeros_like(y))
        assert all(np.all(g == 0.0) for g in net.gradient_arrays())

    def test_single_dense_weight_gradient_closed_form(self, rng):
        spec = nn.NetworkSpec((nn.DenseSpec(4, 3, "linear"),))
        net = nn.Network.create(spec, rng, out_gain=1.0)
        x = rng.standard_normal((2, 4))
        gy = rng.standard_normal((2, 3))
        net.forward(x)
        net.zero_grads()
        gx = net.backward(gy)
        np.testing.assert_allclose(net.grads[0][0], x.T @ gy, atol=1e-12)
        np.testing.assert_allclose(net.grads[0][1], gy.sum(axis=0), atol=1e-12)
        np.testing.assert_allclose(gx, gy @ net.params[0][0].T, atol=1e-12)

    def test_backward_requires_cached_forward(self, rng):
        net = nn.Network.create(nn.actor_spec(), rng)
        with pytest.raises(nn.NnError):
            net.backward(np.zeros((1, 1)))


class TestAdam:
    def test_zero_gradient_keeps_params(self, rng):
        p = rng.standard_normal((3, 2))
        orig = p.copy()
        opt = nn.Adam([p], lr=0.1)
        opt.step([np.zeros_like(p)])
        np.testing.assert_array_equal(p, orig)

    def test_single_step_closed_form(self):
        p = np.zeros(3)
        g = np.array([0.5, -2.0, 1e-3])
        opt = nn.Adam([p], lr=0.01)
        opt.step([g.copy()])
        # After one bias-corrected step: m_hat = g, v_hat = g^2, so the move
        # is -lr * g / (|g| + eps) ~ -lr * sign(g).
        want = -0.01 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p, want, rtol=1e-6)

    def test_elementwise_independence(self, rng):
        a = rng.standard_normal(4)
        b = a.copy()
        g = rng.standard_normal(4)
        opt = nn.Adam([a, b], lr=0.05)
        opt.step([g.copy(), g.copy()])
        np.testing.assert_array_equal(a, b)

    def test_shape_mismatch(self, rng):
        p = rng.standard_normal(4)
        opt = nn.Adam([p], lr=0.1)
        with pytest.raises(nn.ShapeMismatch):
            opt.step([np.zeros(5)])


class TestInit:
    def test_orthogonal_columns(self, rng):
        w = nn.orthogonal(rng, (16, 8), gain=1.0)
        np.testing.assert_allclose(w.T @ w, np.eye(8), atol=1e-10)

    def test_gain_scaling(self, rng):
        w = nn.orthogonal(rng, (8, 8), gain=3.0)
        np.testing.assert_allclose(w @ w.T, 9.0 * np.eye(8), atol=1e-9)

    def test_contiguous(self, rng):
        assert nn.orthogonal(rng, (5, 7), gain=1.0).flags["C_CONTIGUOUS"]


class TestCheckpoint:
    def make_ckpt(self, rng):
        specs = {"actor": nn.actor_spec(), "adaptation": nn.adaptation_spec(3, 8)}
        params = {k: nn.init_params(v, rng) for k, v in specs.items()}
        opt = nn.Adam([a for layer in params["actor"] for a in layer], lr=1e-3)
        opt.step([np.ones_like(a) for layer in params["actor"] for a in layer])
        return nn.PolicyCheckpoint(
            variant="ours", seed=11, iteration=42,
            curriculum={"mean_ep_len": 312.5, "T_max": 1000},
            specs=specs, params=params,
            extras={"log_std": np.array([np.log(0.5)])},
            moments={"actor": opt.state()},
            meta={"v_max": 20.0},
        )

    def test_roundtrip_bytes(self, tmp_path, rng):
        ck = self.make_ckpt(rng)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        nn.save_checkpoint(p1, ck)
        nn.save_checkpoint(p2, nn.load_checkpoint(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_roundtrip_values(self, tmp_path, rng):
        ck = self.make_ckpt(rng)
        path = tmp_path / "c.ckpt"
        nn.save_checkpoint(path, ck)
        back = nn.load_checkpoint(path)
        assert back.variant == "ours" and back.iteration == 42
        assert back.curriculum == ck.curriculum
        for la, lb in zip(ck.params["actor"], back.params["actor"]):
            for a, b in zip(la, lb):
                np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(back.extras["log_std"], ck.extras["log_std"])
        assert back.moments["actor"]["t"] == 1
        np.testing.assert_array_equal(back.moments["actor"]["m"][0],
                                      ck.moments["actor"]["m"][0])

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"NOTACKPT" + b"\0" * 64)
        with pytest.raises(nn.CheckpointLoad):
            nn.load_checkpoint(p)

    def test_truncated(self, tmp_path, rng):
        ck = self.make_ckpt(rng)
        p = tmp_path / "t.ckpt"
        nn.save_checkpoint(p, ck)
        data = p.read_bytes()
        p.write_bytes(data[:len(data) // 2])
        with pytest.raises(nn.CheckpointLoad):
            nn.load_checkpoint(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(nn.CheckpointLoad):
            nn.load_checkpoint(tmp_path / "absent.ckpt")
