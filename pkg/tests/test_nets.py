import numpy as np
import pytest

from nfa import diffmath as dm
from nfa import nets
from nfa.diffmath import Tape, Tensor


def small_interp(seed=0, **kw):
    cfg = dict(latent_dim=8, hidden=6, n_layers=3, dtype="float64", seed=seed)
    cfg.update(kw)
    return nets.InterpNet(4, **cfg)


def rel_err_prior(loss_fn, prior):
    with Tape() as tape:
        loss = loss_fn()
    (g,) = tape.gradient(loss, [prior.values])
    num = dm.finite_difference_grad(lambda: float(loss_fn().data), prior.values.data)
    return dm.max_relative_error(g, num)


class TestLatentPrior:
    def test_reg_prior_split(self):
        p = nets.init_latent_reg(128, 0)
        assert 0.9 <= p.array[:64].mean() <= 1.1
        assert abs(p.array[64:].mean()) < 0.1

    def test_interp_prior_small(self):
        p = nets.init_latent_interp(128, 0)
        assert np.abs(p.array).max() < 0.1

    @pytest.mark.parametrize("L", [0, -3])
    def test_bad_length(self, L):
        with pytest.raises(ValueError):
            nets.init_latent_interp(L)
        with pytest.raises(ValueError):
            nets.init_latent_reg(L)

    def test_reg_prior_needs_even_length(self):
        with pytest.raises(ValueError):
            nets.init_latent_reg(7)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            nets.LatentPrior(np.array([0.0, np.nan]))


class TestSirenInit:
    def test_hidden_bound_value(self):
        assert nets.siren_bound(100, 30.0) == pytest.approx(0.0081649658, rel=1e-8)

    def test_within_bounds_and_reproducible(self):
        w = nets.siren_init(100, 64, 30.0, 3)
        assert np.abs(w).max() <= nets.siren_bound(100, 30.0)
        np.testing.assert_array_equal(w, nets.siren_init(100, 64, 30.0, 3))

    def test_first_layer_bound(self):
        w = nets.siren_init(3, 256, 30.0, 0, first=True)
        assert np.abs(w).max() <= 1 / 3
        assert np.abs(w).max() > nets.siren_bound(3, 30.0)


class TestModulatedLayer:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.x = Tensor(rng.normal(size=(5, 4)))
        self.W = Tensor(rng.normal(size=(4, 3)))
        self.b = Tensor(rng.normal(size=3))

    def test_identity_modulation_is_bitwise_plain(self):
        out = nets.modulated_layer(self.x, self.W, self.b, Tensor(np.ones(3)), Tensor(np.zeros(3)))
        ref = dm.sin(self.x @ self.W + self.b)
        assert out.data.tobytes() == ref.data.tobytes()

    def test_zero_scale_ignores_input(self):
        psi = Tensor(np.array([0.1, -0.2, 0.3]))
        out = nets.modulated_layer(self.x, self.W, self.b, Tensor(np.zeros(3)), psi)
        np.testing.assert_allclose(out.data, np.broadcast_to(np.sin(psi.data), (5, 3)))

    def test_phi_gradient(self):
        rng = np.random.default_rng(1)
        phi = Tensor(rng.normal(size=3), requires_grad=True)
        psi = Tensor(rng.normal(size=3))
        w = rng.normal(size=(5, 3))

        def f():
            return dm.sum(nets.modulated_layer(self.x, self.W, self.b, phi, psi) * w)

        with Tape() as tape:
            loss = f()
        (g,) = tape.gradient(loss, [phi])
        num = dm.finite_difference_grad(lambda: float(f().data), phi.data)
        assert dm.max_relative_error(g, num) < 1e-4

    def test_dim_mismatch(self):
        with pytest.raises(dm.ShapeError):
            nets.modulated_layer(self.x, self.W, self.b, Tensor(np.ones(4)), Tensor(np.zeros(4)))


class TestInterpNet:
    def test_outputs_valid(self):
        net = small_interp()
        rng = np.random.default_rng(0)
        c = rng.uniform(-1, 1, (50, 3))
        r, s = net.forward(c, rng.uniform(0, 1, 50), nets.init_latent_interp(8, 1, dtype=np.float64))
        assert np.all((r.data > 0) & (r.data < 1))
        np.testing.assert_allclose(s.data.sum(1), 1.0, atol=1e-9)

    def test_pure(self):
        net = small_interp()
        p = nets.init_latent_interp(8, 1)
        c = np.array([[0.1, -0.2, 0.3]])
        a = net.forward(c, [0.5], p)
        b = net.forward(c, [0.5], p)
        assert a[0].data.tobytes() == b[0].data.tobytes()
        assert a[1].data.tobytes() == b[1].data.tobytes()

    def test_enface_wiring_live(self):
        rng = np.random.default_rng(0)
        changed = 0
        for seed in range(100):
            net = small_interp(seed)
            c = rng.uniform(-1, 1, (1, 3))
            p = nets.init_latent_interp(8, seed)
            ef = rng.uniform(0, 1, 1)
            r1, _ = net.forward(c, ef, p)
            r2, _ = net.forward(c, np.full(1, 0.5), p)
            changed += r1.data[0] != r2.data[0]
        assert changed >= 99

    def test_ablated_net_ignores_enface(self):
        net = small_interp(use_enface=False)
        p = nets.init_latent_interp(8, 0)
        c = np.array([[0.1, 0.2, 0.3]])
        assert net.forward(c, [0.1], p)[0].data[0] == net.forward(c, [0.9], p)[0].data[0]

    def test_non_finite_input(self):
        net = small_interp()
        with pytest.raises(ValueError):
            net.forward(np.array([[np.nan, 0, 0]]), [0.5], nets.init_latent_interp(8, 0))

    def test_prior_length_checked(self):
        with pytest.raises(dm.ShapeError):
            small_interp().forward(np.zeros((1, 3)), [0.5], nets.init_latent_interp(5, 0))

    @pytest.mark.parametrize("head", [0, 1])
    def test_head_gradient_wrt_prior(self, head):
        net = small_interp()
        rng = np.random.default_rng(2)
        c = rng.uniform(-1, 1, (7, 3))
        ef = rng.uniform(0, 1, 7)
        prior = nets.LatentPrior(Tensor(rng.normal(0, 0.05, 8), requires_grad=True))
        w = rng.normal(size=(7, 4)) if head else rng.normal(size=7)
        assert rel_err_prior(lambda: dm.sum(net.forward(c, ef, prior)[head] * w), prior) < 1e-4

    def test_parameter_count_depends_on_L_and_C(self):
        a = nets.InterpNet(4, latent_dim=8, hidden=6, n_layers=3)
        b = nets.InterpNet(5, latent_dim=8, hidden=6, n_layers=3)
        c = nets.InterpNet(4, latent_dim=10, hidden=6, n_layers=3)
        assert b.n_params() - a.n_params() == 6 + 1
        assert c.n_params() - a.n_params() == 2 * 2 * 6 * 3


class TestDisplacementNet:
    def test_fresh_net_small_displacements(self):
        g = np.stack(np.meshgrid(*[np.linspace(-1, 1, 10)] * 3, indexing="ij"), -1).reshape(-1, 3)
        for seed in range(5):
            net = nets.DisplacementNet(seed=seed)
            u = net.forward(g, nets.init_latent_reg(128, seed)).data
            assert np.abs(u).max() < 0.01

    def test_warp_is_coord_plus_u(self):
        net = nets.DisplacementNet(seed=1, dtype="float64")
        p = nets.init_latent_reg(128, 1, dtype=np.float64)
        c = np.random.default_rng(0).uniform(-1, 1, (20, 3))
        w = net.warp(c, p).data
        u = net.forward(c, p).data
        assert (w - c).tobytes() == u.tobytes() or np.array_equal(w, c + u)

    def test_shift_half_matters(self):
        net = nets.DisplacementNet(seed=2, dtype="float64")
        p = nets.init_latent_reg(128, 0, dtype=np.float64)
        q = p.copy()
        q.values.data[64:] += 0.5
        c = np.array([[0.2, -0.3, 0.4]])
        assert not np.array_equal(net.forward(c, p).data, net.forward(c, q).data)

    def test_identity_modulation_bitwise(self):
        net = nets.DisplacementNet(seed=3)
        c = np.random.default_rng(0).uniform(-1, 1, (200, 3))
        ones = Tensor(np.ones((1, net.H), dtype=np.float32))
        zeros = Tensor(np.zeros((1, net.H), dtype=np.float32))
        mods = [(ones, zeros)] * net.n_modulated
        a = net.forward(c, modulations=mods).data
        b = net.forward(c, modulate=False).data
        assert a.tobytes() == b.tobytes()

    def test_prior_gradient(self):
        net = nets.DisplacementNet(latent_dim=8, hidden=5, init_range=0.3, dtype="float64", seed=4)
        rng = np.random.default_rng(1)
        c = rng.uniform(-1, 1, (6, 3))
        prior = nets.init_latent_reg(8, 2, dtype=np.float64)
        w = rng.normal(size=(6, 3))
        assert rel_err_prior(lambda: dm.sum(net.forward(c, prior) * w), prior) < 1e-4

    def test_odd_latent_rejected(self):
        with pytest.raises(ValueError):
            nets.DisplacementNet(latent_dim=7)

    def test_non_finite_coords(self):
        net = nets.DisplacementNet()
        with pytest.raises(ValueError):
            net.forward(np.array([[np.inf, 0, 0]]), nets.init_latent_reg(128, 0))


class TestSiren:
    def test_atlas_outputs(self):
        net = nets.AtlasNet(5, hidden=16)
        r, s = net.forward(np.random.default_rng(0).uniform(-1, 1, (10, 3)))
        assert r.shape == (10,) and s.shape == (10, 5)
        np.testing.assert_allclose(s.data.sum(1), 1.0, atol=1e-6)

    def test_single_inr_defaults(self):
        net = nets.SingleINR(3)
        assert net.H == 512 and net.n_layers == 3


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = nets.InterpNet(4, latent_dim=8, hidden=6, n_layers=2, seed=5)
        priors = [nets.init_latent_interp(8, i, subject_id=f"s{i}") for i in range(3)]
        nets.save_checkpoint(tmp_path / "m.ckpt", net, priors, {"note": "x"})
        net2, priors2, meta = nets.load_checkpoint(tmp_path / "m.ckpt")
        assert net2.checksum() == net.checksum()
        assert [p.subject_id for p in priors2] == ["s0", "s1", "s2"]
        np.testing.assert_array_equal(priors2[1].array, priors[1].array)
        assert meta == {"note": "x"}

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOPE\n{}\n")
        with pytest.raises(nets.CheckpointError, match="NFA1"):
            nets.load_checkpoint(tmp_path / "x.ckpt")

    def test_truncated(self, tmp_path):
        net = nets.DisplacementNet(hidden=4, latent_dim=4)
        nets.save_checkpoint(tmp_path / "d.ckpt", net)
        raw = (tmp_path / "d.ckpt").read_bytes()
        (tmp_path / "d.ckpt").write_bytes(raw[:-8])
        with pytest.raises(nets.CheckpointError, match="payload"):
            nets.load_checkpoint(tmp_path / "d.ckpt")
