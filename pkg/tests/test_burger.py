import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hamkit import burger, graddiff, mdsolve
from hamkit.burger import AttentionParams, HamburgerConfig, HamburgerParams
from hamkit.matcore import ParameterError, ShapeError, make_rng, singular_values
from hamkit.mdsolve import DomainError, InitStrategy, MdModel


def bn_identity(bn):
    bn.mode = "eval"
    bn.epsilon = 1e-300
    return bn


def config(kind="nmf", **kw):
    base = dict(d_z=6, d=6, r=2, K=2, model=MdModel(kind))
    base.update(kw)
    return HamburgerConfig(**base)


def block_fd(f, z, g, h=1e-5):
    num = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        up, dn = z.copy(), z.copy()
        up[idx] += h
        dn[idx] -= h
        num[idx] = (np.sum(f(up) * g) - np.sum(f(dn) * g)) / (2 * h)
    return num


class TestConfig:
    def test_nmf_forces_relu(self):
        assert config("nmf", use_relu_pre_ham=False).use_relu_pre_ham

    def test_bad_mode(self):
        with pytest.raises(ParameterError, match="bptt, one-step, implicit"):
            config(grad_mode="adjoint")

    def test_bread_ablation_needs_square(self):
        with pytest.raises(ParameterError):
            config(d=8, lower_bread=False)

    def test_from_r(self):
        assert HamburgerConfig.from_r(4, 16).d == 32


class TestHamburgerForward:
    def test_identity_ham(self, rng):
        cfg = config(ham_override="identity", use_relu_pre_ham=False, model=MdModel("vq"))
        p = HamburgerParams(np.eye(6), np.eye(6), bn_identity(HamburgerParams.init(cfg, rng).bn))
        z = rng.normal(size=(6, 8))
        y, _ = burger.hamburger_forward(z, p, cfg, rng)
        np.testing.assert_allclose(y, 2 * z, atol=1e-14)

    def test_zero_ham(self, rng):
        cfg = config(ham_override="zero")
        p = HamburgerParams.init(cfg, rng)
        p.bn.mode = "eval"
        z = rng.normal(size=(6, 8))
        y, cache = burger.hamburger_forward(z, p, cfg, rng)
        np.testing.assert_allclose(y, z, atol=1e-14)
        gz, _ = burger.hamburger_backward(np.ones_like(z), cache, cfg)
        np.testing.assert_allclose(gz, 1.0)

    @pytest.mark.parametrize("kind", mdsolve.KINDS)
    def test_branch_rank(self, kind, rng):
        cfg = config(kind, d_z=12, d=10, r=3, K=6)
        p = HamburgerParams.init(cfg, rng)
        _, cache = burger.hamburger_forward(rng.normal(size=(12, 40)), p, cfg, rng)
        for name in ("Xbar", "H"):
            s = singular_values(cache.parts[name].value)
            assert s[3] < 1e-6 * s[0]

    def test_shape_error(self, rng):
        cfg = config()
        with pytest.raises(ShapeError):
            burger.hamburger_forward(np.ones((5, 3)), HamburgerParams.init(cfg, rng), cfg, rng)

    def test_nmf_without_relu_rejects_negative(self, rng):
        cfg = config("nmf")
        cfg.use_relu_pre_ham = False  # bypass the config guard on purpose
        p = HamburgerParams(-np.eye(6), np.eye(6), HamburgerParams.init(cfg, rng).bn)
        with pytest.raises(DomainError):
            burger.hamburger_forward(np.abs(rng.normal(size=(6, 4))), p, cfg, rng)

    def test_only_ham_ablation(self, rng):
        cfg = config("vq", lower_bread=False, upper_bread=False, use_relu_pre_ham=False)
        bn = bn_identity(HamburgerParams.init(cfg, rng).bn)
        p = HamburgerParams(np.zeros((6, 6)), np.zeros((6, 6)), bn)
        z = rng.normal(size=(6, 9))
        init = mdsolve.init_factorization(z, cfg.model, InitStrategy(), 2, make_rng(0))
        y, _ = burger.hamburger_forward(z, p, cfg, init_state=init)
        m = mdsolve.unroll(z, cfg.model, cfg.K, *init, trace=False).reconstruction
        np.testing.assert_allclose(y, z + m, atol=1e-12)

    @pytest.mark.parametrize("kind", mdsolve.KINDS)
    def test_permutation_equivariance(self, kind, rng):
        cfg = config(kind, d_z=5, d=6, r=2, K=3, init=InitStrategy("fixed", seed=1))
        p = HamburgerParams.init(cfg, rng)
        z = rng.normal(size=(5, 10))
        perm = rng.permutation(10)
        y, _ = burger.hamburger_forward(z, p, cfg)
        yp, _ = burger.hamburger_forward(z[:, perm], p, cfg)
        np.testing.assert_allclose(yp, y[:, perm], atol=1e-10)


class TestHamburgerBackward:
    @pytest.mark.parametrize("kind", mdsolve.KINDS)
    def test_finite_differences(self, kind):
        r = make_rng(3)
        cfg = config(kind, grad_mode="bptt")
        p = HamburgerParams.init(cfg, r)
        p.bn.gamma = r.normal(size=6)
        z, g = r.normal(size=(6, 8)), r.normal(size=(6, 8))
        X = np.maximum(p.W_l @ z, 0)
        init = mdsolve.init_factorization(X, cfg.model, InitStrategy(), 2, r)
        _, cache = burger.hamburger_forward(z, p, cfg, init_state=init)
        gz, gp = burger.hamburger_backward(g, cache, cfg)
        f = lambda zz: burger.hamburger_forward(zz, p, cfg, init_state=init)[0]  # noqa: E731
        assert graddiff.max_rel_error(gz, block_fd(f, z, g)) < 1e-4

        def f_wl(wl):
            q = HamburgerParams(wl, p.W_u, p.bn)
            return burger.hamburger_forward(z, q, cfg, init_state=init)[0]

        assert graddiff.max_rel_error(gp["W_l"], block_fd(f_wl, p.W_l, g)) < 1e-4

    @pytest.mark.parametrize("kind", mdsolve.KINDS)
    def test_k1_modes_agree(self, kind, rng):
        z, g = rng.normal(size=(6, 8)), rng.normal(size=(6, 8))
        grads = {}
        for mode in ("bptt", "one-step"):
            cfg = config(kind, K=1, grad_mode=mode)
            p = HamburgerParams.init(cfg, make_rng(0))
            _, cache = burger.hamburger_forward(z, p, cfg, make_rng(1))
            grads[mode] = burger.hamburger_backward(g, cache, cfg)
        a, b = grads["bptt"], grads["one-step"]
        assert graddiff.max_rel_error(b[0], a[0]) < 1e-12
        for k in a[1]:
            assert graddiff.max_rel_error(b[1][k], a[1][k]) < 1e-12

    def test_mode_mismatch(self, rng):
        cfg = config(grad_mode="bptt")
        _, cache = burger.hamburger_forward(rng.normal(size=(6, 4)), HamburgerParams.init(cfg, rng), cfg, rng)
        with pytest.raises(RuntimeError):
            burger.hamburger_backward(np.ones((6, 4)), cache, config(grad_mode="one-step"))
        _, acache = burger.attention_forward(rng.normal(size=(6, 4)), AttentionParams.init(6, rng))
        with pytest.raises(RuntimeError):
            burger.hamburger_backward(np.ones((6, 4)), acache)


class TestAttention:
    def test_single_token(self, rng):
        p = AttentionParams.init(4, rng, with_bn=False)
        z = rng.normal(size=(4, 1))
        y, cache = burger.attention_forward(z, p)
        assert cache.parts["A"].value.tolist() == [[1.0]]
        np.testing.assert_allclose(y, z + p.W_o @ p.W_v @ z, atol=1e-14)

    def test_identical_tokens(self, rng):
        p = AttentionParams.init(4, rng)
        z = np.repeat(rng.normal(size=(4, 1)), 3, axis=1)
        z = np.concatenate([z, rng.normal(size=(4, 2))], axis=1)
        y, _ = burger.attention_forward(z, p)
        np.testing.assert_allclose(y[:, 0], y[:, 1], atol=1e-12)
        np.testing.assert_allclose(y[:, 0], y[:, 2], atol=1e-12)

    def test_rows_stochastic(self, rng):
        _, cache = burger.attention_forward(rng.normal(size=(5, 9)) * 3, AttentionParams.init(5, rng))
        np.testing.assert_allclose(cache.parts["A"].value.sum(axis=1), 1.0, atol=1e-12)

    def test_finite_differences(self, rng):
        p = AttentionParams.init(6, rng)
        z, g = rng.normal(size=(6, 8)), rng.normal(size=(6, 8))
        _, cache = burger.attention_forward(z, p)
        gz, gp = burger.attention_backward(g, cache)
        f = lambda zz: burger.attention_forward(zz, p)[0]  # noqa: E731
        assert graddiff.max_rel_error(gz, block_fd(f, z, g)) < 1e-4

        def f_wq(w):
            return burger.attention_forward(z, AttentionParams(w, p.W_k, p.W_v, p.W_o, p.bn))[0]

        assert graddiff.max_rel_error(gp["W_q"], block_fd(f_wq, p.W_q, g)) < 1e-4

    def test_zero_cotangent(self, rng):
        _, cache = burger.attention_forward(rng.normal(size=(4, 5)), AttentionParams.init(4, rng))
        gz, gp = burger.attention_backward(np.zeros((4, 5)), cache)
        assert not gz.any() and not any(v.any() for v in gp.values())

    @settings(max_examples=20)
    @given(st.integers(2, 12), st.integers(0, 10**6))
    def test_permutation_equivariance(self, n, seed):
        r = make_rng(seed)
        p = AttentionParams.init(4, r)
        z, g = r.normal(size=(4, n)), r.normal(size=(4, n))
        perm = r.permutation(n)
        y, c = burger.attention_forward(z, p)
        yp, cp = burger.attention_forward(z[:, perm], p)
        np.testing.assert_allclose(yp, y[:, perm], atol=1e-10)
        gz, _ = burger.attention_backward(g, c)
        gzp, _ = burger.attention_backward(g[:, perm], cp)
        np.testing.assert_allclose(gzp, gz[:, perm], atol=1e-10)

    def test_shape_error(self, rng):
        with pytest.raises(ShapeError):
            burger.attention_forward(np.ones((3, 2)), AttentionParams.init(4, rng))


class TestParamCounts:
    @pytest.mark.parametrize("d_z, d", [(6, 6), (16, 32), (512, 512)])
    def test_hamburger(self, d_z, d):
        cfg = HamburgerConfig(d_z=d_z, d=d, r=2)
        assert HamburgerParams.init(cfg, make_rng(0)).count() == burger.hamburger_param_count(d_z, d)
        assert burger.hamburger_param_count(d_z, d) == 2 * d_z * d + 2 * d_z

    def test_attention(self):
        assert AttentionParams.init(512, make_rng(0)).count() == burger.attention_param_count(512) == 4 * 512**2

    def test_full_scale(self):
        assert burger.hamburger_param_count(512, 512) == 525_312
        assert burger.attention_param_count(512) == 1_048_576


class TestBatchedForward:
    def test_stack_matches_per_sample_solves(self, rng):
        cfg = config("cd", init=InitStrategy("fixed", seed=2))
        p = HamburgerParams.init(cfg, rng)
        p.bn.mode = "eval"
        z = rng.normal(size=(3, 6, 7))
        y, _ = burger.hamburger_forward(z, p, cfg)
        for b in range(3):
            yb, _ = burger.hamburger_forward(z[b], p, cfg)
            np.testing.assert_allclose(y[b], yb, atol=1e-12)

    def test_random_init_redrawn(self, rng):
        cfg = config("vq")
        p = HamburgerParams.init(cfg, rng)
        p.bn.mode = "eval"
        z = rng.normal(size=(6, 7))
        a, _ = burger.hamburger_forward(z, p, cfg, make_rng(1))
        b, _ = burger.hamburger_forward(z, p, cfg, make_rng(2))
        c, _ = burger.hamburger_forward(z, p, cfg, make_rng(1))
        assert not np.allclose(a, b) and np.array_equal(a, c)
