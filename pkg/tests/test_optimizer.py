import numpy as np
import pytest

import cuboidfit as cf
from cuboidfit import optimizer as opt
from cuboidfit.errors import InvalidConfigError, NumericalError


def random_instance(seed, n=16, m=3):
    rng = np.random.default_rng(seed)
    pts = rng.normal(0, 0.4, (n, 3))
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return cf.PointCloud(points=pts, normals=nrm)


def perturbed_state(pc, config, seed):
    rng = np.random.default_rng(seed)
    state = opt.init_fit(pc, config)
    state.t += rng.normal(0, 0.05, state.t.shape)
    state.quat += rng.normal(0, 0.05, state.quat.shape)
    state.quat /= np.linalg.norm(state.quat, axis=1, keepdims=True)
    state.s_log += rng.normal(0, 0.2, state.s_log.shape)
    state.delta_logit += rng.normal(0, 0.5, state.delta_logit.shape)
    state.logits += rng.normal(0, 0.5, state.logits.shape)
    return state


def finite_difference_check(config, seed, h=1e-5, tol=1e-4):
    pc = random_instance(seed)
    state = perturbed_state(pc, config, seed + 1000)
    ctx = opt.freeze_step(state, pc, config, np.random.default_rng(seed + 2000))
    params = state.params()
    _, aux = opt.evaluate_losses(params, pc, config, ctx)
    grads = opt._backward(params, pc, config, ctx, aux)
    worst = 0.0
    for key in opt.PARAM_KEYS:
        g = grads[key]
        if g is None:
            continue
        arr = params[key]
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            orig = arr[ix]
            arr[ix] = orig + h
            lp = opt.evaluate_losses(params, pc, config, ctx)[0].total
            arr[ix] = orig - h
            lm = opt.evaluate_losses(params, pc, config, ctx)[0].total
            arr[ix] = orig
            fd = (lp - lm) / (2.0 * h)
            rel = abs(fd - g[ix]) / max(abs(fd), abs(g[ix]), 1e-8)
            worst = max(worst, rel)
    assert worst < tol, f"worst relative gradient error {worst}"


class TestInitFit:
    def test_fps_opposite_corner(self):
        corners = np.array(
            [[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float
        )
        pc = cf.PointCloud(points=corners, normals=np.tile([0.0, 0.0, 1.0], (8, 1)))
        state = opt.init_fit(pc, cf.FitConfig(num_cuboids=2, steps=1))
        assert np.allclose(state.t[0], corners[0])
        assert np.allclose(state.t[1], [1, 1, 1])  # farthest from corner 0

    def test_identity_quaternions(self):
        pc = random_instance(0)
        state = opt.init_fit(pc, cf.FitConfig(num_cuboids=4, steps=1))
        assert np.allclose(state.quat, np.tile([1, 0, 0, 0], (4, 1)))

    def test_deterministic(self):
        pc = random_instance(1)
        cfg = cf.FitConfig(num_cuboids=3, steps=1)
        s1 = opt.init_fit(pc, cfg)
        s2 = opt.init_fit(pc, cfg)
        for key in opt.PARAM_KEYS:
            assert np.array_equal(getattr(s1, key), getattr(s2, key))

    def test_scale_from_bbox_diagonal(self):
        pc = random_instance(2)
        diag = np.linalg.norm(pc.points.max(axis=0) - pc.points.min(axis=0))
        state = opt.init_fit(pc, cf.FitConfig(num_cuboids=2, steps=1))
        assert np.allclose(np.exp(state.s_log), 0.1 * diag)

    def test_more_cuboids_than_points_warns(self):
        pc = cf.PointCloud(points=np.eye(3), normals=np.tile([0, 0, 1.0], (3, 1)))
        with pytest.warns(UserWarning):
            state = opt.init_fit(pc, cf.FitConfig(num_cuboids=5, steps=1))
        assert state.t.shape == (5, 3)

    def test_zero_logit_init_option(self):
        pc = random_instance(3)
        state = opt.init_fit(
            pc, cf.FitConfig(num_cuboids=3, steps=1, logit_init="zero")
        )
        assert np.array_equal(state.logits, np.zeros((3, len(pc))))


class TestGradients:
    def test_zero_gradient_at_fitted_point(self):
        pc = cf.PointCloud(points=[[0.5, 0, 0]], normals=[[1, 0, 0]])
        cfg = cf.FitConfig(num_cuboids=1, steps=1, sigma_s=0.0)
        state = opt.init_fit(pc, cfg)
        state.t = np.array([[0.0, 0.0, 0.0]])
        state.s_log = np.log(np.array([[0.5, 0.5, 0.5]]))
        grads = opt.compute_gradients(state, pc, cfg, np.random.default_rng(0))
        assert np.allclose(grads["t"], 0.0)
        assert np.allclose(grads["quat"], 0.0)
        assert np.allclose(grads["s_log"], 0.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences_default_variant(self, seed):
        finite_difference_check(
            cf.FitConfig(num_cuboids=3, steps=1, sigma_s=0.0), seed
        )

    def test_finite_differences_with_sampling(self):
        finite_difference_check(cf.FitConfig(num_cuboids=3, steps=1, sigma_s=0.05), 7)

    def test_finite_differences_mindist_projection(self):
        finite_difference_check(
            cf.FitConfig(num_cuboids=3, steps=1, sigma_s=0.0, projection="mindist"), 8
        )

    def test_finite_differences_p2c_dis(self):
        finite_difference_check(
            cf.FitConfig(num_cuboids=3, steps=1, sigma_s=0.0, variant="p2c-dis"), 9
        )

    def test_finite_differences_chamfer_dis(self):
        finite_difference_check(
            cf.FitConfig(num_cuboids=3, steps=1, variant="chamfer-dis"), 10
        )

    def test_finite_differences_ungated_compact(self):
        finite_difference_check(
            cf.FitConfig(num_cuboids=3, steps=1, sigma_s=0.0,
                         compact_gate_tau=None), 11
        )

    def test_compactness_through_softmax_coverage(self):
        # isolate the compactness path: lambda1 only, gate off
        cfg = cf.FitConfig(num_cuboids=3, steps=1, sigma_s=0.0, lambda1=0.7,
                           lambda2=0.0, compact_gate_tau=None)
        pc = random_instance(12)
        state = perturbed_state(pc, cfg, 13)
        ctx = opt.freeze_step(state, pc, cfg, np.random.default_rng(14))
        params = state.params()
        _, aux = opt.evaluate_losses(params, pc, cfg, ctx)
        grads = opt._backward(params, pc, cfg, ctx, aux)

        def compact_only(logits):
            from cuboidfit.assignment import coverage, softmax_columns
            w = coverage(softmax_columns(logits))
            return cfg.lambda1 * float(np.sqrt(w + cfg.eps_sps).sum() ** 2)

        h = 1e-5
        col = 4
        for row in range(3):
            orig = params["logits"][row, col]
            params["logits"][row, col] = orig + h
            lp_full = opt.evaluate_losses(params, pc, cfg, ctx)[0]
            params["logits"][row, col] = orig - h
            lm_full = opt.evaluate_losses(params, pc, cfg, ctx)[0]
            params["logits"][row, col] = orig
            fd_compact = (
                cfg.lambda1 * lp_full.compact - cfg.lambda1 * lm_full.compact
            ) / (2 * h)
            fd_total = (lp_full.total - lm_full.total) / (2 * h)
            assert abs(fd_total - grads["logits"][row, col]) < 1e-7
            # compact path alone is also consistent with its own oracle
            lp = compact_only(_with(params["logits"], row, col, orig + h))
            lm = compact_only(_with(params["logits"], row, col, orig - h))
            assert abs((lp - lm) / (2 * h) - fd_compact) < 1e-7

    def test_nonfinite_gradient_aborts_with_parameter_name(self):
        pc = random_instance(15)
        cfg = cf.FitConfig(num_cuboids=2, steps=1)
        state = opt.init_fit(pc, cfg)
        state.t[0, 0] = np.nan
        with pytest.raises(NumericalError) as err:
            opt.compute_gradients(state, pc, cfg, np.random.default_rng(0))
        assert "'t'" in str(err.value) or "'quat'" in str(err.value)


def _with(arr, row, col, value):
    out = arr.copy()
    out[row, col] = value
    return out


class TestAdamStep:
    def _state(self):
        pc = random_instance(20)
        cfg = cf.FitConfig(num_cuboids=2, steps=1)
        return opt.init_fit(pc, cfg), cfg

    def test_zero_gradient_no_motion(self):
        state, cfg = self._state()
        before = {k: getattr(state, k).copy() for k in opt.PARAM_KEYS}
        grads = {k: np.zeros_like(getattr(state, k)) for k in opt.PARAM_KEYS}
        opt.adam_step(state, grads, cfg)
        assert state.step == 1
        for key in opt.PARAM_KEYS:
            assert np.allclose(getattr(state, key), before[key], atol=1e-15)

    def test_first_step_matches_scalar_oracle(self):
        state, cfg = self._state()
        g = 0.37
        grads = {k: np.zeros_like(getattr(state, k)) for k in opt.PARAM_KEYS}
        grads["t"] = np.full_like(state.t, g)
        t_before = state.t.copy()
        opt.adam_step(state, grads, cfg)
        # bias-corrected first step: m_hat = g, v_hat = g^2
        expected = cfg.lr * g / (abs(g) + cfg.adam_eps)
        assert np.allclose(t_before - state.t, expected, rtol=1e-9)

    def test_quaternion_renormalized(self):
        state, cfg = self._state()
        rng = np.random.default_rng(21)
        grads = {k: rng.normal(size=getattr(state, k).shape)
                 for k in opt.PARAM_KEYS}
        for _ in range(5):
            opt.adam_step(state, grads, cfg)
        norms = np.linalg.norm(state.quat, axis=1)
        assert np.all(np.abs(norms - 1.0) < 1e-9)

    def test_logits_skipped_when_none(self):
        state, cfg = self._state()
        logits_before = state.logits.copy()
        grads = {k: np.ones_like(getattr(state, k)) for k in opt.PARAM_KEYS}
        grads["logits"] = None
        opt.adam_step(state, grads, cfg)
        assert np.array_equal(state.logits, logits_before)


class TestFitBasics:
    def test_deterministic_results(self):
        pc, _, _ = cf.synth_shape("cuboid", n_points=256, seed=3)
        cfg = cf.FitConfig(num_cuboids=2, steps=40, seed=5)
        r1 = cf.fit(pc, cfg)
        r2 = cf.fit(pc, cfg)
        for a, b in zip(r1.cuboids, r2.cuboids):
            assert np.array_equal(a.t, b.t)
            assert np.array_equal(a.r, b.r)
            assert np.array_equal(a.s_log, b.s_log)
        assert np.array_equal(r1.assignment, r2.assignment)
        assert np.array_equal(r1.labels, r2.labels)
        assert [b.total for b in r1.loss_trace] == [b.total for b in r2.loss_trace]

    def test_trace_and_result_shapes(self):
        pc, _, _ = cf.synth_shape("cuboid", n_points=128, seed=4)
        cfg = cf.FitConfig(num_cuboids=3, steps=10, seed=0)
        res = cf.fit(pc, cfg)
        assert len(res.loss_trace) == 10
        assert res.assignment.shape == (3, 128)
        assert res.labels.shape == (128,)
        assert res.coverage.shape == (3,)
        assert set(np.unique(res.existence)) <= {0, 1}
        assert res.n_active == int(res.existence.sum())
        assert np.all((res.deltas > 0) & (res.deltas < 1))

    def test_labels_match_assignment_argmax(self):
        pc, _, _ = cf.synth_shape("stack", n_points=300, seed=5)
        res = cf.fit(pc, cf.FitConfig(num_cuboids=4, steps=25, seed=1))
        assert np.array_equal(res.labels, np.argmax(res.assignment, axis=0))

    def test_assignment_column_stochastic_and_quats_unit(self):
        pc, _, _ = cf.synth_shape("table", n_points=256, seed=6)
        res = cf.fit(pc, cf.FitConfig(num_cuboids=4, steps=30, seed=2))
        assert np.allclose(res.assignment.sum(axis=0), 1.0, atol=1e-9)
        for c in res.cuboids:
            assert abs(np.linalg.norm(c.r) - 1.0) < 1e-9

    def test_batch_points_subsampling(self):
        pc, _, _ = cf.synth_shape("cuboid", n_points=512, seed=7)
        cfg = cf.FitConfig(num_cuboids=2, steps=15, batch_points=64, seed=3)
        res = cf.fit(pc, cfg)
        assert res.assignment.shape == (2, 512)  # final pass covers everything

    def test_divergence_aborts(self):
        pc, _, _ = cf.synth_shape("cuboid", n_points=64, seed=8)
        cfg = cf.FitConfig(num_cuboids=2, steps=400, lr=1e6, seed=0)
        with pytest.raises(NumericalError):
            cf.fit(pc, cfg)

    def test_variants_run(self):
        pc, _, _ = cf.synth_shape("stack", n_points=200, seed=9)
        for variant in ("p2c-seg", "p2c-dis", "chamfer-dis"):
            res = cf.fit(pc, cf.FitConfig(num_cuboids=3, steps=12,
                                          variant=variant, seed=4))
            assert len(res.loss_trace) == 12

    def test_config_validation(self):
        with pytest.raises(InvalidConfigError):
            cf.FitConfig(num_cuboids=0).validate()
        with pytest.raises(InvalidConfigError):
            cf.FitConfig(steps=0).validate()
        with pytest.raises(InvalidConfigError):
            cf.FitConfig(lr=0.0).validate()
        with pytest.raises(InvalidConfigError):
            cf.FitConfig(sigma_s=-0.1).validate()
        with pytest.raises(InvalidConfigError):
            cf.FitConfig(variant="nope").validate()
        with pytest.raises(InvalidConfigError):
            cf.FitConfig(projection="sideways").validate()

    def test_normals_estimated_when_missing(self):
        rng = np.random.default_rng(22)
        raw = rng.normal(size=(300, 3))
        pts = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        pc = cf.PointCloud(points=pts)
        res = cf.fit(pc, cf.FitConfig(num_cuboids=2, steps=5, seed=0))
        assert len(res.loss_trace) == 5
