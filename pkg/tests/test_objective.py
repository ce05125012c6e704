import numpy as np
import pytest

from dwimoco import _kernels
from dwimoco.objective import (
    EmptyRoiError,
    LossBreakdown,
    LossWeights,
    loss_and_gradient,
    loss_gradient,
    model_fit_loss,
    per_term_gradients,
    similarity_loss,
    smoothness_loss,
    total_loss,
)
from dwimoco.phantom import PhantomSpec, make_phantom
from dwimoco.signal_model import ParameterMaps, reconstruct
from dwimoco.volume import (
    BValueSeries,
    DimensionMismatchError,
    DisplacementField,
    RoiMask,
    ScalarVolume,
)

DIMS = (10, 9, 7)
BVALUES = (0.0, 100.0, 300.0, 600.0)


@pytest.fixture(scope="module")
def setup():
    """Smooth fixed/moving pair with residuals bounded away from L1 ties."""
    maps, roi = make_phantom(PhantomSpec(dims=DIMS, roi_margin=1.0, boundary_sigma=0.8))
    fixed = reconstruct(maps, BVALUES)
    fac = 0.9 + 0.03 * np.sin(np.arange(DIMS[0]) / 3.0)[:, None, None] * np.ones(DIMS)
    moving = BValueSeries(BVALUES, tuple(ScalarVolume(v.data * fac) for v in fixed.volumes))
    u = np.zeros((len(BVALUES),) + DIMS + (3,))
    for i in range(len(BVALUES)):
        for c in range(3):
            u[i, ..., c] = 0.3 + 0.2 * np.sin(
                2 * np.pi * (np.arange(DIMS[0])[:, None, None] / DIMS[0] + 0.3 * c + 0.17 * i)
            )
    fields = [DisplacementField(u[i]) for i in range(len(BVALUES))]
    return maps, roi, fixed, moving, fields, u


def constant_series(dims, value, bvalues=(0.0, 200.0)):
    vols = tuple(ScalarVolume(np.full(dims, value)) for _ in bvalues)
    return BValueSeries(bvalues, vols)


class TestSimilarityLoss:
    def test_identical_series_zero(self, setup):
        _, _, fixed, _, _, _ = setup
        assert similarity_loss(fixed, fixed) == 0.0

    def test_constant_difference(self):
        a = constant_series((4, 3, 2), 1.0)
        b = constant_series((4, 3, 2), 0.5)
        assert similarity_loss(a, b) == pytest.approx(0.5, rel=1e-14)

    def test_l1_homogeneity(self, setup):
        _, _, fixed, moving, _, _ = setup
        base = similarity_loss(fixed, moving)
        fixed3 = BValueSeries(fixed.bvalues, tuple(ScalarVolume(3 * v.data) for v in fixed.volumes))
        moving3 = BValueSeries(
            moving.bvalues, tuple(ScalarVolume(3 * v.data) for v in moving.volumes)
        )
        assert similarity_loss(fixed3, moving3) == pytest.approx(3 * base, rel=1e-12)

    def test_dims_must_match(self):
        with pytest.raises(DimensionMismatchError):
            similarity_loss(constant_series((3, 3, 3), 1.0), constant_series((3, 3, 2), 1.0))


class TestSmoothnessLoss:
    def test_constant_field_is_free(self):
        field = DisplacementField(np.full((5, 4, 3, 3), 7.0))
        assert smoothness_loss(field) == 0.0
        assert smoothness_loss(field, normalize=False) == 0.0

    def test_unit_shear_raw_sum_counts_voxels(self):
        dims = (6, 5, 4)
        u = np.zeros(dims + (3,))
        u[..., 0] = np.arange(dims[0], dtype=float)[:, None, None]
        field = DisplacementField(u)
        # d u_x / d x == 1 everywhere (one-sided borders are exact on a ramp)
        assert smoothness_loss(field, normalize=False) == pytest.approx(
            np.prod(dims), rel=1e-12
        )
        assert smoothness_loss(field, normalize=True) == pytest.approx(1.0, rel=1e-12)

    def test_quadratic_scaling(self, rng):
        u = rng.normal(0, 1, (5, 4, 3, 3))
        f1 = DisplacementField(u)
        f2 = DisplacementField(2 * u)
        assert smoothness_loss(f2) == pytest.approx(4 * smoothness_loss(f1), rel=1e-12)

    def test_nonconstant_affine_positive(self):
        dims = (4, 4, 3)
        u = np.zeros(dims + (3,))
        u[..., 1] = 0.3 * np.arange(dims[2], dtype=float)[None, None, :]
        assert smoothness_loss(DisplacementField(u)) > 0


class TestModelFitLoss:
    def test_zero_on_reconstruction(self, setup):
        maps, roi, fixed, _, _, _ = setup
        assert model_fit_loss(fixed, maps, roi) == pytest.approx(0.0, abs=1e-24)

    def test_single_voxel_hand_value(self):
        dims = (3, 3, 3)
        bvals = (0.0, 500.0)
        log_s0 = np.zeros(dims)
        adc = np.zeros(dims)
        maps = ParameterMaps(ScalarVolume(log_s0), ScalarVolume(adc))
        # model predicts log S = 0; choose warped signals with log residuals +-0.1
        mask = np.zeros(dims, dtype=bool)
        mask[1, 1, 1] = True
        v0 = np.ones(dims)
        v1 = np.ones(dims)
        v0[1, 1, 1] = np.exp(-0.1)
        v1[1, 1, 1] = np.exp(0.1)
        warped = BValueSeries(bvals, (ScalarVolume(v0), ScalarVolume(v1)))
        loss = model_fit_loss(warped, maps, RoiMask(mask))
        assert loss == pytest.approx(0.01, rel=1e-12)

    def test_invariant_to_outside_roi(self, setup, rng):
        maps, roi, fixed, _, _, _ = setup
        base = model_fit_loss(fixed, maps, roi)
        vols = []
        for v in fixed.volumes:
            data = v.data.copy()
            data[~roi.data] = rng.random((~roi.data).sum()) + 0.5
            vols.append(ScalarVolume(data))
        perturbed = BValueSeries(fixed.bvalues, tuple(vols))
        assert model_fit_loss(perturbed, maps, roi) == pytest.approx(base, abs=1e-24)

    def test_empty_roi_error(self, setup):
        maps, _, fixed, _, _, _ = setup
        with pytest.raises(EmptyRoiError):
            model_fit_loss(fixed, maps, RoiMask(np.zeros(DIMS, dtype=bool)))


class TestTotalLoss:
    def test_global_minimum_is_zero(self, setup):
        maps, roi, fixed, _, _, _ = setup
        zero = [DisplacementField.zero(DIMS) for _ in BVALUES]
        bd = total_loss(fixed, fixed, zero, maps, roi, LossWeights(0.01, 1000.0))
        assert bd.similarity == 0.0
        assert bd.smooth == 0.0
        assert bd.model_fit == pytest.approx(0.0, abs=1e-24)
        assert bd.total == pytest.approx(0.0, abs=1e-20)

    def test_zero_weights_reduce_to_similarity(self, setup):
        maps, roi, fixed, moving, fields, _ = setup
        bd = total_loss(fixed, moving, fields, maps, roi, LossWeights(0.0, 0.0))
        assert bd.total == bd.similarity

    def test_weighted_sum_identity(self, setup):
        maps, roi, fixed, moving, fields, _ = setup
        w = LossWeights(0.01, 1000.0)
        bd = total_loss(fixed, moving, fields, maps, roi, w)
        assert bd.total == bd.similarity + w.alpha1 * bd.smooth + w.alpha2 * bd.model_fit

    def test_paper_weight_arithmetic(self):
        bd = LossBreakdown(0.2, 3.0, 1e-4, 0.2 + 0.01 * 3.0 + 1000.0 * 1e-4)
        assert bd.total == pytest.approx(0.33, rel=1e-12)

    def test_fused_path_matches_reference(self, setup):
        maps, roi, fixed, moving, fields, u = setup
        w = LossWeights(0.01, 1000.0)
        ref = total_loss(fixed, moving, fields, maps, roi, w)
        fused, _ = loss_and_gradient(fixed, moving, u, maps, roi, w)
        assert fused.similarity == pytest.approx(ref.similarity, rel=1e-12)
        assert fused.smooth == pytest.approx(ref.smooth, rel=1e-12)
        assert fused.model_fit == pytest.approx(ref.model_fit, rel=1e-12)


def _fd_term(term, fixed, moving, maps, roi, u, i, c, idx, h=1e-3):
    up = u.copy()
    up[(i,) + idx + (c,)] += h
    dn = u.copy()
    dn[(i,) + idx + (c,)] -= h
    w = LossWeights(0.01, 1000.0)
    f_up = [DisplacementField(up[j]) for j in range(u.shape[0])]
    f_dn = [DisplacementField(dn[j]) for j in range(u.shape[0])]
    t_up = total_loss(fixed, moving, f_up, maps, roi, w)
    t_dn = total_loss(fixed, moving, f_dn, maps, roi, w)
    return (getattr(t_up, term) - getattr(t_dn, term)) / (2 * h)


class TestGradients:
    def test_zero_gradient_at_global_minimum(self, setup):
        maps, roi, fixed, _, _, _ = setup
        zero = np.zeros((len(BVALUES),) + DIMS + (3,))
        _, grad = loss_and_gradient(fixed, fixed, zero, maps, roi, LossWeights(0.01, 1000.0))
        np.testing.assert_allclose(grad, 0.0, rtol=0, atol=1e-18)

    @pytest.mark.parametrize("term", ["similarity", "smooth", "model_fit"])
    def test_terms_match_finite_differences(self, setup, rng, term):
        maps, roi, fixed, moving, fields, u = setup
        grads = per_term_gradients(fixed, moving, fields, maps, roi)[term]
        n_b = len(BVALUES)
        worst = 0.0
        checked = 0
        while checked < 60:
            i = int(rng.integers(0, n_b))
            c = int(rng.integers(0, 3))
            if term == "model_fit":
                cand = np.argwhere(roi.data)
                p = tuple(int(v) for v in cand[rng.integers(0, len(cand))])
            else:
                p = tuple(int(rng.integers(1, d - 1)) for d in DIMS)
            a = grads[(i,) + p + (c,)]
            f = _fd_term(term, fixed, moving, maps, roi, u, i, c, p)
            rel = abs(a - f) / max(abs(a), abs(f), 1e-12)
            worst = max(worst, rel)
            checked += 1
        assert worst < 1e-4, f"{term}: worst rel err {worst}"

    def test_total_gradient_is_weighted_sum_of_terms(self, setup):
        maps, roi, fixed, moving, fields, u = setup
        w = LossWeights(0.01, 1000.0)
        _, grad = loss_and_gradient(fixed, moving, u, maps, roi, w)
        terms = per_term_gradients(fixed, moving, fields, maps, roi)
        combo = terms["similarity"] + w.alpha1 * terms["smooth"] + w.alpha2 * terms["model_fit"]
        np.testing.assert_allclose(grad, combo, rtol=1e-9, atol=1e-15)

    def test_loss_gradient_public_wrapper(self, setup):
        maps, roi, fixed, moving, fields, u = setup
        w = LossWeights(0.01, 1000.0)
        grads = loss_gradient(fixed, moving, fields, maps, roi, w)
        _, stacked = loss_and_gradient(fixed, moving, u, maps, roi, w)
        assert len(grads) == len(BVALUES)
        for i, g in enumerate(grads):
            np.testing.assert_array_equal(g, stacked[i])

    def test_smooth_gradient_vanishes_for_affine_interior(self):
        # discrete Laplacian of a linear field is zero away from borders
        dims = (7, 6, 5)
        u = np.zeros(dims + (3,))
        u[..., 0] = np.arange(dims[0], dtype=float)[:, None, None]
        fixed = constant_series(dims, 1.0)
        fields = [DisplacementField(u) for _ in fixed.bvalues]
        g = per_term_gradients(
            fixed,
            fixed,
            fields,
            ParameterMaps(ScalarVolume(np.zeros(dims)), ScalarVolume(np.zeros(dims))),
            RoiMask(np.ones(dims, dtype=bool)),
        )["smooth"]
        np.testing.assert_allclose(g[0, 2:-2, 2:-2, 2:-2], 0.0, rtol=0, atol=1e-12)
        assert np.abs(g[0]).max() > 0  # borders carry the one-sided terms

    def test_alpha2_zero_never_reads_maps(self, setup):
        class Boom:
            def __getattr__(self, name):
                raise AssertionError("maps were read")

        _, roi, fixed, moving, _, u = setup
        bd, _ = loss_and_gradient(fixed, moving, u, Boom(), roi, LossWeights(0.01, 0.0))
        assert bd.model_fit == 0.0


class TestAdjointProperty:
    def test_axis_diff_adjoint_dot_product(self, rng):
        for axis in range(3):
            a = rng.normal(0, 1, (6, 5, 4))
            w = rng.normal(0, 1, (6, 5, 4))
            lhs = float((_kernels.axis_diff_numpy(a, axis) * w).sum())
            rhs = float((a * _kernels.axis_diff_adjoint_numpy(w, axis)).sum())
            assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_jit_matches_numpy_reference(self, rng):
        for dims in [(2, 2, 2), (3, 5, 2), (8, 7, 6)]:
            u = rng.normal(0, 1, dims + (3,))
            g1 = np.zeros_like(u)
            g2 = np.zeros_like(u)
            l1 = _kernels.smooth_loss_grad(u, g1, 0.37)
            l2 = _kernels.smooth_loss_grad_numpy(u, g2, 0.37)
            assert l1 == pytest.approx(l2, rel=1e-12)
            np.testing.assert_allclose(g1, g2, rtol=1e-10, atol=1e-14)

    def test_match_terms_jit_equals_numpy(self, setup):
        maps, roi, fixed, moving, _, u = setup
        pred = maps.log_s0.data - BVALUES[2] * maps.adc.data
        g1 = np.zeros(DIMS + (3,))
        g2 = np.zeros(DIMS + (3,))
        s1, m1 = _kernels._match_terms_jit(
            moving.volumes[2].data, u[2], fixed.volumes[2].data, pred, roi.data,
            1e-6, 0.3, 0.7, g1,
        ) if _kernels.HAVE_NUMBA else (None, None)
        s2, m2 = _kernels.match_terms_numpy(
            moving.volumes[2].data, u[2], fixed.volumes[2].data, pred, roi.data,
            1e-6, 0.3, 0.7, g2,
        )
        if s1 is not None:
            assert s1 == pytest.approx(s2, rel=1e-12)
            assert m1 == pytest.approx(m2, rel=1e-12)
            np.testing.assert_allclose(g1, g2, rtol=1e-10, atol=1e-15)

    def test_warp_jit_equals_numpy(self, rng):
        vol = rng.random((6, 5, 7))
        disp = rng.uniform(-3, 3, (6, 5, 7, 3))
        w1, d1 = _kernels.warp3d_with_point_grad_numpy(vol, disp)
        w2, d2 = _kernels.warp3d_with_point_grad(vol, disp)
        np.testing.assert_allclose(w1, w2, rtol=1e-13, atol=0)
        np.testing.assert_allclose(d1, d2, rtol=1e-13, atol=1e-15)


class TestLossWeights:
    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            LossWeights(-0.1, 1.0)
        with pytest.raises(ValueError):
            LossWeights(0.1, np.inf)
