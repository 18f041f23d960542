import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poisonbench import tensor as T
from poisonbench.errors import PoisonBenchError, ShapeError
from poisonbench.perturb import (
    LinfBall,
    PatchSpec,
    apply_patch,
    blend_watermark,
    pgd_maximize_loss,
    project_linf,
    project_simplex,
)


def brute_force_simplex(c, coarse=1e-3, fine=1e-5):
    """Two-stage grid enumeration of the nearest simplex point (J <= 3)."""
    c = np.asarray(c, dtype=np.float64)
    j = c.size
    if j == 1:
        return np.array([1.0])

    def grid_candidates(step, center=None, radius=None):
        ax = np.arange(0.0, 1.0 + step, step)
        if center is not None:
            lo = max(0.0, center[0] - radius)
            hi = min(1.0, center[0] + radius)
            ax0 = np.arange(lo, hi + step, step)
        else:
            ax0 = ax
        if j == 2:
            pts = np.stack([ax0, 1.0 - ax0], axis=1)
        else:
            if center is not None:
                lo1 = max(0.0, center[1] - radius)
                hi1 = min(1.0, center[1] + radius)
                ax1 = np.arange(lo1, hi1 + step, step)
            else:
                ax1 = ax
            g0, g1 = np.meshgrid(ax0, ax1, indexing="ij")
            g0, g1 = g0.ravel(), g1.ravel()
            keep = g0 + g1 <= 1.0 + 1e-12
            pts = np.stack([g0[keep], g1[keep], 1.0 - g0[keep] - g1[keep]], axis=1)
        return pts

    pts = grid_candidates(coarse)
    best = pts[np.argmin(((pts - c) ** 2).sum(axis=1))]
    pts = grid_candidates(fine, center=best, radius=2 * coarse)
    return pts[np.argmin(((pts - c) ** 2).sum(axis=1))]


def test_project_linf_inside_unchanged():
    center = np.full((3, 4, 4), 0.5, dtype=np.float32)
    ball = LinfBall(center, 8 / 255)
    x = center + 0.01
    out = project_linf(x, ball)
    np.testing.assert_array_equal(out, x)


def test_project_linf_clamp_endpoint():
    center = np.full((1, 2, 2), 0.5, dtype=np.float64)
    out = project_linf(np.ones_like(center), LinfBall(center, 8 / 255))
    np.testing.assert_allclose(out, 0.5 + 8 / 255)


def test_project_linf_idempotent_and_feasible():
    rng = np.random.default_rng(0)
    for _ in range(50):
        center = rng.random((3, 5, 5))
        ball = LinfBall(center, float(rng.choice([8 / 255, 16 / 255, 25.5 / 255])))
        x = rng.normal(0.5, 0.6, size=center.shape)
        p1 = project_linf(x, ball)
        p2 = project_linf(p1, ball)
        np.testing.assert_array_equal(p1, p2)
        assert np.abs(p1 - center).max() <= ball.radius + 1e-12
        assert p1.min() >= 0.0 and p1.max() <= 1.0


def test_project_linf_sampling_optimality():
    rng = np.random.default_rng(1)
    center = rng.random((2, 3, 3))
    ball = LinfBall(center, 16 / 255)
    x = rng.normal(0.5, 0.8, size=center.shape)
    proj = project_linf(x, ball)
    d_proj = np.linalg.norm((proj - x).ravel())
    lo = np.maximum(center - ball.radius, 0.0)
    hi = np.minimum(center + ball.radius, 1.0)
    samples = rng.uniform(lo, hi, size=(10_000,) + center.shape)
    d_samples = np.linalg.norm((samples - x).reshape(10_000, -1), axis=1)
    assert d_proj <= d_samples.min() + 1e-9


def test_project_linf_infinite_radius_is_box_clamp():
    center = np.zeros((1, 2, 2))
    out = project_linf(np.array([[[-1.0, 0.5], [2.0, 0.25]]]), LinfBall(center, float("inf")))
    np.testing.assert_array_equal(out, [[[0.0, 0.5], [1.0, 0.25]]])


def test_project_linf_negative_radius_errors():
    with pytest.raises(PoisonBenchError):
        LinfBall(np.zeros((1, 1, 1)), -0.1)


def test_project_simplex_feasible_point_unchanged():
    np.testing.assert_allclose(project_simplex([0.5, 0.5]), [0.5, 0.5])


def test_project_simplex_vertex_case_vs_brute_force():
    out = project_simplex([1.2, -0.2])
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)
    bf = brute_force_simplex([1.2, -0.2], coarse=1e-4)
    assert np.abs(out - bf).max() < 1e-3


def test_project_simplex_degenerate():
    np.testing.assert_array_equal(project_simplex([-47.0]), [1.0])
    with pytest.raises(ShapeError):
        project_simplex([])


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 3),
    st.integers(0, 2 ** 32 - 1),
)
def test_project_simplex_matches_brute_force(j, seed):
    rng = np.random.default_rng(seed)
    c = rng.normal(0.0, 1.5, size=j)
    out = project_simplex(c)
    assert abs(out.sum() - 1.0) < 1e-9
    assert out.min() >= 0.0
    bf = brute_force_simplex(c)
    assert np.abs(out - bf).max() < 1e-3


def test_apply_patch_idempotent_and_support():
    rng = np.random.default_rng(2)
    img = rng.random((3, 32, 32)).astype(np.float32)
    patch = PatchSpec.checkerboard(size=3)
    once = apply_patch(img, patch)
    twice = apply_patch(once, patch)
    np.testing.assert_array_equal(once, twice)
    changed = once != img
    assert changed.sum() <= 3 * 9
    # lower-right placement: last 3 rows and columns only
    assert not changed[:, :29, :].any()
    assert not changed[:, :, :29].any()


def test_apply_patch_out_of_bounds():
    patch = PatchSpec.checkerboard(size=8)
    with pytest.raises(ShapeError):
        apply_patch(np.zeros((3, 5, 5)), patch)


def test_blend_watermark_endpoints():
    base = np.zeros((3, 4, 4))
    target = np.ones((3, 4, 4))
    np.testing.assert_array_equal(blend_watermark(base, target, 0.0), base)
    np.testing.assert_array_equal(blend_watermark(base, target, 1.0), target)
    np.testing.assert_allclose(blend_watermark(base, target, 0.3), np.full_like(base, 0.3))
    with pytest.raises(PoisonBenchError):
        blend_watermark(base, target, 1.5)


class _LinearModel:
    """logits = flatten(x) @ W.T with fixed weights."""

    def __init__(self, weights):
        self.w = T.Tensor(np.asarray(weights, dtype=np.float64))

    def logits_from_pixels(self, x):
        return T.matmul(T.flatten(x), T.Tensor(self.w.data.T))


def _ce(model, x, label):
    with T.no_grad():
        return T.softmax_cross_entropy(model.logits_from_pixels(T.Tensor(x[None])), [label]).item()


def test_pgd_zero_steps_returns_start():
    model = _LinearModel(np.ones((2, 12)))
    x0 = np.full((3, 2, 2), 0.5)
    out = pgd_maximize_loss(x0, [0], model, steps=0, ball=LinfBall(x0, 8 / 255))
    np.testing.assert_array_equal(out, x0)


def test_pgd_ball_constraint_and_ascent():
    rng = np.random.default_rng(3)
    model = _LinearModel(rng.standard_normal((4, 27)))
    x0 = rng.random((3, 3, 3))
    ball = LinfBall(x0, 16 / 255)
    out = pgd_maximize_loss(x0, [1], model, steps=20, step_size=4 / 255, ball=ball)
    assert np.abs(out - x0).max() <= ball.radius + 1e-12
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert _ce(model, out, 1) >= _ce(model, x0, 1)


def test_pgd_matches_linear_closed_form():
    # two-class linear model: the epsilon-optimal point is
    # x0 + eps * sign(w_other - w_label), saturated per pixel
    rng = np.random.default_rng(4)
    w = rng.standard_normal((2, 12))
    model = _LinearModel(w)
    x0 = np.full((3, 2, 2), 0.5)
    eps = 8 / 255
    ball = LinfBall(x0, eps)
    out = pgd_maximize_loss(x0, [0], model, steps=20, step_size=4 / 255, ball=ball)
    direction = np.sign(w[1] - w[0]).reshape(3, 2, 2)
    np.testing.assert_allclose(out, x0 + eps * direction, atol=1e-12)


def test_patch_file_round_trip(tmp_path):
    patch = PatchSpec.checkerboard(size=5, offset=(1, 2))
    p = tmp_path / "patch.bin"
    patch.save(p)
    loaded = PatchSpec.load(p)
    np.testing.assert_array_equal(loaded.pixels, patch.pixels)
    assert loaded.offset == (1, 2)
