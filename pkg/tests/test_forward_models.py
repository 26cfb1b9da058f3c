import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fmdiff.forward_models import (
    CameraPose,
    LinearModel,
    MotionSignal,
    PatchCoords,
    RenderModel,
    SynthesizeModel,
    ToyGenerator,
    ToyScene,
    WarpModel,
    encode_scene,
    linear_map,
    render,
    splat_taps,
    synthesize,
    warp,
)
from fmdiff.gradcheck import MODEL_CASES, MODEL_TOL, check_gradient, finite_difference, reverse_mode
from fmdiff.tensor import ShapeError

# 16 samples over a ray of length 2*sqrt(2): 12 of them fall inside the unit box along a row
INSIDE, DELTA = 12, 2 * np.sqrt(2) / 16
# 1 - exp(-sigma * 12 * delta) for sigma = 0.5 and 2.0
OPACITY = {0.5: 0.6537728345381287, 2.0: 0.9856304039095609}


def uniform_scene(sigma, color, H=4, W=4):
    return encode_scene(np.full((H, W), sigma), np.broadcast_to(color, (H, W, 3)))


# --- render ----------------------------------------------------------------


def test_zero_density_is_black():
    scene = encode_scene(np.zeros((4, 4)), np.full((4, 4, 3), 0.7))
    assert np.allclose(render(scene, CameraPose(0.3)).data, 0, atol=1e-10)


@pytest.mark.parametrize("sigma", [0.5, 2.0])
def test_homogeneous_slab_matches_closed_form(sigma):
    c = np.array([0.2, 0.5, 0.9])
    img = render(uniform_scene(sigma, c), CameraPose(0.0), n_samples=16).data
    np.testing.assert_allclose(img, np.broadcast_to(OPACITY[sigma] * c, img.shape), atol=1e-12)
    assert abs(OPACITY[sigma] - (1 - np.exp(-sigma * INSIDE * DELTA))) < 1e-15


def test_render_gradient_vs_finite_differences():
    fm = RenderModel()
    grid = np.random.default_rng(0).normal(0, 1, (1, 4, 4, 4))
    pose = np.array([[1.1, 0.05]])
    ad = reverse_mode(lambda t: fm.apply(t[0], pose).sum(), [grid])[0]
    fd = finite_difference(lambda a: fm.apply(a[0], pose).sum().item(), [grid])[0]
    assert np.linalg.norm(ad - fd) / np.linalg.norm(fd) < 1e-4


def test_rays_missing_the_box_give_black():
    img = render(uniform_scene(3.0, [1, 1, 1]), CameraPose(0.0, offset=5.0)).data
    assert np.array_equal(img, np.zeros_like(img))


def test_render_is_deterministic_and_batched():
    fm = RenderModel()
    S = np.random.default_rng(1).normal(size=(3, 4, 4, 4))
    phi = np.array([[0.0, 0.0], [1.0, 0.1], [2.0, -0.1]])
    a, b = fm.apply(S, phi).data, fm.apply(S, phi).data
    assert np.array_equal(a, b)
    for i in range(3):
        assert np.array_equal(fm(S[i], phi[i]).data, a[i])


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 5.0), st.floats(0.0, 5.0), st.floats(0, 2 * np.pi))
def test_render_monotone_in_density(s1, s2, angle):
    lo, hi = sorted((s1, s2))
    white = np.ones(3)
    a = render(uniform_scene(lo, white, 2, 2), CameraPose(angle)).data
    b = render(uniform_scene(hi, white, 2, 2), CameraPose(angle)).data
    assert np.all(b >= a - 1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 3, 4), elements=st.floats(-30, 30)))
def test_scene_decodes_to_valid_values(grid):
    density, color = ToyScene(grid).decoded()
    assert np.all(density >= 0)
    assert np.all((color >= 0) & (color <= 1))


# --- warp ------------------------------------------------------------------


def test_zero_motion_is_identity():
    rng = np.random.default_rng(0)
    sig = MotionSignal(rng.uniform(size=(8, 3)), np.zeros(8))
    for phi in (-2.0, 0.0, 0.7, 3.0):
        assert np.array_equal(warp(sig, phi).data, sig.color)


def test_integer_shift_moves_lit_pixel():
    color = np.zeros((8, 3))
    color[3] = [0.9, 0.4, 0.1]
    out = warp(MotionSignal(color, np.ones(8)), 1.0).data
    expect = np.zeros((8, 3))
    expect[4] = color[3]
    assert np.array_equal(out, expect)


def dense_warp(color, motion, phi, eps=1e-8):
    """Test oracle: explicit destination-by-source kernel matrix."""
    W = len(color)
    K = np.zeros((W, W))
    for s in range(W):
        p = s + phi * motion[s]
        for d in range(W):
            K[d, s] = max(0.0, 1 - abs(d - p))
    den = K.sum(1)
    return (K @ color) / np.maximum(den, eps)[:, None]


def test_half_pixel_shift_against_dense_oracle():
    color = np.zeros((8, 3))
    color[3] = [1.0, 0.5, 0.25]
    out = warp(MotionSignal(color, np.full(8, 0.5)), 1.0).data
    np.testing.assert_allclose(out, dense_warp(color, np.full(8, 0.5), 1.0), atol=1e-12)
    # both neighbours of the lit pixel received half of its weight
    taps = splat_taps(np.array([3.5]), 8)
    assert [(int(d[0]), float(w.data[0])) for d, w in taps] == [(3, 0.5), (4, 0.5)]


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 10, elements=st.floats(-1.5, 1.5)), st.floats(-1.5, 1.5), st.integers(0, 2**16))
def test_warp_matches_dense_oracle(motion, phi, seed):
    color = np.random.default_rng(seed).uniform(size=(10, 3))
    np.testing.assert_allclose(warp(MotionSignal(color, motion), phi).data, dense_warp(color, motion, phi), atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 16, elements=st.floats(0, 15)))
def test_splat_conserves_mass_for_interior_destinations(pos):
    taps = splat_taps(pos, 16)
    total = sum(w.data for _, w in taps)
    np.testing.assert_allclose(total, 1.0, atol=1e-12)


def test_warp_model_assembles_context_colors():
    fm = WarpModel(8)
    ctx = np.random.default_rng(0).uniform(size=(2, 8, 3))
    raw = np.zeros((2, 8, 1))
    S = fm.assemble(raw, ctx).data
    assert S.shape == (2,) + fm.signal_shape
    assert np.array_equal(fm.apply(S, np.ones((2, 1))).data, ctx)


# --- synthesize ------------------------------------------------------------


def test_full_patch_is_generator_output():
    gen = ToyGenerator()
    w = np.random.default_rng(0).standard_normal(16)
    assert np.array_equal(synthesize(gen, w, PatchCoords(0, 0, 8, 8)).data, gen(w).data)


def test_distinct_latents_give_distinct_patches():
    gen = ToyGenerator()
    rng = np.random.default_rng(1)
    p = PatchCoords(2, 3, 4, 4)
    assert not np.allclose(synthesize(gen, rng.standard_normal(16), p).data, synthesize(gen, rng.standard_normal(16), p).data)


def test_patch_out_of_bounds_rejected():
    with pytest.raises(ValueError):
        synthesize(ToyGenerator(), np.zeros(16), PatchCoords(6, 0, 4, 4))


def test_synthesize_gradient():
    res = check_gradient("synthesize", *MODEL_CASES["synthesize"], points=5, tol=1e-5)
    assert res.passed, res


# --- linear ----------------------------------------------------------------


def test_embedding_map():
    out = linear_map(np.array([[0.3], [-2.0]]), [[1.0], [0.0]]).data
    np.testing.assert_array_equal(out, [[0.3, 0.0], [-2.0, 0.0]])


def test_identity_and_matmul_oracle():
    rng = np.random.default_rng(0)
    S = rng.standard_normal((5, 3))
    assert np.array_equal(linear_map(S, np.eye(3)).data, S)
    A, b = rng.standard_normal((2, 3)), rng.standard_normal(2)
    np.testing.assert_allclose(linear_map(S, A, b).data, S @ A.T + b, rtol=1e-14)


def test_linear_shape_mismatch():
    with pytest.raises(ShapeError):
        linear_map(np.zeros(3), np.zeros((2, 4)))


def test_linear_model_rejects_fractional_pose():
    fm = LinearModel(np.ones((2, 1, 2)))
    with pytest.raises(ValueError):
        fm.apply(np.zeros((1, 2)), np.array([[0.5]]))


# --- interface -------------------------------------------------------------


@pytest.mark.parametrize("name", sorted(MODEL_CASES))
def test_model_jacobians(name):
    res = check_gradient(name, *MODEL_CASES[name], points=5, tol=MODEL_TOL)
    assert res.passed, res


@pytest.mark.parametrize(
    "fm,phi",
    [(RenderModel(), np.array([[0.5, 0.0]])), (WarpModel(8), np.array([[0.3]])), (SynthesizeModel(), np.array([[0, 0, 4, 4]]))],
)
def test_observation_shape_contract(fm, phi):
    S = np.random.default_rng(0).normal(size=(1,) + tuple(fm.signal_shape))
    assert fm.apply(S, phi).shape[1:] == fm.observation_shape(phi)
