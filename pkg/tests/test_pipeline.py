import numpy as np
import pytest

from panostitch import color, geometry, image_core, pipeline
from panostitch.errors import DomainError
from panostitch.gradcheck import (
    REL_TOL,
    build_check_scene,
    check_loss_config,
    jittered_params,
    run_chain_check,
)


def _small_scene(seed=0):
    scene, rig = build_check_scene(seed)
    return scene, rig


def test_init_params_shapes_and_determinism(tiny_rig):
    p1 = pipeline.init_params(tiny_rig)
    p2 = pipeline.init_params(tiny_rig)
    hc, wc = pipeline.control_grid_shape(tiny_rig.erp_size)
    assert (hc, wc) == (4, 8)
    assert p1.pre_color.shape == (3, 4, 8, 3)
    assert p1.local.shape == (3, 4, 8, 2)
    assert p1.weights.shape == (3, 4, 8)
    assert p1.post_color.shape == (4, 8, 3)
    for name, arr in p1.as_dict().items():
        assert np.array_equal(arr, p2.as_dict()[name])
    assert np.array_equal(p1.affines[0], pipeline.identity_affine(np.float32))


def test_control_grid_ceil():
    assert pipeline.control_grid_shape((130, 33), 8) == (5, 17)


def test_global_warp_identity_translation_scale(rng):
    base = rng.uniform(0, 48, (6, 12, 2))
    ident = pipeline.identity_affine()
    assert np.array_equal(pipeline.global_warp(base, ident), base)
    shift = np.array([[1.0, 0.0, 3.0], [0.0, 1.0, -2.0]])
    out = pipeline.global_warp(base, shift)
    assert np.allclose(out[..., 0], base[..., 0] + 3.0)
    assert np.allclose(out[..., 1], base[..., 1] - 2.0)
    scale = np.array([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
    assert np.allclose(pipeline.global_warp(base, scale), 2.0 * base)
    with pytest.raises(DomainError):
        pipeline.global_warp(base, np.eye(3))


def test_identity_params_give_validity_renormalized_average(tiny_rig, rng):
    scene, rig = _small_scene(3)
    params = pipeline.init_params(rig, dtype=np.float64)
    out, inter = pipeline.forward(scene["inputs"], scene["base_fields"], params)
    warped = []
    valids = []
    for img, field in zip(scene["inputs"], scene["base_fields"]):
        w, v = image_core.warp(img, field)
        warped.append(w)
        valids.append(v)
    vs = np.stack(valids)
    count = vs.sum(axis=0)
    num = sum(w * v[..., None] for w, v in zip(warped, valids))
    expected = np.where(count[..., None] > 0, num / np.maximum(count, 1.0)[..., None], 0.0)
    assert np.max(np.abs(out - expected)) < 1e-12


def test_identity_params_constant_inputs(tiny_rig):
    scene, rig = _small_scene(0)
    inputs = [np.full_like(im, 0.5) for im in scene["inputs"]]
    params = pipeline.init_params(rig, dtype=np.float64)
    out, inter = pipeline.forward(inputs, scene["base_fields"], params)
    covered = np.zeros(out.shape[:2], dtype=bool)
    for v in inter["valid"]:
        covered |= v > 0
    assert np.max(np.abs(out[covered] - 0.5)) < 1e-6
    assert np.all(out[~covered] == 0.0)


def test_forward_equals_manual_composition(rng):
    scene, rig = _small_scene(7)
    params = jittered_params(rig, 7)
    alpha = 0.3
    out, inter = pipeline.forward(scene["inputs"], scene["base_fields"], params, alpha)

    erp_hw = scene["base_fields"][0].shape[:2]
    i_bar, valid = [], []
    for k in range(3):
        c_pre = image_core.bilinear_resize(np.tanh(params.pre_color[k]), scene["inputs"][k].shape[:2])
        ih = color.apply_curve(scene["inputs"][k], c_pre)
        g = pipeline.global_warp(scene["base_fields"][k], params.affines[k])
        loc = image_core.bilinear_resize(params.local[k], erp_hw)
        u = image_core.compose_warp(g, loc, alpha)
        ib, v = image_core.warp(ih, u)
        i_bar.append(ib)
        valid.append(v)
    logits = np.stack([image_core.bilinear_resize(params.weights[k], erp_hw) for k in range(3)])
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    w = e / e.sum(axis=0, keepdims=True)
    p = image_core.weighted_sum(i_bar, list(w), valid)
    c_post = image_core.bilinear_resize(np.tanh(params.post_color), erp_hw)
    o = color.apply_curve(p, c_post)
    assert np.array_equal(out, o)


def test_forward_is_deterministic(rng):
    scene, rig = _small_scene(9)
    params = jittered_params(rig, 9)
    o1, _ = pipeline.forward(scene["inputs"], scene["base_fields"], params)
    o2, _ = pipeline.forward(scene["inputs"], scene["base_fields"], params)
    assert np.array_equal(o1, o2)


def test_alpha_zero_identity_affine_reduces_to_base(rng):
    scene, rig = _small_scene(1)
    params = pipeline.init_params(rig, dtype=np.float64)
    params.local += rng.uniform(-1, 1, params.local.shape)
    _, inter = pipeline.forward(scene["inputs"], scene["base_fields"], params, alpha=0.0)
    for u, base in zip(inter["u"], scene["base_fields"]):
        assert np.array_equal(u, base)


def test_normalized_weights_are_convex(rng):
    scene, rig = _small_scene(2)
    params = jittered_params(rig, 2)
    _, inter = pipeline.forward(scene["inputs"], scene["base_fields"], params)
    w = inter["weights"]
    assert np.all(w >= 0.0)
    assert np.max(np.abs(w.sum(axis=0) - 1.0)) < 1e-6


def test_zero_loss_configuration_has_zero_gradients():
    scene, rig = _small_scene(4)
    params = pipeline.init_params(rig, dtype=np.float64)
    cfg = check_loss_config()
    out, _ = pipeline.forward(scene["inputs"], scene["base_fields"], params)
    targets = [out * m[..., None] for m in scene["masks"]]
    total, comps, grads = pipeline.forward_backward(
        scene["inputs"], scene["base_fields"], params, targets,
        scene["masks"], scene["m_hat"], cfg,
    )
    assert total < 1e-12
    for name, g in grads.as_dict().items():
        assert np.max(np.abs(g)) < 1e-6, name


def test_post_color_gradient_zero_at_saturated_blend():
    # Identity warp over exactly saturated inputs makes the blended image
    # exactly 1, where the output curve has no effect.
    h, w = 8, 16
    grid = geometry.erp_pixel_grid((w, h))
    inputs = [np.ones((h, w, 3)) for _ in range(2)]
    fields = [grid.copy(), grid.copy()]
    params = pipeline.init_params_from_shapes(2, (w, h), dtype=np.float64)
    out, inter = pipeline.forward(inputs, fields, params)
    assert np.array_equal(inter["p"], np.ones_like(inter["p"]))
    rng = np.random.default_rng(0)
    cot = rng.normal(size=out.shape)
    grads = pipeline.backward(inputs, fields, params, inter, cot)
    assert np.max(np.abs(grads.post_color)) == 0.0


def test_forward_backward_chain_matches_fd_sampled():
    errors = run_chain_check(seed=13, coords_per_group=5)
    for name, err in errors.items():
        assert err <= REL_TOL, f"{name}: {err:.3e}"


def test_forward_rejects_mismatched_inputs(rng):
    scene, rig = _small_scene(0)
    params = pipeline.init_params(rig, dtype=np.float64)
    with pytest.raises(DomainError):
        pipeline.forward(scene["inputs"][:2], scene["base_fields"], params)
