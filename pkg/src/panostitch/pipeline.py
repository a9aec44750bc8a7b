"""Scene parameterization and the stitching forward/backward pass.

The output panorama is produced by five stages applied in a fixed order:

1. per-input quadratic tone curve  I_hat = I + C_pre * I * (1 - I)
2. global registration             G = A applied to the base warp field
3. warp composition                U = G + alpha * L
4. backward warping + blending     P = sum_n warp(I_hat_n, U_n) * W_n
5. output tone curve               O = P + C_post * P * (1 - P)

All learnable maps live on a coarse control grid (ERP size divided by
``control_scale``) and are bilinearly upsampled at apply time; tone-curve
coefficients are squashed through tanh so they stay in (-1, 1). Blend
weights come from a per-pixel normalized exponential over the per-input
logit maps, so the blend is a convex combination wherever any input is
valid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import color, image_core, losses
from .errors import DomainError

DEFAULT_ALPHA = 0.3
DEFAULT_CONTROL_SCALE = 8

PARAM_GROUPS = ("pre_color", "affines", "local", "weights", "post_color")


def identity_affine(dtype=np.float64):
    """2x3 matrix acting as the identity on homogeneous 2-D coordinates."""
    return np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=dtype)


@dataclass
class SceneParams:
    """Optimizable per-scene parameter set.

    pre_color:  (N, hc, wc, 3) unconstrained curve coefficients per input
    affines:    (N, 2, 3) transforms acting on base-warp source coordinates
    local:      (N, hc, wc, 2) coarse warp adjustments, in source pixels
    weights:    (N, hc, wc) blend logits
    post_color: (hc, wc, 3) unconstrained output curve coefficients
    """

    pre_color: np.ndarray
    affines: np.ndarray
    local: np.ndarray
    weights: np.ndarray
    post_color: np.ndarray

    def __post_init__(self):
        n = self.affines.shape[0]
        if self.pre_color.shape[0] != n or self.local.shape[0] != n or self.weights.shape[0] != n:
            raise DomainError("per-input parameter arrays disagree on the number of inputs")
        for name in PARAM_GROUPS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise DomainError(f"parameter group {name!r} contains non-finite values")

    @property
    def n_inputs(self):
        return self.affines.shape[0]

    def as_dict(self):
        """Live references to the parameter arrays, keyed by group name."""
        return {name: getattr(self, name) for name in PARAM_GROUPS}

    def copy(self):
        return SceneParams(**{name: getattr(self, name).copy() for name in PARAM_GROUPS})

    def zeros_like(self):
        return SceneParams(**{name: np.zeros_like(getattr(self, name)) for name in PARAM_GROUPS})


def control_grid_shape(erp_size, control_scale=DEFAULT_CONTROL_SCALE):
    """Coarse grid (hc, wc) for an ERP (width, height) output."""
    w, h = int(erp_size[0]), int(erp_size[1])
    return (math.ceil(h / control_scale), math.ceil(w / control_scale))


def init_params_from_shapes(n_inputs, erp_size, control_scale=DEFAULT_CONTROL_SCALE, dtype=np.float32):
    """Identity-pipeline initialization: zero curves, identity affines,
    zero local grids, uniform blend logits. Deterministic."""
    hc, wc = control_grid_shape(erp_size, control_scale)
    return SceneParams(
        pre_color=np.zeros((n_inputs, hc, wc, 3), dtype=dtype),
        affines=np.broadcast_to(identity_affine(dtype), (n_inputs, 2, 3)).copy(),
        local=np.zeros((n_inputs, hc, wc, 2), dtype=dtype),
        weights=np.zeros((n_inputs, hc, wc), dtype=dtype),
        post_color=np.zeros((hc, wc, 3), dtype=dtype),
    )


def init_params(rig, control_scale=DEFAULT_CONTROL_SCALE, dtype=np.float32):
    return init_params_from_shapes(rig.n_inputs, rig.erp_size, control_scale, dtype)


def global_warp(base, affine):
    """Apply a 2x3 transform to the source coordinates of a base warp field."""
    a = np.asarray(affine)
    if a.shape != (2, 3):
        raise DomainError(f"affine must be 2x3, got {a.shape}")
    sx = base[..., 0]
    sy = base[..., 1]
    gx = a[0, 0] * sx + a[0, 1] * sy + a[0, 2]
    gy = a[1, 0] * sx + a[1, 1] * sy + a[1, 2]
    return np.stack([gx, gy], axis=-1)


def global_warp_vjp(base, cot_out):
    """Cotangent of :func:`global_warp` wrt the affine entries."""
    sx = base[..., 0]
    sy = base[..., 1]
    cot_a = np.empty((2, 3), dtype=np.float64)
    for row in range(2):
        c = cot_out[..., row]
        cot_a[row, 0] = np.sum(c * sx, dtype=np.float64)
        cot_a[row, 1] = np.sum(c * sy, dtype=np.float64)
        cot_a[row, 2] = np.sum(c, dtype=np.float64)
    return cot_a


def _softmax_over_inputs(logits):
    """Normalized exponential across axis 0 of an (N, H, W) stack."""
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def _softmax_vjp(softmax, cot):
    dot = np.sum(softmax * cot, axis=0, keepdims=True)
    return softmax * (cot - dot)


def forward(inputs, base_fields, params, alpha=DEFAULT_ALPHA):
    """Run the five-stage pipeline; returns (panorama, intermediates).

    Intermediates hold every stage product: corrected inputs ``i_hat``,
    composed fields ``u``, warped images ``i_bar``, warp validity masks,
    normalized blend weights, the blended panorama ``p``, the full-
    resolution curve maps, and the output ``o``.
    """
    n = params.n_inputs
    if len(inputs) != n or len(base_fields) != n:
        raise DomainError(f"expected {n} inputs and base fields")
    erp_hw = base_fields[0].shape[:2]
    for f in base_fields:
        if f.shape[:2] != erp_hw:
            raise DomainError("base warp fields disagree on the output dims")

    i_hat, u_fields, i_bar, valid = [], [], [], []
    c_pre_full = []
    for k in range(n):
        c_pre = image_core.bilinear_resize(np.tanh(params.pre_color[k]), inputs[k].shape[:2])
        ih = color.apply_curve(inputs[k], c_pre)
        g = global_warp(base_fields[k], params.affines[k])
        loc = image_core.bilinear_resize(params.local[k], erp_hw)
        u = image_core.compose_warp(g, loc, alpha)
        ib, v = image_core.warp(ih, u)
        c_pre_full.append(c_pre)
        i_hat.append(ih)
        u_fields.append(u)
        i_bar.append(ib)
        valid.append(v)

    logits = np.stack([image_core.bilinear_resize(params.weights[k], erp_hw) for k in range(n)])
    w_soft = _softmax_over_inputs(logits)
    p = image_core.weighted_sum(i_bar, list(w_soft), valid)
    c_post = image_core.bilinear_resize(np.tanh(params.post_color), erp_hw)
    o = color.apply_curve(p, c_post)

    inter = {
        "c_pre": c_pre_full,
        "i_hat": i_hat,
        "u": u_fields,
        "i_bar": i_bar,
        "valid": valid,
        "weights": w_soft,
        "p": p,
        "c_post": c_post,
        "o": o,
    }
    return o, inter


def backward(inputs, base_fields, params, inter, cot_o, alpha=DEFAULT_ALPHA):
    """Chain an output cotangent back to every parameter group."""
    n = params.n_inputs
    erp_hw = base_fields[0].shape[:2]
    grads = params.zeros_like()

    cot_p, cot_cpost = color.apply_curve_vjp(inter["p"], inter["c_post"], cot_o)
    sq = 1.0 - np.tanh(params.post_color) ** 2
    grads.post_color[...] = image_core.bilinear_resize_vjp(
        np.tanh(params.post_color), erp_hw, cot_cpost
    ) * sq

    cot_ibars, cot_wsoft = image_core.weighted_sum_vjp(
        inter["i_bar"], list(inter["weights"]), inter["valid"], cot_p
    )
    cot_logits = _softmax_vjp(inter["weights"], np.stack(cot_wsoft))
    for k in range(n):
        grads.weights[k] = image_core.bilinear_resize_vjp(params.weights[k], erp_hw, cot_logits[k])

    for k in range(n):
        cot_ihat, cot_u = image_core.warp_vjp(inter["i_hat"][k], inter["u"][k], cot_ibars[k])
        cot_g, cot_loc = image_core.compose_warp_vjp(cot_u, alpha)
        grads.local[k] = image_core.bilinear_resize_vjp(params.local[k], erp_hw, cot_loc)
        grads.affines[k] = global_warp_vjp(base_fields[k], cot_g)
        _, cot_cpre = color.apply_curve_vjp(inputs[k], inter["c_pre"][k], cot_ihat)
        sq = 1.0 - np.tanh(params.pre_color[k]) ** 2
        grads.pre_color[k] = image_core.bilinear_resize_vjp(
            np.tanh(params.pre_color[k]), inputs[k].shape[:2], cot_cpre
        ) * sq
    return grads


def forward_backward(
    inputs,
    base_fields,
    params,
    targets,
    masks,
    m_hat,
    cfg,
    alpha=DEFAULT_ALPHA,
    prepared=None,
):
    """Loss and exact parameter gradients for one scene.

    Returns (total, components, grads). ``prepared`` may carry the reusable
    target-side loss state from :func:`losses.prepare_losses`.
    """
    if prepared is None:
        prepared = losses.prepare_losses(list(targets), list(masks), m_hat, cfg)
    o, inter = forward(inputs, base_fields, params, alpha)
    total, comps, cot_o = losses.loss_and_grad(o, prepared)
    grads = backward(inputs, base_fields, params, inter, cot_o, alpha)
    return total, comps, grads
