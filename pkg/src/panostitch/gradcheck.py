"""Finite-difference verification of the full forward/backward chain.

Builds a small synthetic scene, jitters every parameter group away from the
identity so all gradients are exercised, and compares each analytic
gradient coordinate against a central difference of the loss.
"""

from __future__ import annotations

import math

import numpy as np

from . import losses, pipeline, rigsim
from .geometry import RigConfig

FD_STEP = 1e-3
REL_TOL = 1e-3
# Relative-error denominator floor; coordinates where both sides are below
# this are counted as matching zeros.
DENOM_FLOOR = 1e-6

# Central differencing of a piecewise-smooth objective needs steps small
# against the kink spacing each coordinate sees. Affine scale entries move
# source coordinates by tens of pixels per unit, so their step is scaled
# down accordingly; tone-curve coordinates face absolute-value kinks in the
# feature losses and get a modest reduction.
GROUP_FD_STEPS = {
    "pre_color": 1e-4,
    "affines": 1e-5,
    "local": 1e-3,
    "weights": 1e-3,
    "post_color": 1e-4,
}

CHECK_ERP_HEIGHT = 32
CHECK_FISHEYE = 48
CHECK_SSIM_WINDOW = 5


def build_check_scene(seed, erp_height=CHECK_ERP_HEIGHT, fisheye_size=CHECK_FISHEYE):
    """Small float64 scene with mild pose and color perturbations."""
    rig = RigConfig.default(erp_height=erp_height, fisheye_size=fisheye_size)
    rng = np.random.default_rng([int(seed), 0xC4EC])
    pert = rigsim.PerturbationSpec(
        input=tuple(
            rigsim.CameraPerturb(
                yaw_err_deg=float(rng.uniform(-1.0, 1.0)),
                pitch_err_deg=float(rng.uniform(-0.3, 0.3)),
                gain=float(rng.uniform(0.9, 1.1)),
            )
            for _ in range(rig.n_inputs)
        ),
        supervision=tuple(rigsim.CameraPerturb() for _ in rig.supervision_yaws_deg),
        seed=int(seed),
    )
    source = rigsim.synthetic_panorama(rig.erp_size, seed=seed)
    bundle = rigsim.make_scene(source, rig, pert)
    scene = {
        "inputs": [im.astype(np.float64) for im in bundle.inputs],
        "base_fields": [f.astype(np.float64) for f in bundle.base_fields],
        "targets": [t.astype(np.float64) for t in bundle.supervision_erp],
        "masks": [m.astype(np.float64) for m in bundle.masks],
        "m_hat": bundle.m_hat.astype(np.float64),
    }
    return scene, rig


def jittered_params(rig, seed, dtype=np.float64, control_scale=pipeline.DEFAULT_CONTROL_SCALE):
    """Identity parameters plus small random offsets in every group.

    The warp-coordinate offsets are budgeted to stay strictly inside the
    footprint's bilinear-support slack, so no sample can cross the warp
    validity boundary (a genuine discontinuity) during differencing.
    """
    params = pipeline.init_params(rig, control_scale, dtype=dtype)
    rng = np.random.default_rng([int(seed), 0x9A77])
    size = rig.camera_template.width
    linear_jitter = 0.14 / size  # <= 0.14 px at the footprint edge
    params.pre_color += rng.uniform(-0.15, 0.15, params.pre_color.shape)
    params.affines[:, :, :2] += rng.uniform(-linear_jitter, linear_jitter,
                                            params.affines[:, :, :2].shape)
    params.affines[:, :, 2] += rng.uniform(-0.15, 0.15, params.affines[:, :, 2].shape)
    params.local += rng.uniform(-0.25, 0.25, params.local.shape)
    params.weights += rng.uniform(-0.2, 0.2, params.weights.shape)
    params.post_color += rng.uniform(-0.15, 0.15, params.post_color.shape)
    return params


def check_loss_config():
    """Window small enough that the masked SSIM regions stay nonempty at
    the check resolution."""
    return losses.LossConfig(ssim_window=CHECK_SSIM_WINDOW)


def relative_error(analytic, numeric):
    denom = max(abs(analytic), abs(numeric), DENOM_FLOOR)
    return abs(analytic - numeric) / denom


def central_diff(fn, flat, idx, step):
    orig = flat[idx]
    flat[idx] = orig + step
    up = fn()
    flat[idx] = orig - step
    down = fn()
    flat[idx] = orig
    return (up - down) / (2.0 * step)


def ladder_error(fn, flat, idx, base_step, analytic, rel_tol=REL_TOL, depth=4):
    """Best agreement between ``analytic`` and central differences over a
    ladder of shrinking steps.

    Bilinear warping and absolute-value losses make the objective piecewise
    smooth: an interval straddling a kink biases the difference quotient at
    every step larger than the kink distance, so the quotient only estimates
    the derivative once the step is inside the smooth neighborhood. Steps
    shrink 5x per rung; in float64 the smallest rung still leaves rounding
    noise orders of magnitude below the tolerance.
    """
    best = math.inf
    step = base_step
    for _ in range(depth + 1):
        numeric = central_diff(fn, flat, idx, step)
        best = min(best, relative_error(analytic, numeric))
        if best <= rel_tol:
            break
        step /= 5.0
    return best


def run_chain_check(seed, coords_per_group=8, full=False, alpha=pipeline.DEFAULT_ALPHA):
    """Compare analytic forward/backward gradients against central
    differences on randomly sampled coordinates of every parameter group.

    Returns {group: max relative error}. ``full`` sweeps every coordinate.
    """
    scene, rig = build_check_scene(seed)
    cfg = check_loss_config()
    params = jittered_params(rig, seed)
    prepared = losses.prepare_losses(scene["targets"], scene["masks"], scene["m_hat"], cfg)

    def loss_value():
        o, _ = pipeline.forward(scene["inputs"], scene["base_fields"], params, alpha)
        total, _, _ = losses.loss_and_grad(o, prepared, need_grad=False)
        return total

    _, _, grads = pipeline.forward_backward(
        scene["inputs"], scene["base_fields"], params, scene["targets"],
        scene["masks"], scene["m_hat"], cfg, alpha=alpha, prepared=prepared,
    )
    rng = np.random.default_rng([int(seed), 0xFD])
    errors = {}
    for name, arr in params.as_dict().items():
        g = grads.as_dict()[name]
        step = GROUP_FD_STEPS[name]
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        if full:
            picks = np.arange(flat.size)
        else:
            picks = rng.choice(flat.size, size=min(coords_per_group, flat.size), replace=False)
        worst = 0.0
        for idx in picks:
            worst = max(worst, ladder_error(loss_value, flat, idx, step, float(gflat[idx])))
        errors[name] = worst
    return errors


def fd_gradient(fn, arr, step=FD_STEP):
    """Dense central-difference gradient of a scalar function of one array."""
    arr = np.asarray(arr, dtype=np.float64)
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn(arr)
        flat[i] = orig - step
        down = fn(arr)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad
