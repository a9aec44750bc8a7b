"""Per-pixel quadratic tone curves and cross-camera color consistency fitting.

Two distinct tools live here. The curve map x -> x + C*x*(1-x) is the
differentiable tone adjustment applied inside the stitching pipeline; it
fixes 0 and 1 and is monotone for |C| < 1. The quadratic polynomial
x -> a*x^2 + b*x + c is the dataset-preparation mapping fitted by least
squares to harmonize the registration-target images before optimization.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import geometry, image_core
from .errors import DegenerateFitError, DomainError

log = logging.getLogger(__name__)


def apply_curve(image, curve):
    """Apply the per-pixel quadratic tone curve: x + C * x * (1 - x)."""
    if image.shape != curve.shape:
        raise DomainError(f"image {image.shape} and curve {curve.shape} dims differ")
    return image + curve * image * (1.0 - image)


def apply_curve_vjp(image, curve, cot):
    """Cotangents of :func:`apply_curve`.

    d/dx = 1 + C * (1 - 2x); d/dC = x * (1 - x).
    """
    if cot.shape != image.shape:
        raise DomainError("cotangent dims must match the image dims")
    cot_image = cot * (1.0 + curve * (1.0 - 2.0 * image))
    cot_curve = cot * image * (1.0 - image)
    return cot_image, cot_curve


@dataclass(frozen=True)
class ColorPolynomial:
    """Per-channel quadratic intensity mapping x -> a*x^2 + b*x + c.

    ``coeffs`` has shape (C, 3) ordered (a, b, c); ``residual`` holds the
    mean squared fit error per channel.
    """

    coeffs: np.ndarray
    residual: np.ndarray

    @property
    def n_channels(self):
        return self.coeffs.shape[0]

    def monotone_flags(self):
        """Nondecreasing on [0, 1] iff 2a*x + b >= 0 at both endpoints."""
        a = self.coeffs[:, 0]
        b = self.coeffs[:, 1]
        return (b >= 0.0) & (2.0 * a + b >= 0.0)

    def apply(self, image):
        """Apply the per-channel mapping to an image (no clamping)."""
        arr = np.asarray(image)
        if arr.ndim == 2:
            if self.n_channels != 1:
                raise DomainError("grayscale image needs a 1-channel polynomial")
            a, b, c = self.coeffs[0]
            return a * arr * arr + b * arr + c
        if arr.shape[-1] != self.n_channels:
            raise DomainError(
                f"image has {arr.shape[-1]} channels, polynomial has {self.n_channels}"
            )
        a = self.coeffs[:, 0]
        b = self.coeffs[:, 1]
        c = self.coeffs[:, 2]
        return a * arr * arr + b * arr + c


def _as_sample_matrix(samples):
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DomainError(f"samples must be (K,) or (K, C), got shape {arr.shape}")
    return arr


def fit_color_polynomial(query_samples, ref_samples):
    """Least-squares quadratic mapping from query to reference intensities.

    Fits each channel independently, minimizing the mean squared error of
    a*x^2 + b*x + c against the reference samples. Requires at least 3
    samples with at least 3 distinct query values per channel. Monotonicity
    violations are logged, never clamped.
    """
    q = _as_sample_matrix(query_samples)
    r = _as_sample_matrix(ref_samples)
    if q.shape != r.shape:
        raise DomainError(f"sample lists differ in shape: {q.shape} vs {r.shape}")
    n_channels = q.shape[1]
    coeffs = np.empty((n_channels, 3), dtype=np.float64)
    residual = np.empty(n_channels, dtype=np.float64)
    for ch in range(n_channels):
        x = q[:, ch]
        y = r[:, ch]
        if np.unique(x).size < 3:
            raise DegenerateFitError(
                f"channel {ch}: need >= 3 distinct query values for a quadratic fit"
            )
        design = np.stack([x * x, x, np.ones_like(x)], axis=1)
        gram = design.T @ design
        beta = np.linalg.solve(gram, design.T @ y)
        coeffs[ch] = beta
        err = design @ beta - y
        residual[ch] = float(np.mean(err * err))
    poly = ColorPolynomial(coeffs=coeffs, residual=residual)
    bad = np.flatnonzero(~poly.monotone_flags())
    if bad.size:
        log.warning("fitted polynomial is non-monotone on [0,1] for channels %s", bad.tolist())
    return poly


def _box_complete(mask_bool, radius):
    """True where the full (2r+1)^2 neighborhood lies inside ``mask_bool``.

    Horizontal wrap-around (ERP seam), vertical borders count as outside.
    """
    if radius == 0:
        return mask_bool
    m = mask_bool.astype(np.int32)
    m = np.pad(m, ((radius, radius), (0, 0)), mode="constant")
    m = np.pad(m, ((0, 0), (radius, radius)), mode="wrap")
    cs = m.cumsum(axis=0).cumsum(axis=1)
    cs = np.pad(cs, ((1, 0), (1, 0)), mode="constant")
    k = 2 * radius + 1
    h, w = mask_bool.shape
    total = (
        cs[k : k + h, k : k + w]
        - cs[:h, k : k + w]
        - cs[k : k + h, :w]
        + cs[:h, :w]
    )
    return total == k * k


def sample_overlap_correspondences(
    cam_a, cam_b, erp_size, image_a, image_b, patch_radius, grid_step=4
):
    """Geometry-derived intensity correspondences between two fisheye views.

    ERP pixels inside both camera footprints are visited on a regular grid;
    each grid point is read from both fisheye images over a
    (2*patch_radius+1)^2 patch around its mapped source coordinate. Returns
    co-indexed arrays (samples_a, samples_b) of shape (K, C).
    """
    if patch_radius < 0 or grid_step < 1:
        raise DomainError("patch_radius must be >= 0 and grid_step >= 1")
    field_a, mask_a = geometry.build_base_warp(cam_a, erp_size)
    field_b, mask_b = geometry.build_base_warp(cam_b, erp_size)
    overlap = (mask_a > 0) & (mask_b > 0)
    if not overlap.any():
        raise DomainError("cameras share no footprint on the sphere")
    ys, xs = np.nonzero(overlap)
    keep = (ys % grid_step == 0) & (xs % grid_step == 0)
    ys, xs = ys[keep], xs[keep]

    offs = np.arange(-patch_radius, patch_radius + 1, dtype=np.float64)
    dy, dx = np.meshgrid(offs, offs, indexing="ij")
    dy = dy.reshape(-1)
    dx = dx.reshape(-1)

    def _read(image, field):
        sx = field[ys, xs, 0][:, None] + dx[None, :]
        sy = field[ys, xs, 1][:, None] + dy[None, :]
        vals, inside = image_core.bilinear_sample(image, sx, sy)
        return vals, inside.all(axis=1)

    vals_a, ok_a = _read(image_a, field_a)
    vals_b, ok_b = _read(image_b, field_b)
    ok = ok_a & ok_b
    vals_a = vals_a[ok]
    vals_b = vals_b[ok]
    if image_a.ndim == 2:
        return vals_a.reshape(-1), vals_b.reshape(-1)
    c = image_a.shape[2]
    return vals_a.reshape(-1, c), vals_b.reshape(-1, c)


def correct_weak_supervision(
    queries,
    reference,
    rig,
    *,
    reference_yaw=180.0,
    patch_radius=2,
    grid_step=4,
):
    """Harmonize ERP-projected supervision views against a reference view.

    ``queries`` are the non-reference supervision images in yaw-list order;
    ``reference`` is the view of the supervision camera at ``reference_yaw``.
    Intensities correspond pixelwise on footprint overlaps because all views
    share the ERP frame. Fits one quadratic polynomial per query and applies
    it to the whole query image, clamped to [0, 1].

    Returns (corrected_queries, polynomials).
    """
    sup_yaws = list(rig.supervision_yaws_deg)
    if reference_yaw not in sup_yaws:
        raise DomainError(f"reference yaw {reference_yaw} is not a supervision camera")
    ref_idx = sup_yaws.index(reference_yaw)
    query_idx = [i for i in range(len(sup_yaws)) if i != ref_idx]
    if len(queries) != len(query_idx):
        raise DomainError(f"expected {len(query_idx)} query images, got {len(queries)}")

    masks, _ = geometry.weak_supervision_masks(rig)
    ref_mask = masks[ref_idx] > 0
    corrected = []
    polys = []
    for img, idx in zip(queries, query_idx):
        if img.shape != reference.shape:
            raise DomainError("query and reference images must share dims")
        overlap = (masks[idx] > 0) & ref_mask
        usable = _box_complete(overlap, patch_radius)
        ys, xs = np.nonzero(usable)
        keep = (ys % grid_step == 0) & (xs % grid_step == 0)
        ys, xs = ys[keep], xs[keep]
        if ys.size == 0:
            raise DomainError("no usable overlap samples between query and reference")
        w = img.shape[1]
        q_samples = []
        r_samples = []
        for oy in range(-patch_radius, patch_radius + 1):
            for ox in range(-patch_radius, patch_radius + 1):
                q_samples.append(img[ys + oy, (xs + ox) % w])
                r_samples.append(reference[ys + oy, (xs + ox) % w])
        q = np.concatenate(q_samples, axis=0)
        r = np.concatenate(r_samples, axis=0)
        poly = fit_color_polynomial(q, r)
        out = np.clip(poly.apply(img), 0.0, 1.0).astype(img.dtype, copy=False)
        corrected.append(out)
        polys.append(poly)
    return corrected, polys
