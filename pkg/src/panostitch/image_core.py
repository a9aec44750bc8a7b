"""Image arrays, bilinear warping, blending, and exact file formats.

Images are numpy arrays of shape (H, W) or (H, W, C), float valued and
nominally in [0, 1] (intermediate pipeline values may leave that range;
only export clamps). Masks are (H, W) arrays with values in {0, 1}. Warp
fields are (H, W, 2) arrays of per-output-pixel source coordinates
(sx, sy) in the half-integer pixel-center convention of the geometry
module.

Every differentiable operation has a companion ``*_vjp`` function mapping
an upstream cotangent to input cotangents. VJPs recompute the cheap parts
of the forward pass, so they only need the original inputs.
"""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image as PILImage

from .errors import DomainError

WSSF_MAGIC = b"WSSF1\n"

# Cache of resize source-coordinate grids, keyed by (src_h, src_w, out_h, out_w).
_RESIZE_COORDS = {}


def _channels(image):
    if image.ndim == 2:
        return 1
    if image.ndim == 3:
        return image.shape[2]
    raise DomainError(f"images must be 2-D or 3-D, got shape {image.shape}")


def check_image(image, name="image"):
    _channels(image)
    if not np.all(np.isfinite(image)):
        raise DomainError(f"{name} contains non-finite values")


def check_mask(mask, name="mask"):
    if mask.ndim != 2:
        raise DomainError(f"{name} must be 2-D, got shape {mask.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise DomainError(f"{name} must be binary")


def _split_taps(image, sx, sy):
    """Shared bilinear tap computation.

    Returns (x0, x1, y0, y1, tx, ty, inside) with integer tap indices clipped
    to the image and ``inside`` true where every contributing tap is in
    bounds (sample position within the convex hull of pixel centers).
    """
    h, w = image.shape[:2]
    fx = sx - 0.5
    fy = sy - 0.5
    x0f = np.floor(fx)
    y0f = np.floor(fy)
    tx = fx - x0f
    ty = fy - y0f
    inside = (fx >= 0.0) & (fx <= w - 1.0) & (fy >= 0.0) & (fy <= h - 1.0)
    x0 = np.clip(x0f, 0, w - 1).astype(np.intp)
    y0 = np.clip(y0f, 0, h - 1).astype(np.intp)
    x1 = np.clip(x0f + 1, 0, w - 1).astype(np.intp)
    y1 = np.clip(y0f + 1, 0, h - 1).astype(np.intp)
    return x0, x1, y0, y1, tx, ty, inside


def bilinear_sample(image, sx, sy):
    """Sample ``image`` at continuous coordinates (sx, sy).

    Returns (values, inside). Values are zero where ``inside`` is false.
    """
    x0, x1, y0, y1, tx, ty, inside = _split_taps(image, sx, sy)
    if image.ndim == 3:
        tx = tx[..., None]
        ty = ty[..., None]
        ins = inside[..., None]
    else:
        ins = inside
    v00 = image[y0, x0]
    v01 = image[y0, x1]
    v10 = image[y1, x0]
    v11 = image[y1, x1]
    top = v00 + tx * (v01 - v00)
    bot = v10 + tx * (v11 - v10)
    out = top + ty * (bot - top)
    out = np.where(ins, out, 0.0).astype(image.dtype, copy=False)
    return out, inside


def _scatter_taps(shape_hw, channels, idx_list, weight_list, cot):
    """Accumulate weighted cotangents into a source image via bincount."""
    h, w = shape_hw
    if channels == 1:
        flat = np.zeros(h * w, dtype=np.float64)
        for idx, wt in zip(idx_list, weight_list):
            flat += np.bincount(idx.reshape(-1), weights=(wt * cot).reshape(-1), minlength=h * w)
        return flat.reshape(h, w)
    flat = np.zeros(h * w * channels, dtype=np.float64)
    offs = np.arange(channels, dtype=np.intp)
    for idx, wt in zip(idx_list, weight_list):
        idx2 = (idx.reshape(-1, 1) * channels + offs).reshape(-1)
        vals = (wt[..., None] * cot).reshape(-1)
        flat += np.bincount(idx2, weights=vals, minlength=h * w * channels)
    return flat.reshape(h, w, channels)


def bilinear_sample_vjp(image, sx, sy, cot):
    """Cotangents of :func:`bilinear_sample` wrt the image and coordinates.

    ``cot`` matches the sampled output shape. Returns
    (cot_image, cot_sx, cot_sy).
    """
    h, w = image.shape[:2]
    x0, x1, y0, y1, tx, ty, inside = _split_taps(image, sx, sy)
    c = _channels(image)
    if image.ndim == 3:
        cot = np.where(inside[..., None], cot, 0.0)
        txc, tyc = tx[..., None], ty[..., None]
    else:
        cot = np.where(inside, cot, 0.0)
        txc, tyc = tx, ty

    w00 = (1.0 - tx) * (1.0 - ty)
    w01 = tx * (1.0 - ty)
    w10 = (1.0 - tx) * ty
    w11 = tx * ty
    flat00 = y0 * w + x0
    flat01 = y0 * w + x1
    flat10 = y1 * w + x0
    flat11 = y1 * w + x1
    cot_image = _scatter_taps(
        (h, w), c, [flat00, flat01, flat10, flat11], [w00, w01, w10, w11], cot
    ).astype(image.dtype, copy=False)

    v00 = image[y0, x0]
    v01 = image[y0, x1]
    v10 = image[y1, x0]
    v11 = image[y1, x1]
    dfx = (1.0 - tyc) * (v01 - v00) + tyc * (v11 - v10)
    dfy = (1.0 - txc) * (v10 - v00) + txc * (v11 - v01)
    if image.ndim == 3:
        cot_sx = np.sum(cot * dfx, axis=-1)
        cot_sy = np.sum(cot * dfy, axis=-1)
    else:
        cot_sx = cot * dfx
        cot_sy = cot * dfy
    return cot_image, cot_sx, cot_sy


def _check_field(field):
    if field.ndim != 3 or field.shape[2] != 2:
        raise DomainError(f"warp fields must have shape (H, W, 2), got {field.shape}")
    if not np.all(np.isfinite(field)):
        raise DomainError("warp field contains non-finite values")


def warp(image, field):
    """Backward-warp ``image`` through ``field``.

    Output pixel p takes the bilinear sample of ``image`` at field(p).
    Returns (warped, mask) where mask is 1.0 where every contributing
    bilinear tap is in bounds; out-of-bounds outputs are 0.
    """
    _check_field(field)
    check_image(image)
    out, inside = bilinear_sample(image, field[..., 0], field[..., 1])
    return out, inside.astype(np.float32)


def warp_vjp(image, field, cot_out):
    """Cotangents of :func:`warp` wrt the image and the warp field."""
    _check_field(field)
    if cot_out.shape[:2] != field.shape[:2]:
        raise DomainError("cotangent dims must match the warp field dims")
    cot_image, cot_sx, cot_sy = bilinear_sample_vjp(image, field[..., 0], field[..., 1], cot_out)
    cot_field = np.stack([cot_sx, cot_sy], axis=-1).astype(field.dtype, copy=False)
    return cot_image, cot_field


def compose_warp(global_field, local_field, alpha):
    """Blend a coarse registration field with a local adjustment: G + alpha * L."""
    if global_field.shape != local_field.shape:
        raise DomainError(
            f"warp fields must share dims, got {global_field.shape} vs {local_field.shape}"
        )
    return global_field + alpha * local_field


def compose_warp_vjp(cot_out, alpha):
    """Cotangents of :func:`compose_warp` wrt (global_field, local_field)."""
    return cot_out, alpha * cot_out


def _stack_weights(weights, validity, n, shape_hw):
    ws = np.stack(list(weights), axis=0)
    vs = np.stack(list(validity), axis=0)
    if ws.shape != (n,) + shape_hw or vs.shape != (n,) + shape_hw:
        raise DomainError("weights and validity masks must match the image dims")
    return ws, vs


def weighted_sum(images, weights, validity):
    """Per-pixel convex combination of valid images.

    Weights are renormalized per pixel over the valid inputs; pixels with no
    valid input are 0.
    """
    images = list(images)
    if not images:
        raise DomainError("weighted_sum needs at least one image")
    shape_hw = images[0].shape[:2]
    for im in images:
        if im.shape != images[0].shape:
            raise DomainError("all images must share dims")
    ws, vs = _stack_weights(weights, validity, len(images), shape_hw)
    eff = ws * vs
    denom = eff.sum(axis=0)
    inv = np.where(denom > 1e-12, 1.0 / np.where(denom > 1e-12, denom, 1.0), 0.0)
    out = np.zeros_like(images[0])
    for n, im in enumerate(images):
        share = eff[n] * inv
        out = out + (share[..., None] if im.ndim == 3 else share) * im
    return out


def weighted_sum_vjp(images, weights, validity, cot):
    """Cotangents of :func:`weighted_sum` wrt each image and each weight map.

    The weight cotangent combines the direct blending term with the
    renormalization correction: d/dW_n = V_n / D * (I_n - P) summed over
    channels, where D is the per-pixel sum of valid weights.
    """
    images = list(images)
    shape_hw = images[0].shape[:2]
    ws, vs = _stack_weights(weights, validity, len(images), shape_hw)
    eff = ws * vs
    denom = eff.sum(axis=0)
    inv = np.where(denom > 1e-12, 1.0 / np.where(denom > 1e-12, denom, 1.0), 0.0)
    out = weighted_sum(images, weights, validity)
    cot_images = []
    cot_weights = []
    multi = images[0].ndim == 3
    for n, im in enumerate(images):
        share = eff[n] * inv
        cot_images.append((share[..., None] if multi else share) * cot)
        diff = im - out
        if multi:
            cot_w = vs[n] * inv * np.sum(cot * diff, axis=-1)
        else:
            cot_w = vs[n] * inv * (cot * diff)
        cot_weights.append(cot_w)
    return cot_images, cot_weights


class _ResizePlan:
    """Precomputed taps of a fixed-size bilinear resize (a linear map)."""

    __slots__ = ("src_hw", "out_hw", "y0", "y1", "x0", "x1", "weights", "flat_idx", "_weights_by_dtype")

    def __init__(self, src_hw, out_hw):
        sh, sw = src_hw
        oh, ow = out_hw
        # Align pixel centers and clamp so every sample is interior.
        xs = np.clip((np.arange(ow, dtype=np.float64) + 0.5) * (sw / ow), 0.5, sw - 0.5) - 0.5
        ys = np.clip((np.arange(oh, dtype=np.float64) + 0.5) * (sh / oh), 0.5, sh - 0.5) - 0.5
        x0 = np.floor(xs).astype(np.intp)
        y0 = np.floor(ys).astype(np.intp)
        tx = (xs - x0)[None, :]
        ty = (ys - y0)[:, None]
        x1 = np.minimum(x0 + 1, sw - 1)
        y1 = np.minimum(y0 + 1, sh - 1)
        self.src_hw = (sh, sw)
        self.out_hw = (oh, ow)
        self.y0, self.y1 = y0[:, None], y1[:, None]
        self.x0, self.x1 = x0[None, :], x1[None, :]
        self.weights = [
            ((1.0 - tx) * (1.0 - ty)).astype(np.float64),
            (tx * (1.0 - ty)).astype(np.float64),
            ((1.0 - tx) * ty).astype(np.float64),
            (tx * ty).astype(np.float64),
        ]
        self.flat_idx = [
            np.ascontiguousarray(np.broadcast_to(yy * sw + xx, (oh, ow)).reshape(-1))
            for yy, xx in ((self.y0, self.x0), (self.y0, self.x1), (self.y1, self.x0), (self.y1, self.x1))
        ]
        self._weights_by_dtype = {}

    def weights_for(self, dtype):
        key = np.dtype(dtype).str
        got = self._weights_by_dtype.get(key)
        if got is None:
            got = [w.astype(dtype) for w in self.weights]
            self._weights_by_dtype[key] = got
        return got


def _resize_plan(src_hw, out_hw):
    key = (src_hw[0], src_hw[1], out_hw[0], out_hw[1])
    plan = _RESIZE_COORDS.get(key)
    if plan is None:
        plan = _ResizePlan(src_hw, out_hw)
        _RESIZE_COORDS[key] = plan
    return plan


def bilinear_resize(src, out_hw):
    """Resize (H, W[, C]) arrays to ``out_hw`` with center-aligned bilinear
    sampling. Every sample is clamped interior, so no validity is involved."""
    plan = _resize_plan(src.shape[:2], out_hw)
    w00, w01, w10, w11 = plan.weights_for(src.dtype)
    if src.ndim == 3:
        w00, w01, w10, w11 = w00[..., None], w01[..., None], w10[..., None], w11[..., None]
    out = (
        w00 * src[plan.y0, plan.x0]
        + w01 * src[plan.y0, plan.x1]
        + w10 * src[plan.y1, plan.x0]
        + w11 * src[plan.y1, plan.x1]
    )
    return out.astype(src.dtype, copy=False)


def bilinear_resize_vjp(src, out_hw, cot):
    """Cotangent of :func:`bilinear_resize` wrt ``src`` (a linear map)."""
    plan = _resize_plan(src.shape[:2], out_hw)
    sh, sw = plan.src_hw
    if src.ndim == 2:
        flat = np.zeros(sh * sw, dtype=np.float64)
        for idx, wt in zip(plan.flat_idx, plan.weights):
            flat += np.bincount(idx, weights=(wt * cot).reshape(-1), minlength=sh * sw)
        return flat.reshape(sh, sw).astype(src.dtype, copy=False)
    c = src.shape[2]
    flat = np.zeros(sh * sw * c, dtype=np.float64)
    offs = np.arange(c, dtype=np.intp)
    for idx, wt in zip(plan.flat_idx, plan.weights):
        idx2 = (idx[:, None] * c + offs).reshape(-1)
        flat += np.bincount(idx2, weights=(wt[..., None] * cot).reshape(-1), minlength=sh * sw * c)
    return flat.reshape(sh, sw, c).astype(src.dtype, copy=False)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def write_wssf(path, arr):
    """Write a float map in the exact raw format.

    Layout: magic ``WSSF1\\n``, three little-endian uint32 (height, width,
    channels), then height*width*channels little-endian float32, row-major,
    channel-interleaved. 2-D arrays are stored with channels = 1.
    """
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise DomainError(f"WSSF arrays must be 2-D or 3-D, got shape {arr.shape}")
    h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(WSSF_MAGIC)
        f.write(struct.pack("<III", h, w, c))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_wssf(path):
    """Read a WSSF1 float map. Single-channel maps come back 2-D."""
    with open(path, "rb") as f:
        magic = f.read(len(WSSF_MAGIC))
        if magic != WSSF_MAGIC:
            raise DomainError(f"{path}: not a WSSF1 file")
        header = f.read(12)
        if len(header) != 12:
            raise DomainError(f"{path}: truncated WSSF1 header")
        h, w, c = struct.unpack("<III", header)
        payload = f.read()
    expected = h * w * c * 4
    if len(payload) != expected:
        raise DomainError(f"{path}: expected {expected} payload bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float32)
    if c == 1:
        return arr[..., 0]
    return arr


def write_png(path, image):
    """Export an image as 8-bit PNG; values are clamped to [0, 1] and scaled
    linearly to 0..255 (no gamma transform)."""
    check_image(image)
    arr = np.clip(image, 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[..., 0]
    mode = "L" if data.ndim == 2 else "RGB"
    PILImage.fromarray(data, mode=mode).save(path, format="PNG")


def read_png(path):
    """Load a PNG into float32 in [0, 1]; returns (H, W) for grayscale,
    (H, W, 3) otherwise."""
    with PILImage.open(path) as img:
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        data = np.asarray(img)
    return (data.astype(np.float32) / 255.0).clip(0.0, 1.0)
