"""Multi-scale feature losses, SSIM, and evaluation metrics.

The feature extractor is deliberately hand-crafted and deterministic: each
pyramid level is a Gaussian-blurred, 2x-downsampled copy of the previous
one, and the per-level features are luminance plus smoothed horizontal and
vertical gradient magnitudes. Any callable producing five halving levels
can stand in for it in the metric path; the optimization path uses the
built-in extractor, for which exact cotangents are implemented below.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

PYRAMID_LEVELS = 5
PYRAMID_SIGMA = 1.0
PYRAMID_RADIUS = 3

# Half-width of the smoothing applied to |g|; keeps the gradient-magnitude
# feature differentiable at g = 0 while leaving sqrt(g^2 + eps^2) - eps
# within eps of |g| everywhere.
GRADMAG_EPS = 1e-3

DEFAULT_EXTRACTOR_ID = "lum-grad-pyramid-v1"

_KERNEL_CACHE = {}


@dataclass(frozen=True)
class LossConfig:
    """Weights and window settings for the training objective and metrics."""

    lam: float = 0.4
    training_levels: tuple = (3, 4, 5)
    metric_levels: tuple = (1, 2, 3, 4, 5)
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03

    def __post_init__(self):
        object.__setattr__(self, "training_levels", tuple(sorted(int(l) for l in self.training_levels)))
        object.__setattr__(self, "metric_levels", tuple(sorted(int(l) for l in self.metric_levels)))
        if not 0.0 <= self.lam <= 1.0:
            raise DomainError(f"lambda must be in [0, 1], got {self.lam}")
        for lv in self.training_levels + self.metric_levels:
            if not 1 <= lv <= PYRAMID_LEVELS:
                raise DomainError(f"pyramid levels must be in 1..{PYRAMID_LEVELS}, got {lv}")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise DomainError(f"ssim window must be odd and >= 3, got {self.ssim_window}")
        if self.ssim_sigma <= 0:
            raise DomainError("ssim sigma must be positive")


@dataclass
class FeaturePyramid:
    """Ordered multi-scale feature maps; level i has size (H//2^i, W//2^i)."""

    levels: list
    extractor_id: str = DEFAULT_EXTRACTOR_ID

    def __post_init__(self):
        if len(self.levels) != PYRAMID_LEVELS:
            raise DomainError(f"expected {PYRAMID_LEVELS} levels, got {len(self.levels)}")

    def level(self, i):
        """1-based access matching the usual maxpool-stage numbering."""
        return self.levels[i - 1]


# ---------------------------------------------------------------------------
# Separable correlation with exact adjoints
# ---------------------------------------------------------------------------


def gaussian_kernel(sigma, radius):
    key = (float(sigma), int(radius))
    k = _KERNEL_CACHE.get(key)
    if k is None:
        xs = np.arange(-radius, radius + 1, dtype=np.float64)
        k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
        k /= k.sum()
        _KERNEL_CACHE[key] = k
    return k


def _mirror_index(j, length):
    if length == 1:
        return np.zeros_like(j)
    period = 2 * length - 2
    j = np.mod(j, period)
    return np.where(j >= length, period - j, j)


def _small_indices(length, taps, radius, mode):
    j = np.arange(length)[:, None] + np.arange(taps)[None, :] - radius
    if mode == "reflect":
        return _mirror_index(j, length)
    return np.clip(j, 0, length - 1)


def correlate1d(x, kernel, axis, mode):
    """Same-size correlation along ``axis`` with 'reflect' or 'edge' padding."""
    kernel = np.asarray(kernel, dtype=x.dtype)
    taps = kernel.size
    radius = taps // 2
    xm = np.moveaxis(x, axis, -1)
    length = xm.shape[-1]
    if length >= radius + 2:
        xp = np.pad(xm, [(0, 0)] * (xm.ndim - 1) + [(radius, radius)], mode=mode)
        out = kernel[0] * xp[..., 0:length]
        for t in range(1, taps):
            out = out + kernel[t] * xp[..., t : t + length]
    else:
        idx = _small_indices(length, taps, radius, mode)
        out = np.zeros_like(xm)
        for t in range(taps):
            out = out + kernel[t] * xm[..., idx[:, t]]
    return np.moveaxis(out, -1, axis).astype(x.dtype, copy=False)


def correlate1d_adjoint(cot, kernel, axis, mode):
    """Exact adjoint of :func:`correlate1d` for the same kernel and mode."""
    kernel = np.asarray(kernel, dtype=cot.dtype)
    taps = kernel.size
    radius = taps // 2
    cm = np.moveaxis(cot, axis, -1)
    length = cm.shape[-1]
    if length >= radius + 2:
        padded = np.zeros(cm.shape[:-1] + (length + 2 * radius,), dtype=cot.dtype)
        for t in range(taps):
            padded[..., t : t + length] += kernel[t] * cm
        out = padded[..., radius : radius + length].copy()
        if radius > 0:
            if mode == "reflect":
                out[..., 1 : radius + 1] += padded[..., :radius][..., ::-1]
                out[..., length - radius - 1 : length - 1] += padded[..., length + radius :][..., ::-1]
            elif mode == "edge":
                out[..., 0] += padded[..., :radius].sum(axis=-1)
                out[..., length - 1] += padded[..., length + radius :].sum(axis=-1)
            else:
                raise DomainError(f"unsupported padding mode {mode!r}")
    else:
        idx = _small_indices(length, taps, radius, mode)
        out = np.zeros(cm.shape, dtype=np.float64)
        for t in range(taps):
            np.add.at(out, (Ellipsis, idx[:, t]), kernel[t] * cm)
    return np.moveaxis(out, -1, axis).astype(cot.dtype, copy=False)


def blur2d(x, kernel, mode="reflect"):
    """Separable 2-D correlation over the leading two (spatial) axes."""
    return correlate1d(correlate1d(x, kernel, 1, mode), kernel, 0, mode)


def blur2d_adjoint(cot, kernel, mode="reflect"):
    return correlate1d_adjoint(correlate1d_adjoint(cot, kernel, 0, mode), kernel, 1, mode)


# ---------------------------------------------------------------------------
# Feature pyramid
# ---------------------------------------------------------------------------

_DIFF_KERNEL = np.array([-0.5, 0.0, 0.5])


def _luminance(rgb):
    return (
        LUMA_WEIGHTS[0] * rgb[..., 0]
        + LUMA_WEIGHTS[1] * rgb[..., 1]
        + LUMA_WEIGHTS[2] * rgb[..., 2]
    )


def _downsample2(x):
    h2 = x.shape[0] // 2
    w2 = x.shape[1] // 2
    return x[0 : 2 * h2 : 2, 0 : 2 * w2 : 2]


def _downsample2_adjoint(cot, src_hw):
    out = np.zeros(src_hw + cot.shape[2:], dtype=cot.dtype)
    out[0 : 2 * cot.shape[0] : 2, 0 : 2 * cot.shape[1] : 2] = cot
    return out


def _smooth_abs(g):
    return np.sqrt(g * g + GRADMAG_EPS * GRADMAG_EPS) - GRADMAG_EPS


def _smooth_abs_deriv(g):
    return g / np.sqrt(g * g + GRADMAG_EPS * GRADMAG_EPS)


class _PyramidContext:
    """Forward intermediates kept for the exact backward pass."""

    __slots__ = ("image", "bases", "lums", "gxs", "gys", "feats")

    def __init__(self, image):
        self.image = image
        self.bases = []
        self.lums = []
        self.gxs = []
        self.gys = []
        self.feats = []


def _pyramid_forward(image, n_levels=PYRAMID_LEVELS):
    if image.ndim != 3 or image.shape[2] != 3:
        raise DomainError(f"pyramid extraction needs an (H, W, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    if h < 2**PYRAMID_LEVELS or w < 2**PYRAMID_LEVELS:
        raise DomainError(
            f"image {h}x{w} too small for a {PYRAMID_LEVELS}-level pyramid "
            f"(needs at least {2**PYRAMID_LEVELS} in each dim)"
        )
    gk = gaussian_kernel(PYRAMID_SIGMA, PYRAMID_RADIUS)
    ctx = _PyramidContext(image)
    base = image
    for _ in range(n_levels):
        base = _downsample2(blur2d(base, gk, "reflect"))
        lum = _luminance(base)
        gx = correlate1d(lum, _DIFF_KERNEL, 1, "edge")
        gy = correlate1d(lum, _DIFF_KERNEL, 0, "edge")
        feat = np.stack([lum, _smooth_abs(gx), _smooth_abs(gy)], axis=-1)
        ctx.bases.append(base)
        ctx.lums.append(lum)
        ctx.gxs.append(gx)
        ctx.gys.append(gy)
        ctx.feats.append(feat)
    return ctx


def _pyramid_backward(ctx, cot_feats):
    """Map per-level feature cotangents back to an image cotangent.

    ``cot_feats`` is a dict {1-based level: cotangent array or None}.
    """
    gk = gaussian_kernel(PYRAMID_SIGMA, PYRAMID_RADIUS)
    n = len(ctx.bases)
    cot_base = None
    for i in range(n - 1, -1, -1):
        acc = np.zeros_like(ctx.bases[i])
        if cot_base is not None:
            src_hw = ctx.bases[i].shape[:2]
            acc += blur2d_adjoint(_downsample2_adjoint(cot_base, src_hw), gk, "reflect")
        cf = cot_feats.get(i + 1)
        if cf is not None:
            cot_lum = cf[..., 0].astype(np.float64, copy=True)
            cot_gx = cf[..., 1] * _smooth_abs_deriv(ctx.gxs[i])
            cot_gy = cf[..., 2] * _smooth_abs_deriv(ctx.gys[i])
            cot_lum += correlate1d_adjoint(cot_gx, _DIFF_KERNEL, 1, "edge")
            cot_lum += correlate1d_adjoint(cot_gy, _DIFF_KERNEL, 0, "edge")
            for c, wgt in enumerate(LUMA_WEIGHTS):
                acc[..., c] += wgt * cot_lum
        cot_base = acc
    src_hw = ctx.image.shape[:2]
    return blur2d_adjoint(_downsample2_adjoint(cot_base, src_hw), gk, "reflect").astype(
        ctx.image.dtype, copy=False
    )


def extract_pyramid(image):
    """Extract the default 5-level feature pyramid of a 3-channel image."""
    ctx = _pyramid_forward(image)
    return FeaturePyramid(levels=list(ctx.feats))


# ---------------------------------------------------------------------------
# Losses and metrics
# ---------------------------------------------------------------------------


def _apply_mask(image, mask):
    if mask.shape != image.shape[:2]:
        raise DomainError(f"mask {mask.shape} does not match image {image.shape}")
    return image * (mask[..., None] if image.ndim == 3 else mask)


def _l1_terms(ctx_out, target_levels, levels):
    """Per-level mean absolute feature differences and their cotangents."""
    loss = 0.0
    cot_feats = {}
    for lv in levels:
        a = ctx_out.feats[lv - 1]
        b = target_levels[lv - 1]
        diff = a - b
        loss += float(np.mean(np.abs(diff)))
        cot_feats[lv] = np.sign(diff) / diff.size
    return loss, cot_feats


def perceptual_loss(output, target, mask, cfg):
    """Mean absolute feature difference over the training levels for one
    supervision view. The output is masked to the view's footprint; the
    target is zero outside it by construction."""
    loss, _ = perceptual_loss_grad(output, target, mask, cfg, need_grad=False)
    return loss


def perceptual_loss_grad(output, target, mask, cfg, need_grad=True):
    """Value and output-cotangent of :func:`perceptual_loss`."""
    if output.shape != target.shape:
        raise DomainError(f"output {output.shape} and target {target.shape} dims differ")
    masked = _apply_mask(output, mask)
    ctx_out = _pyramid_forward(masked)
    target_levels = _pyramid_forward(target).feats
    loss, cot_feats = _l1_terms(ctx_out, target_levels, cfg.training_levels)
    if not need_grad:
        return loss, None
    cot_masked = _pyramid_backward(ctx_out, cot_feats)
    return loss, _apply_mask(cot_masked, mask)


def ssim_map(x, y, cfg):
    """Per-pixel structural similarity with a Gaussian window.

    Multichannel inputs return the mean over per-channel maps. Borders use
    reflection padding; intensity range is taken as 1.
    """
    if x.shape != y.shape:
        raise DomainError(f"inputs differ in shape: {x.shape} vs {y.shape}")
    a = x[..., None] if x.ndim == 2 else x
    b = y[..., None] if y.ndim == 2 else y
    gk = gaussian_kernel(cfg.ssim_sigma, cfg.ssim_window // 2)
    c1 = (cfg.ssim_k1 * 1.0) ** 2
    c2 = (cfg.ssim_k2 * 1.0) ** 2
    mu_a = blur2d(a, gk)
    mu_b = blur2d(b, gk)
    s_aa = blur2d(a * a, gk)
    s_bb = blur2d(b * b, gk)
    s_ab = blur2d(a * b, gk)
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * (s_ab - mu_a * mu_b) + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * ((s_aa - mu_a * mu_a) + (s_bb - mu_b * mu_b) + c2)
    return (num / den).mean(axis=-1)


def erode_by_window(mask, window):
    """Pixels whose full window x window neighborhood lies inside ``mask``.

    Wraps horizontally (ERP seam); image top/bottom count as outside.
    """
    r = window // 2
    m = mask > 0
    if r == 0:
        return m
    mi = np.pad(m.astype(np.int64), ((r, r), (0, 0)), mode="constant")
    mi = np.pad(mi, ((0, 0), (r, r)), mode="wrap")
    cs = np.pad(mi.cumsum(axis=0).cumsum(axis=1), ((1, 0), (1, 0)), mode="constant")
    k = 2 * r + 1
    h, w = mask.shape
    total = cs[k : k + h, k : k + w] - cs[:h, k : k + w] - cs[k : k + h, :w] + cs[:h, :w]
    return total == k * k


class _SsimTargetStats:
    """Filtered target moments reused across iterations."""

    __slots__ = ("t", "mu_t", "var_t", "region", "count")

    def __init__(self, t, gk, region):
        self.t = t
        self.mu_t = blur2d(t, gk)
        self.var_t = blur2d(t * t, gk) - self.mu_t * self.mu_t
        self.region = region
        self.count = int(region.sum())


def _ssim_terms_shared(u, stats_list, cfg, need_grad):
    """Per-target (1 - mean SSIM) terms for one output image ``u``.

    The filtered output moments are target-independent and computed once;
    their cotangent contributions are likewise accumulated across targets
    before the shared adjoint filters run.
    """
    gk = gaussian_kernel(cfg.ssim_sigma, cfg.ssim_window // 2)
    c1 = cfg.ssim_k1**2
    c2 = cfg.ssim_k2**2
    mu_u = blur2d(u, gk)
    s_uu = blur2d(u * u, gk)
    var_u = s_uu - mu_u * mu_u
    terms = []
    cot_mu_acc = np.zeros_like(u) if need_grad else None
    cot_suu_acc = np.zeros_like(u) if need_grad else None
    cot_u = np.zeros_like(u) if need_grad else None
    for stats in stats_list:
        t, mu_t, var_t = stats.t, stats.mu_t, stats.var_t
        s_tu = blur2d(t * u, gk)
        a1 = 2.0 * mu_t * mu_u + c1
        a2 = 2.0 * (s_tu - mu_t * mu_u) + c2
        b1 = mu_t * mu_t + mu_u * mu_u + c1
        b2 = var_t + var_u + c2
        inv_b = 1.0 / (b1 * b2)
        s = a1 * a2 * inv_b
        region = stats.region
        n_ch = s.shape[-1]
        terms.append(1.0 - float(s[region].sum() / (stats.count * n_ch)))
        if need_grad:
            cot_s = np.zeros_like(s)
            cot_s[region] = -1.0 / (stats.count * n_ch)
            cot_mu_acc += cot_s * (
                2.0 * mu_t * (a2 - a1) * inv_b - 2.0 * mu_u * s / b1 + 2.0 * mu_u * s / b2
            )
            cot_suu_acc += cot_s * (-a1 * a2 * inv_b / b2)
            cot_u += t * blur2d_adjoint(cot_s * (2.0 * a1 * inv_b), gk)
    if need_grad:
        cot_u += blur2d_adjoint(cot_mu_acc, gk)
        cot_u += 2.0 * u * blur2d_adjoint(cot_suu_acc, gk)
    return terms, cot_u


def _ssim_regions(m_hat, masks, n_targets, window):
    if masks is None:
        region = erode_by_window(m_hat, window)
        regions = [region] * n_targets
    else:
        regions = [erode_by_window((m_hat > 0) & (m > 0), window) for m in masks]
    for n, region in enumerate(regions):
        if not region.any():
            raise DomainError(
                f"SSIM averaging region for view {n} is empty: no pixel has a full "
                f"{window}x{window} window inside the non-overlap mask"
            )
    return regions


def ssim_loss(output, targets, m_hat, cfg, masks=None):
    """Sum over views of (1 - mean SSIM) between masked output and target.

    Both images are multiplied by the exclusive-coverage mask; the mean runs
    only over pixels whose full window lies inside that mask (intersected
    with each view's footprint when ``masks`` is given), so window supports
    never straddle mask boundaries.
    """
    loss, _ = ssim_loss_grad(output, targets, m_hat, cfg, masks=masks, need_grad=False)
    return loss


def ssim_loss_grad(output, targets, m_hat, cfg, masks=None, need_grad=True):
    targets = list(targets)
    regions = _ssim_regions(m_hat, masks, len(targets), cfg.ssim_window)
    gk = gaussian_kernel(cfg.ssim_sigma, cfg.ssim_window // 2)
    u = _apply_mask(output, m_hat)
    u3 = u[..., None] if u.ndim == 2 else u
    stats_list = []
    for tgt, region in zip(targets, regions):
        if tgt.shape != output.shape:
            raise DomainError("targets must share the output dims")
        t = _apply_mask(tgt, m_hat)
        stats_list.append(_SsimTargetStats(t[..., None] if t.ndim == 2 else t, gk, region))
    terms, cot = _ssim_terms_shared(u3, stats_list, cfg, need_grad)
    total = float(sum(terms))
    if not need_grad:
        return total, None
    if output.ndim == 2:
        cot = cot[..., 0]
    return total, _apply_mask(cot, m_hat)


def total_loss(output, targets, masks, m_hat, cfg):
    """Combined objective (1-lambda) * perceptual + lambda * ssim.

    Returns (scalar, components) with components keyed 'perceptual' and
    'ssim'.
    """
    prep = prepare_losses(list(targets), list(masks), m_hat, cfg)
    total, comps, _ = loss_and_grad(output, prep, need_grad=False)
    return total, comps


def perceptual_distance(output, targets, masks, cfg=None, extractor=extract_pyramid):
    """Multi-scale feature distance over all five levels, summed over views."""
    if cfg is None:
        cfg = LossConfig()
    total = 0.0
    for tgt, mask in zip(targets, masks):
        if tgt.shape != output.shape:
            raise DomainError("targets must share the output dims")
        pyr_o = extractor(_apply_mask(output, mask))
        pyr_t = extractor(tgt)
        for lv in cfg.metric_levels:
            total += float(np.mean(np.abs(pyr_o.level(lv) - pyr_t.level(lv))))
    return total


PSNR_SENTINEL_DB = 99.0


def psnr(x, y, mask):
    """Peak signal-to-noise ratio in dB over the masked region (range 1).

    Identical images report the sentinel 99.0 dB.
    """
    if x.shape != y.shape:
        raise DomainError(f"inputs differ in shape: {x.shape} vs {y.shape}")
    sel = mask > 0
    if not sel.any():
        raise DomainError("PSNR mask selects no pixels")
    diff = (x - y).astype(np.float64)
    mse = float((diff[sel] ** 2).mean())
    if mse <= 0.0:
        return PSNR_SENTINEL_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_SENTINEL_DB)


# ---------------------------------------------------------------------------
# Prepared per-scene loss state (hot path)
# ---------------------------------------------------------------------------


@dataclass
class PreparedLosses:
    """Target-side precomputation reused across optimizer iterations."""

    cfg: LossConfig
    masks: list
    m_hat: np.ndarray
    target_feats: list = field(default_factory=list)
    ssim_stats: list = field(default_factory=list)


def prepare_losses(targets, masks, m_hat, cfg):
    if len(targets) != len(masks):
        raise DomainError("need one footprint mask per target")
    regions = _ssim_regions(m_hat, masks, len(targets), cfg.ssim_window)
    gk = gaussian_kernel(cfg.ssim_sigma, cfg.ssim_window // 2)
    prep = PreparedLosses(cfg=cfg, masks=list(masks), m_hat=m_hat)
    for tgt, region in zip(targets, regions):
        prep.target_feats.append(_pyramid_forward(tgt).feats)
        t = _apply_mask(tgt, m_hat)
        t3 = t[..., None] if t.ndim == 2 else t
        prep.ssim_stats.append(_SsimTargetStats(t3, gk, region))
    return prep


def loss_and_grad(output, prep, need_grad=True):
    """Total loss, components, and (optionally) the output cotangent."""
    cfg = prep.cfg
    l_perc = 0.0
    cot = np.zeros_like(output) if need_grad else None
    for feats, mask in zip(prep.target_feats, prep.masks):
        masked = _apply_mask(output, mask)
        ctx = _pyramid_forward(masked)
        term, cot_feats = _l1_terms(ctx, feats, cfg.training_levels)
        l_perc += term
        if need_grad:
            cot += _apply_mask(_pyramid_backward(ctx, cot_feats), mask) * (1.0 - cfg.lam)
    u = _apply_mask(output, prep.m_hat)
    terms, cot_u = _ssim_terms_shared(u, prep.ssim_stats, cfg, need_grad)
    l_ssim = float(sum(terms))
    if need_grad:
        cot += _apply_mask(cot_u, prep.m_hat) * cfg.lam
    total = (1.0 - cfg.lam) * l_perc + cfg.lam * l_ssim
    comps = {"perceptual": l_perc, "ssim": l_ssim}
    return total, comps, cot
