"""Synthetic multi-fisheye capture rig.

Renders input fisheye images and ERP-projected supervision views from a
source panorama, with controllable pose and color perturbations. Input
renders use the perturbed camera poses while their warp fields are built
from the nominal poses, so the pose error is exactly what downstream
optimization has to absorb. Supervision views are likewise rendered with
their (possibly perturbed) poses but projected with nominal calibration,
then color-harmonized against a reference view.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import color, config, geometry, image_core
from .errors import ConfigError, DomainError
from .parallel import par_map


@dataclass(frozen=True)
class CameraPerturb:
    """Pose and color error injected into one rendered camera."""

    yaw_err_deg: float = 0.0
    pitch_err_deg: float = 0.0
    roll_err_deg: float = 0.0
    gain: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.gain <= 0:
            raise DomainError("gain must be positive")
        if self.gamma <= 0:
            raise DomainError("gamma must be positive")

    @property
    def is_identity_pose(self):
        return self.yaw_err_deg == 0.0 and self.pitch_err_deg == 0.0 and self.roll_err_deg == 0.0


@dataclass(frozen=True)
class PerturbationSpec:
    """Per-camera perturbations for the input and supervision groups."""

    input: tuple = ()
    supervision: tuple = ()
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise DomainError("noise_sigma must be >= 0")

    @classmethod
    def identity(cls, n_inputs=3, n_supervision=3, seed=0):
        return cls(
            input=tuple(CameraPerturb() for _ in range(n_inputs)),
            supervision=tuple(CameraPerturb() for _ in range(n_supervision)),
            seed=seed,
        )

    def for_rig(self, rig):
        """Pad or validate the per-camera lists against a rig."""
        inp = list(self.input) + [CameraPerturb()] * (rig.n_inputs - len(self.input))
        sup = list(self.supervision) + [CameraPerturb()] * (
            len(rig.supervision_yaws_deg) - len(self.supervision)
        )
        if len(inp) != rig.n_inputs or len(sup) != len(rig.supervision_yaws_deg):
            raise DomainError("perturbation spec lists more cameras than the rig has")
        return replace(self, input=tuple(inp), supervision=tuple(sup))


@dataclass
class SceneBundle:
    """Everything one optimization run consumes, plus the held-out truth."""

    inputs: list
    supervision_erp: list
    masks: list
    m_hat: np.ndarray
    base_fields: list
    truth_panorama: np.ndarray
    rig: geometry.RigConfig
    perturb: PerturbationSpec = None


def pose_matrix(yaw_deg, pitch_deg=0.0, roll_deg=0.0):
    """Camera-to-world rotation: yaw about +y, then pitch about +x, then
    roll about the optical axis."""
    cy, sy = math.cos(math.radians(yaw_deg)), math.sin(math.radians(yaw_deg))
    cp, sp = math.cos(math.radians(pitch_deg)), math.sin(math.radians(pitch_deg))
    cr, sr = math.cos(math.radians(roll_deg)), math.sin(math.radians(roll_deg))
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return ry @ rx @ rz


def _sample_erp_wrapped(source, x, y):
    """Bilinear ERP sampling: horizontal wrap at the seam, vertical clamp."""
    h, w = source.shape[:2]
    fx = x - 0.5
    fy = np.clip(y - 0.5, 0.0, h - 1.0)
    x0f = np.floor(fx)
    tx = fx - x0f
    x0 = np.mod(x0f.astype(np.int64), w)
    x1 = np.mod(x0 + 1, w)
    y0 = np.floor(fy).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    if source.ndim == 3:
        tx = tx[..., None]
        ty = (fy - np.floor(fy))[..., None]
    else:
        ty = fy - np.floor(fy)
    v00 = source[y0, x0]
    v01 = source[y0, x1]
    v10 = source[y1, x0]
    v11 = source[y1, x1]
    top = v00 + tx * (v01 - v00)
    bot = v10 + tx * (v11 - v10)
    return top + ty * (bot - top)


def render_fisheye(source_erp, cam, rotation=None):
    """Render one fisheye view of a full ERP panorama.

    Pixels outside the image circle are 0. ``rotation`` overrides the
    camera-to-world pose (default: the camera's yaw).
    """
    if source_erp.ndim not in (2, 3):
        raise DomainError("source panorama must be (H, W) or (H, W, C)")
    rays, inside = geometry.fisheye_grid_rays(cam)
    if rotation is None:
        rotation = pose_matrix(cam.yaw_deg)
    world = rays @ np.asarray(rotation, dtype=np.float64).T
    h, w = source_erp.shape[:2]
    lon = np.arctan2(world[..., 0], world[..., 2])
    lat = np.arcsin(np.clip(world[..., 1], -1.0, 1.0))
    x = (lon + math.pi) / (2.0 * math.pi) * w
    y = (math.pi / 2.0 - lat) / math.pi * h
    out = _sample_erp_wrapped(source_erp, x, y)
    ins = inside[..., None] if out.ndim == 3 else inside
    return np.where(ins, out, 0.0).astype(source_erp.dtype, copy=False)


def _apply_color_perturb(img, pert, rng, noise_sigma):
    out = img
    if pert.gamma != 1.0:
        out = np.power(np.clip(out, 0.0, None), pert.gamma)
    if pert.gain != 1.0:
        out = pert.gain * out
    if noise_sigma > 0.0:
        out = out + rng.normal(0.0, noise_sigma, size=out.shape)
    if pert.gamma != 1.0 or pert.gain != 1.0 or noise_sigma > 0.0:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(img.dtype, copy=False)


def synthetic_panorama(erp_size, seed=0, n_waves=6):
    """Smooth, seam-continuous test panorama in [0.1, 0.9], float32 RGB.

    Longitude frequencies are integers so the pattern wraps exactly at the
    ERP seam.
    """
    w, h = int(erp_size[0]), int(erp_size[1])
    rng = np.random.default_rng([int(seed), 0x5EED])
    lon = ((np.arange(w) + 0.5) / w * 2.0 * math.pi)[None, :]
    lat = (math.pi / 2.0 - (np.arange(h) + 0.5) / h * math.pi)[:, None]
    img = np.zeros((h, w, 3), dtype=np.float64)
    for c in range(3):
        acc = np.zeros((h, w), dtype=np.float64)
        for _ in range(n_waves):
            k = rng.integers(1, 6)
            m = rng.uniform(0.5, 4.0)
            p1 = rng.uniform(0.0, 2.0 * math.pi)
            p2 = rng.uniform(0.0, 2.0 * math.pi)
            amp = rng.uniform(0.3, 1.0)
            acc += amp * np.sin(k * lon + p1) * np.cos(m * lat + p2)
        lo, hi = acc.min(), acc.max()
        span = max(hi - lo, 1e-9)
        img[..., c] = 0.1 + 0.8 * (acc - lo) / span
    return img.astype(np.float32)


def make_scene(source_erp, rig, perturb=None, *, reference_yaw=None, patch_radius=2, grid_step=4):
    """Render a complete training scene from a source panorama.

    Returns a :class:`SceneBundle`: perturbed input renders, nominal-pose
    base warp fields, color-harmonized ERP supervision views with their
    footprint masks and the exclusive-coverage mask, and the untouched
    source as held-out truth.
    """
    if source_erp.ndim != 3 or source_erp.shape[2] != 3:
        raise DomainError("source panorama must be (H, W, 3)")
    if perturb is None:
        perturb = PerturbationSpec.identity(rig.n_inputs, len(rig.supervision_yaws_deg))
    perturb = perturb.for_rig(rig)

    in_cams = rig.input_cameras()
    sup_cams = rig.supervision_cameras()

    def _render(args):
        group, idx, cam, pert = args
        rot = pose_matrix(
            cam.yaw_deg + pert.yaw_err_deg, pert.pitch_err_deg, pert.roll_err_deg
        )
        img = render_fisheye(source_erp, cam, rotation=rot)
        rng = np.random.default_rng([perturb.seed, group, idx])
        return _apply_color_perturb(img, pert, rng, perturb.noise_sigma)

    jobs = [(0, i, cam, perturb.input[i]) for i, cam in enumerate(in_cams)]
    jobs += [(1, i, cam, perturb.supervision[i]) for i, cam in enumerate(sup_cams)]
    rendered = par_map(_render, jobs)
    inputs = rendered[: len(in_cams)]
    sup_renders = rendered[len(in_cams) :]

    base_fields = [f for f, _ in par_map(lambda c: geometry.build_base_warp(c, rig.erp_size), in_cams)]
    masks, m_hat = geometry.weak_supervision_masks(rig)

    sup_erp = []
    for cam, img, mask in zip(sup_cams, sup_renders, masks):
        field, _ = geometry.build_base_warp(cam, rig.erp_size)
        projected, _ = image_core.warp(img, field.astype(source_erp.dtype))
        sup_erp.append(projected * mask[..., None])

    if reference_yaw is None:
        reference_yaw = 180.0 if 180.0 in rig.supervision_yaws_deg else rig.supervision_yaws_deg[0]
    ref_idx = list(rig.supervision_yaws_deg).index(reference_yaw)
    queries = [im for i, im in enumerate(sup_erp) if i != ref_idx]
    corrected, _polys = color.correct_weak_supervision(
        queries,
        sup_erp[ref_idx],
        rig,
        reference_yaw=reference_yaw,
        patch_radius=patch_radius,
        grid_step=grid_step,
    )
    out_sup = []
    qi = 0
    for i, mask in enumerate(masks):
        if i == ref_idx:
            out_sup.append(sup_erp[i])
        else:
            out_sup.append(corrected[qi] * mask[..., None])
            qi += 1

    return SceneBundle(
        inputs=inputs,
        supervision_erp=out_sup,
        masks=masks,
        m_hat=m_hat,
        base_fields=base_fields,
        truth_panorama=source_erp.copy(),
        rig=rig,
        perturb=perturb,
    )


# ---------------------------------------------------------------------------
# Perturbation spec files and on-disk scene layout
# ---------------------------------------------------------------------------

_PERT_FIELDS = ("yaw_err_deg", "pitch_err_deg", "roll_err_deg", "gain", "gamma")


def parse_perturbation_text(text):
    """Parse a perturbation spec: ``input.N.field``, ``supervision.N.field``,
    ``noise_sigma`` and ``seed`` keys."""
    groups = {"input": {}, "supervision": {}}
    noise_sigma = 0.0
    seed = 0
    for key, raw in config.parse_kv_text(text).items():
        if key == "noise_sigma":
            noise_sigma = float(raw)
            continue
        if key == "seed":
            seed = int(raw)
            continue
        parts = key.split(".")
        if len(parts) != 3 or parts[0] not in groups or parts[2] not in _PERT_FIELDS:
            raise ConfigError(f"unknown perturbation key {key!r}")
        try:
            idx = int(parts[1])
        except ValueError:
            raise ConfigError(f"bad camera index in {key!r}")
        groups[parts[0]].setdefault(idx, {})[parts[2]] = float(raw)

    def _build(entries):
        if not entries:
            return ()
        n = max(entries) + 1
        return tuple(CameraPerturb(**entries.get(i, {})) for i in range(n))

    return PerturbationSpec(
        input=_build(groups["input"]),
        supervision=_build(groups["supervision"]),
        noise_sigma=noise_sigma,
        seed=seed,
    )


def load_perturbation_file(path):
    with open(path, "r", encoding="utf-8") as f:
        return parse_perturbation_text(f.read())


MANIFEST_NAME = "manifest.txt"


def save_scene(bundle, out_dir):
    """Write a scene directory: inputs/, supervision/, masks/, truth.png
    and a manifest listing every artifact with its perturbation values."""
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("inputs", "supervision", "masks"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    rig = bundle.rig
    lines = [
        "# scene manifest",
        f"rig.input_yaws = {','.join(repr(y) for y in rig.input_yaws_deg)}",
        f"rig.supervision_yaws = {','.join(repr(y) for y in rig.supervision_yaws_deg)}",
        f"rig.fov_deg = {rig.camera_template.fov_deg!r}",
        f"rig.fisheye_size = {rig.camera_template.width}",
        f"rig.erp_size = {rig.erp_width}x{rig.erp_height}",
    ]
    pert = bundle.perturb or PerturbationSpec.identity(
        rig.n_inputs, len(rig.supervision_yaws_deg)
    )
    lines.append(f"noise_sigma = {pert.noise_sigma!r}")
    lines.append(f"seed = {pert.seed}")
    for i, img in enumerate(bundle.inputs):
        rel = f"inputs/input_{i:03d}.png"
        image_core.write_png(os.path.join(out_dir, rel), img)
        lines.append(f"input.{i}.file = {rel}")
        for f in _PERT_FIELDS:
            lines.append(f"input.{i}.{f} = {getattr(pert.input[i], f)!r}")
    for i, img in enumerate(bundle.supervision_erp):
        rel = f"supervision/supervision_{i:03d}.png"
        image_core.write_png(os.path.join(out_dir, rel), img)
        lines.append(f"supervision.{i}.file = {rel}")
        rel_mask = f"masks/mask_{i:03d}.wssf"
        image_core.write_wssf(os.path.join(out_dir, rel_mask), bundle.masks[i])
        lines.append(f"supervision.{i}.mask = {rel_mask}")
        for f in _PERT_FIELDS:
            lines.append(f"supervision.{i}.{f} = {getattr(pert.supervision[i], f)!r}")
    image_core.write_wssf(os.path.join(out_dir, "masks/m_hat.wssf"), bundle.m_hat)
    lines.append("m_hat = masks/m_hat.wssf")
    image_core.write_png(os.path.join(out_dir, "truth.png"), bundle.truth_panorama)
    lines.append("truth = truth.png")
    with open(os.path.join(out_dir, MANIFEST_NAME), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_scene(scene_dir):
    """Load a scene directory written by :func:`save_scene`.

    Base warp fields are recomputed from the nominal rig (deterministic),
    not stored. A missing truth image is tolerated (truth_panorama = None).
    """
    manifest_path = os.path.join(scene_dir, MANIFEST_NAME)
    with open(manifest_path, "r", encoding="utf-8") as f:
        kv = config.parse_kv_text(f.read())
    size = int(kv["rig.fisheye_size"])
    erp_w, erp_h = (int(p) for p in kv["rig.erp_size"].split("x"))
    template = geometry.FisheyeCamera(
        yaw_deg=0.0, fov_deg=float(kv["rig.fov_deg"]), width=size, height=size
    )
    rig = geometry.RigConfig(
        input_yaws_deg=tuple(float(p) for p in kv["rig.input_yaws"].split(",")),
        supervision_yaws_deg=tuple(float(p) for p in kv["rig.supervision_yaws"].split(",")),
        camera_template=template,
        erp_width=erp_w,
        erp_height=erp_h,
    )
    inputs = []
    for i in range(rig.n_inputs):
        inputs.append(image_core.read_png(os.path.join(scene_dir, kv[f"input.{i}.file"])))
    supervision = []
    masks = []
    for i in range(len(rig.supervision_yaws_deg)):
        supervision.append(
            image_core.read_png(os.path.join(scene_dir, kv[f"supervision.{i}.file"]))
        )
        masks.append(image_core.read_wssf(os.path.join(scene_dir, kv[f"supervision.{i}.mask"])))
    m_hat = image_core.read_wssf(os.path.join(scene_dir, kv["m_hat"]))
    truth = None
    truth_rel = kv.get("truth")
    if truth_rel:
        truth_path = os.path.join(scene_dir, truth_rel)
        if os.path.exists(truth_path):
            truth = image_core.read_png(truth_path)
    base_fields = [
        f for f, _ in par_map(lambda c: geometry.build_base_warp(c, rig.erp_size), rig.input_cameras())
    ]
    return SceneBundle(
        inputs=inputs,
        supervision_erp=supervision,
        masks=masks,
        m_hat=m_hat,
        base_fields=base_fields,
        truth_panorama=truth,
        rig=rig,
        perturb=None,
    )
