"""Fisheye and equirectangular camera geometry.

Conventions shared by every module downstream:

* Continuous pixel coordinates: pixel (i, j) covers [i, i+1) x [j, j+1) and
  its center sits at (i + 0.5, j + 0.5).
* World frame: right-handed with +y up. Yaw 0 looks along +z and +x points
  toward yaw 90 deg, so a camera at yaw psi has optical axis
  (sin psi, 0, cos psi). Pitch and roll are fixed to zero here; the rig
  simulator injects full-pose perturbations on top.
* ERP image: x maps longitude [-pi, pi) left to right, y maps latitude
  +pi/2 .. -pi/2 top to bottom (north pole on the top row). The longitude
  seam sits at pixel column 0.
* Fisheye: ideal equidistant projection. The radial distance from the
  principal point grows linearly with the angle theta between the ray and
  the optical axis: r = radius_px * theta / (fov/2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DomainError
from .parallel import par_map

# Source coordinate assigned to ERP pixels outside a camera's footprint.
# Far outside any image rectangle, so bilinear warping marks them invalid,
# while the warp field stays finite everywhere.
OUT_OF_FOOTPRINT = -1.0e4

# Footprint masks keep this many pixels of bilinear support inside the image
# circle, so warped samples never mix with the black outside-circle region.
CIRCLE_MARGIN_PX = 1.0

_UNIT_TOL = 1e-6


@dataclass(frozen=True)
class FisheyeCamera:
    """Ideal equidistant fisheye camera rotated about the vertical axis.

    ``radius_px`` is the image-circle radius, i.e. the radial pixel distance
    of a ray at theta = fov/2 from the principal point (cx, cy).
    """

    yaw_deg: float
    fov_deg: float = 185.0
    width: int = 512
    height: int = 512
    cx: float = None
    cy: float = None
    radius_px: float = None

    def __post_init__(self):
        if self.cx is None:
            object.__setattr__(self, "cx", self.width / 2.0)
        if self.cy is None:
            object.__setattr__(self, "cy", self.height / 2.0)
        if self.radius_px is None:
            object.__setattr__(self, "radius_px", min(self.width, self.height) / 2.0)
        if not 0.0 < self.fov_deg <= 360.0:
            raise DomainError(f"fov_deg must be in (0, 360], got {self.fov_deg}")
        if self.radius_px <= 0:
            raise DomainError(f"radius_px must be positive, got {self.radius_px}")
        if self.width <= 0 or self.height <= 0:
            raise DomainError("camera sensor size must be positive")
        if not (0.0 <= self.cx <= self.width and 0.0 <= self.cy <= self.height):
            raise DomainError("principal point must lie inside the image bounds")

    @property
    def theta_max(self):
        """Half field of view in radians."""
        return math.radians(self.fov_deg) / 2.0

    def with_yaw(self, yaw_deg):
        return replace(self, yaw_deg=float(yaw_deg))


@dataclass(frozen=True)
class RigConfig:
    """Multi-fisheye rig: input cameras plus alternate cameras used as
    registration targets, all sharing one lens model and an ERP output grid."""

    input_yaws_deg: tuple
    supervision_yaws_deg: tuple
    camera_template: FisheyeCamera
    erp_width: int
    erp_height: int

    def __post_init__(self):
        object.__setattr__(self, "input_yaws_deg", tuple(float(y) for y in self.input_yaws_deg))
        object.__setattr__(
            self, "supervision_yaws_deg", tuple(float(y) for y in self.supervision_yaws_deg)
        )
        for y in self.input_yaws_deg + self.supervision_yaws_deg:
            if not 0.0 <= y < 360.0:
                raise DomainError(f"yaw angles must be in [0, 360), got {y}")
        if len(self.input_yaws_deg) < 2:
            raise DomainError("need at least 2 input cameras")
        if set(self.input_yaws_deg) & set(self.supervision_yaws_deg):
            raise DomainError("input and supervision yaw lists must be disjoint")
        if self.erp_width != 2 * self.erp_height:
            raise DomainError(
                f"ERP output must be 2:1, got {self.erp_width}x{self.erp_height}"
            )

    @classmethod
    def default(cls, erp_height=256, fisheye_size=256, fov_deg=185.0):
        template = FisheyeCamera(
            yaw_deg=0.0, fov_deg=fov_deg, width=fisheye_size, height=fisheye_size
        )
        return cls(
            input_yaws_deg=(0.0, 120.0, 240.0),
            supervision_yaws_deg=(60.0, 180.0, 300.0),
            camera_template=template,
            erp_width=2 * erp_height,
            erp_height=erp_height,
        )

    @property
    def erp_size(self):
        """(width, height) of the output panorama."""
        return (self.erp_width, self.erp_height)

    @property
    def n_inputs(self):
        return len(self.input_yaws_deg)

    def input_cameras(self):
        return [self.camera_template.with_yaw(y) for y in self.input_yaws_deg]

    def supervision_cameras(self):
        return [self.camera_template.with_yaw(y) for y in self.supervision_yaws_deg]


def erp_pixel_to_ray(px, erp_size):
    """Map continuous ERP pixel coordinates to unit direction vectors.

    ``px`` has shape (..., 2) holding (x, y); ``erp_size`` is (width, height).
    x = 0 is longitude -pi, x = width is +pi; y = 0 is latitude +pi/2.
    """
    px = np.asarray(px, dtype=np.float64)
    if px.shape[-1] != 2:
        raise DomainError(f"pixel coords must have a trailing axis of 2, got {px.shape}")
    w, h = int(erp_size[0]), int(erp_size[1])
    x = px[..., 0]
    y = px[..., 1]
    if np.any(x < 0) or np.any(x > w) or np.any(y < 0) or np.any(y > h):
        raise DomainError("ERP pixel coordinates out of bounds")
    lon = x / w * (2.0 * math.pi) - math.pi
    lat = math.pi / 2.0 - y / h * math.pi
    cl = np.cos(lat)
    return np.stack([cl * np.sin(lon), np.sin(lat), cl * np.cos(lon)], axis=-1)


def ray_to_erp_pixel(ray, erp_size):
    """Inverse of :func:`erp_pixel_to_ray` (rays need not be unit length)."""
    ray = np.asarray(ray, dtype=np.float64)
    w, h = int(erp_size[0]), int(erp_size[1])
    lon = np.arctan2(ray[..., 0], ray[..., 2])
    norm = np.sqrt(np.sum(ray * ray, axis=-1))
    lat = np.arcsin(np.clip(ray[..., 1] / np.maximum(norm, 1e-300), -1.0, 1.0))
    x = (lon + math.pi) / (2.0 * math.pi) * w
    y = (math.pi / 2.0 - lat) / math.pi * h
    return np.stack([x, y], axis=-1)


def _check_unit(ray):
    norm = np.sqrt(np.sum(ray * ray, axis=-1))
    if np.any(np.abs(norm - 1.0) > _UNIT_TOL):
        raise DomainError("rays must be unit length within 1e-6")


def _project_equidistant(ray, cam):
    """Camera-frame projection used by both the checked and bulk paths.

    Returns (px, theta, r_px) where px has shape (..., 2).
    """
    psi = math.radians(cam.yaw_deg)
    cp, sp = math.cos(psi), math.sin(psi)
    x, y, z = ray[..., 0], ray[..., 1], ray[..., 2]
    # World -> camera: rotate by -yaw about +y.
    dx = cp * x - sp * z
    dz = sp * x + cp * z
    dy = y
    rho = np.hypot(dx, dy)
    theta = np.arctan2(rho, dz)
    safe = rho > 1e-12
    ux = np.where(safe, dx / np.where(safe, rho, 1.0), 0.0)
    uy = np.where(safe, dy / np.where(safe, rho, 1.0), 0.0)
    r_px = cam.radius_px * theta / cam.theta_max
    sx = cam.cx + r_px * ux
    sy = cam.cy - r_px * uy  # image y grows downward
    return np.stack([sx, sy], axis=-1), theta, r_px


def ray_to_fisheye_pixel(ray, cam):
    """Project unit rays into fisheye pixel coordinates.

    Returns (px, valid): px has shape (..., 2) and is finite everywhere;
    valid flags rays with theta <= fov/2 whose pixel lies inside the image
    circle.
    """
    ray = np.asarray(ray, dtype=np.float64)
    if ray.shape[-1] != 3:
        raise DomainError(f"rays must have a trailing axis of 3, got {ray.shape}")
    _check_unit(ray)
    px, theta, r_px = _project_equidistant(ray, cam)
    valid = (theta <= cam.theta_max + 1e-12) & (r_px <= cam.radius_px + 1e-9)
    return px, valid


def fisheye_pixel_to_ray(px, cam):
    """Lift fisheye pixel coordinates inside the image circle to unit rays.

    Exact inverse of :func:`ray_to_fisheye_pixel` on the valid domain.
    """
    px = np.asarray(px, dtype=np.float64)
    if px.shape[-1] != 2:
        raise DomainError(f"pixel coords must have a trailing axis of 2, got {px.shape}")
    dx = px[..., 0] - cam.cx
    dy = cam.cy - px[..., 1]
    r = np.hypot(dx, dy)
    if np.any(r > cam.radius_px * (1.0 + 1e-9)):
        raise DomainError("pixel lies outside the fisheye image circle")
    theta = r / cam.radius_px * cam.theta_max
    safe = r > 1e-12
    ux = np.where(safe, dx / np.where(safe, r, 1.0), 0.0)
    uy = np.where(safe, dy / np.where(safe, r, 1.0), 0.0)
    st = np.sin(theta)
    dcx = st * ux
    dcy = st * uy
    dcz = np.cos(theta)
    # Camera -> world: rotate by +yaw about +y.
    psi = math.radians(cam.yaw_deg)
    cp, sp = math.cos(psi), math.sin(psi)
    wx = cp * dcx + sp * dcz
    wz = -sp * dcx + cp * dcz
    return np.stack([wx, dcy, wz], axis=-1)


def fisheye_grid_rays(cam):
    """Camera-frame unit rays for every pixel center of the sensor.

    Returns (rays, inside) with rays of shape (H, W, 3) in the yaw-0 camera
    frame and inside flagging pixel centers within the image circle. Used by
    the rig simulator, which applies its own full-pose rotation.
    """
    ys = (np.arange(cam.height, dtype=np.float64) + 0.5)[:, None]
    xs = (np.arange(cam.width, dtype=np.float64) + 0.5)[None, :]
    dx = np.broadcast_to(xs - cam.cx, (cam.height, cam.width))
    dy = np.broadcast_to(cam.cy - ys, (cam.height, cam.width))
    r = np.hypot(dx, dy)
    inside = r <= cam.radius_px
    theta = r / cam.radius_px * cam.theta_max
    safe = r > 1e-12
    ux = np.where(safe, dx / np.where(safe, r, 1.0), 0.0)
    uy = np.where(safe, dy / np.where(safe, r, 1.0), 0.0)
    st = np.sin(theta)
    rays = np.stack([st * ux, st * uy, np.cos(theta)], axis=-1)
    return rays, inside


def erp_pixel_grid(erp_size):
    """Continuous center coordinates of every ERP pixel, shape (H, W, 2)."""
    w, h = int(erp_size[0]), int(erp_size[1])
    xs = (np.arange(w, dtype=np.float64) + 0.5)[None, :]
    ys = (np.arange(h, dtype=np.float64) + 0.5)[:, None]
    grid = np.empty((h, w, 2), dtype=np.float64)
    grid[..., 0] = xs
    grid[..., 1] = ys
    return grid


def build_base_warp(cam, erp_size):
    """Calibration-derived warp field for one camera over the ERP grid.

    Returns (field, mask): field (H, W, 2) holds fisheye source coordinates
    for every ERP pixel (OUT_OF_FOOTPRINT outside the camera's footprint),
    mask (H, W) is 1.0 on the footprint. The footprint keeps
    CIRCLE_MARGIN_PX of bilinear support inside the image circle.
    """
    grid = erp_pixel_grid(erp_size)
    rays = erp_pixel_to_ray(grid, erp_size)
    px, theta, r_px = _project_equidistant(rays, cam)
    valid = (theta <= cam.theta_max) & (r_px <= cam.radius_px - CIRCLE_MARGIN_PX)
    field = np.where(valid[..., None], px, OUT_OF_FOOTPRINT)
    return field, valid.astype(np.float32)


def weak_supervision_masks(rig):
    """Footprint masks of the supervision cameras and the exclusive-coverage mask.

    Returns (masks, m_hat): masks[n] is the ERP footprint of supervision
    camera n; m_hat flags pixels covered by exactly one supervision camera.
    """
    cams = rig.supervision_cameras()
    results = par_map(lambda c: build_base_warp(c, rig.erp_size), cams)
    masks = [m for _, m in results]
    count = np.zeros_like(masks[0])
    for m in masks:
        count = count + m
    m_hat = (count == 1.0).astype(np.float32)
    return masks, m_hat
