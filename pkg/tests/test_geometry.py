import math

import numpy as np
import pytest

from panostitch import geometry
from panostitch.errors import DomainError
from panostitch.geometry import FisheyeCamera, RigConfig


def test_erp_center_pixel_is_forward_axis():
    ray = geometry.erp_pixel_to_ray(np.array([512.0, 256.0]), (1024, 512))
    assert np.allclose(ray, [0.0, 0.0, 1.0], atol=1e-12)


def test_erp_left_edge_is_longitude_minus_pi():
    ray = geometry.erp_pixel_to_ray(np.array([0.0, 256.0]), (1024, 512))
    assert np.allclose(ray, [0.0, 0.0, -1.0], atol=1e-9)


def test_erp_rays_are_unit(rng):
    px = np.stack(
        [rng.uniform(0, 1024, 500), rng.uniform(0, 512, 500)], axis=-1
    )
    rays = geometry.erp_pixel_to_ray(px, (1024, 512))
    norms = np.linalg.norm(rays, axis=-1)
    assert np.max(np.abs(norms - 1.0)) < 1e-6


def test_erp_out_of_bounds_rejected():
    with pytest.raises(DomainError):
        geometry.erp_pixel_to_ray(np.array([1025.0, 10.0]), (1024, 512))
    with pytest.raises(DomainError):
        geometry.erp_pixel_to_ray(np.array([10.0, -0.5]), (1024, 512))


def test_camera_validation():
    with pytest.raises(DomainError):
        FisheyeCamera(yaw_deg=0.0, fov_deg=0.0)
    with pytest.raises(DomainError):
        FisheyeCamera(yaw_deg=0.0, radius_px=-1.0)
    with pytest.raises(DomainError):
        FisheyeCamera(yaw_deg=0.0, cx=-5.0)


def test_optical_axis_projects_to_principal_point():
    cam = FisheyeCamera(yaw_deg=30.0, width=512, height=512)
    psi = math.radians(30.0)
    axis = np.array([math.sin(psi), 0.0, math.cos(psi)])
    px, valid = geometry.ray_to_fisheye_pixel(axis, cam)
    assert valid
    assert np.allclose(px, [cam.cx, cam.cy], atol=1e-9)


def test_fov_boundary_ray_hits_image_circle():
    cam = FisheyeCamera(yaw_deg=0.0, fov_deg=185.0, width=512, height=512)
    theta = cam.theta_max
    ray = np.array([math.sin(theta), 0.0, math.cos(theta)])
    px, _ = geometry.ray_to_fisheye_pixel(ray, cam)
    dist = math.hypot(px[0] - cam.cx, px[1] - cam.cy)
    assert abs(dist - cam.radius_px) < 1e-9


def test_non_unit_ray_rejected():
    cam = FisheyeCamera(yaw_deg=0.0)
    with pytest.raises(DomainError):
        geometry.ray_to_fisheye_pixel(np.array([0.0, 0.0, 2.0]), cam)


def test_principal_point_lifts_to_optical_axis():
    cam = FisheyeCamera(yaw_deg=75.0, width=256, height=256)
    ray = geometry.fisheye_pixel_to_ray(np.array([cam.cx, cam.cy]), cam)
    psi = math.radians(75.0)
    assert np.allclose(ray, [math.sin(psi), 0.0, math.cos(psi)], atol=1e-12)


def test_pixel_outside_circle_rejected():
    cam = FisheyeCamera(yaw_deg=0.0, width=256, height=256)
    with pytest.raises(DomainError):
        geometry.fisheye_pixel_to_ray(np.array([cam.cx + cam.radius_px + 1.0, cam.cy]), cam)


def test_circle_boundary_pixel_has_max_theta():
    cam = FisheyeCamera(yaw_deg=0.0, fov_deg=185.0, width=256, height=256)
    px = np.array([cam.cx + cam.radius_px, cam.cy])
    ray = geometry.fisheye_pixel_to_ray(px, cam)
    theta = math.acos(np.clip(ray[2], -1, 1))
    assert abs(theta - cam.theta_max) < 1e-6


def test_projection_round_trip_pixels(rng):
    cam = FisheyeCamera(yaw_deg=37.0, fov_deg=185.0, width=512, height=512)
    ang = rng.uniform(0.0, 2.0 * math.pi, 10_000)
    rad = np.sqrt(rng.uniform(0.0, 1.0, 10_000)) * cam.radius_px
    px = np.stack([cam.cx + rad * np.cos(ang), cam.cy + rad * np.sin(ang)], axis=-1)
    rays = geometry.fisheye_pixel_to_ray(px, cam)
    px2, valid = geometry.ray_to_fisheye_pixel(rays, cam)
    assert valid.all()
    assert np.max(np.abs(px2 - px)) < 1e-4


def test_projection_round_trip_rays(rng):
    cam = FisheyeCamera(yaw_deg=210.0, fov_deg=185.0, width=512, height=512)
    ang = rng.uniform(0.0, 2.0 * math.pi, 2000)
    rad = np.sqrt(rng.uniform(0.0, 1.0, 2000)) * cam.radius_px * 0.999
    px = np.stack([cam.cx + rad * np.cos(ang), cam.cy + rad * np.sin(ang)], axis=-1)
    rays = geometry.fisheye_pixel_to_ray(px, cam)
    px2, _ = geometry.ray_to_fisheye_pixel(rays, cam)
    rays2 = geometry.fisheye_pixel_to_ray(px2, cam)
    dots = np.clip(np.sum(rays * rays2, axis=-1), -1.0, 1.0)
    assert np.max(np.arccos(dots)) < 1e-6


def test_yaw_equivariance(rng):
    cam = FisheyeCamera(yaw_deg=20.0, fov_deg=185.0, width=512, height=512)
    delta = 47.0
    cam2 = cam.with_yaw(cam.yaw_deg + delta)
    ang = rng.uniform(0.0, 2.0 * math.pi, 1000)
    rad = np.sqrt(rng.uniform(0.0, 1.0, 1000)) * cam.radius_px
    px = np.stack([cam.cx + rad * np.cos(ang), cam.cy + rad * np.sin(ang)], axis=-1)
    rays = geometry.fisheye_pixel_to_ray(px, cam)
    d = math.radians(delta)
    rot = np.array(
        [[math.cos(d), 0.0, math.sin(d)], [0.0, 1.0, 0.0], [-math.sin(d), 0.0, math.cos(d)]]
    )
    rays_rot = rays @ rot.T
    px2, _ = geometry.ray_to_fisheye_pixel(rays_rot, cam2)
    assert np.max(np.abs(px2 - px)) < 1e-6


def test_base_warp_axis_pixel_maps_to_principal_point():
    # Choose yaw and odd ERP height so one pixel center sits exactly on the
    # optical axis.
    w, h = 128, 65
    yaw = math.degrees((w / 2 + 0.5) / w * 2.0 * math.pi - math.pi)
    cam = FisheyeCamera(yaw_deg=yaw, width=128, height=128)
    field, mask = geometry.build_base_warp(cam, (w, h))
    j = (h - 1) // 2
    assert mask[j, w // 2] == 1.0
    assert np.allclose(field[j, w // 2], [cam.cx, cam.cy], atol=1e-9)


def test_base_warp_finite_and_sentinel():
    cam = FisheyeCamera(yaw_deg=90.0, width=128, height=128)
    field, mask = geometry.build_base_warp(cam, (128, 64))
    assert np.all(np.isfinite(field))
    outside = mask == 0.0
    assert np.all(field[outside] == geometry.OUT_OF_FOOTPRINT)


def test_mask_coverage_matches_spherical_cap():
    cam = FisheyeCamera(yaw_deg=45.0, fov_deg=185.0, width=512, height=512)
    _, mask = geometry.build_base_warp(cam, (1024, 512))
    lat = math.pi / 2 - (np.arange(512) + 0.5) / 512 * math.pi
    weights = np.cos(lat)[:, None] * np.ones((1, 1024))
    coverage = float((mask * weights).sum() / weights.sum())
    analytic = (1.0 - math.cos(math.radians(92.5))) / 2.0
    assert abs(coverage - analytic) / analytic < 0.01


def test_cameras_120_apart_overlap():
    cam_a = FisheyeCamera(yaw_deg=0.0, fov_deg=185.0, width=256, height=256)
    cam_b = FisheyeCamera(yaw_deg=120.0, fov_deg=185.0, width=256, height=256)
    _, m_a = geometry.build_base_warp(cam_a, (256, 128))
    _, m_b = geometry.build_base_warp(cam_b, (256, 128))
    assert ((m_a > 0) & (m_b > 0)).any()


def test_weak_supervision_masks_default_rig(tiny_rig):
    masks, m_hat = geometry.weak_supervision_masks(tiny_rig)
    union = np.zeros_like(masks[0])
    for m in masks:
        assert set(np.unique(m)) <= {0.0, 1.0}
        assert m.sum() > 0
        union = np.maximum(union, m)
    assert m_hat.sum() > 0
    assert np.all(m_hat <= union)
    # exactly-one semantics: no m_hat pixel lies in any pairwise overlap
    for i in range(len(masks)):
        for j in range(i + 1, len(masks)):
            overlap = (masks[i] > 0) & (masks[j] > 0)
            assert not (overlap & (m_hat > 0)).any()


def test_narrow_fov_supervision_masks_have_no_overlap():
    rig = RigConfig(
        input_yaws_deg=(0.0, 120.0, 240.0),
        supervision_yaws_deg=(60.0, 180.0, 300.0),
        camera_template=FisheyeCamera(yaw_deg=0.0, fov_deg=120.0, width=128, height=128),
        erp_width=256,
        erp_height=128,
    )
    masks, m_hat = geometry.weak_supervision_masks(rig)
    union = np.zeros_like(masks[0])
    for i in range(len(masks)):
        union = np.maximum(union, masks[i])
        for j in range(i + 1, len(masks)):
            assert not ((masks[i] > 0) & (masks[j] > 0)).any()
    assert np.array_equal(m_hat, union)


def test_rig_validation():
    template = FisheyeCamera(yaw_deg=0.0, width=64, height=64)
    with pytest.raises(DomainError):
        RigConfig((0.0,), (60.0,), template, 128, 64)
    with pytest.raises(DomainError):
        RigConfig((0.0, 120.0), (0.0, 180.0), template, 128, 64)
    with pytest.raises(DomainError):
        RigConfig((0.0, 120.0), (60.0, 180.0), template, 100, 64)
    with pytest.raises(DomainError):
        RigConfig((0.0, 370.0), (60.0,), template, 128, 64)
