import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dseg import IGNORE
from dseg.projection import project_point, transform_point
from dseg.synth import (SHADOW_FACTOR, SKY_COLOR, ClassPalette, FrameSpec, Primitive, Scene, SceneSpec,
                        cast_rays, default_calibration, default_lidar, generate_scene, read_frame,
                        render_camera, simulate_frame, simulate_lidar, write_frame)

from oracles import ray_box_slab, ray_plane_range


def test_same_seed_same_scene():
    assert generate_scene(5) == generate_scene(5)
    assert generate_scene(5) != generate_scene(6)


def test_empty_scene():
    scene = generate_scene(1, SceneSpec(n_objects=0))
    assert scene.primitives == ()


@pytest.mark.parametrize("seed", range(10))
def test_objects_do_not_overlap(seed):
    spec = SceneSpec(n_objects=5)
    prims = generate_scene(seed, spec).primitives
    assert len(prims) == 5
    for i, a in enumerate(prims):
        ax0, ax1, ay0, ay1 = a.footprint()
        for b in prims[i + 1:]:
            bx0, bx1, by0, by1 = b.footprint()
            gap_x = max(bx0 - ax1, ax0 - bx1)
            gap_y = max(by0 - ay1, ay0 - by1)
            assert max(gap_x, gap_y) >= spec.clearance - 1e-12


def test_ground_only_ranges():
    scene = Scene((), 0)
    lidar = default_lidar()
    cloud = simulate_lidar(scene, lidar, 1.8)
    ranges = np.linalg.norm(cloud.xyz, axis=1).reshape(lidar.beams, lidar.azimuth_steps)
    valid = cloud.valid.reshape(lidar.beams, lidar.azimuth_steps)
    for b, phi in enumerate(lidar.elevation_angles):
        if phi < 0:
            assert valid[b].all()
            assert np.allclose(ranges[b], ray_plane_range(1.8, phi), rtol=1e-12)
        else:
            assert not valid[b].any()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_box_hit_matches_slab_oracle(seed):
    rng = np.random.default_rng(seed)
    prim = Primitive("box", (float(rng.uniform(5, 15)), float(rng.uniform(-4, 4))),
                     (float(rng.uniform(0.5, 4)), float(rng.uniform(0.5, 3)), float(rng.uniform(0.5, 3))),
                     float(rng.choice([0.0, 1.0])), 1, (0, 0, 0), "x")
    scene = Scene((prim,), 0, sun=None)
    origin = np.array([0.0, 0.0, 1.8])
    dirs = rng.normal(size=(40, 3))
    dirs[:, 0] = np.abs(dirs[:, 0]) + 0.5
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    t, inst = cast_rays(scene, origin, dirs)
    x0, x1, y0, y1 = prim.footprint()
    lo, hi = (x0, y0, prim.z_base), (x1, y1, prim.z_base + prim.height)
    for d, ti, ii in zip(dirs, t, inst):
        tb = ray_box_slab(origin, d, lo, hi)
        tg = 1.8 / -d[2] if d[2] < 0 else math.inf
        if tb < tg:
            assert ii == 1 and abs(ti - tb) < 1e-9
        elif math.isfinite(tg):
            assert ii == 0 and abs(ti - tg) < 1e-9
        else:
            assert ii == -1


def test_horizon_splits_sky_and_ground():
    calib = default_calibration()
    rgb, gt, inst = render_camera(Scene((), 0, sun=None), calib, (0.0, 0.0, 1.8), 0, noise_sigma=0.0)
    horizon = calib.cy  # optical axis is horizontal
    rows = np.arange(calib.height)
    sky_rows = rows[rows < horizon]
    ground_rows = rows[rows > horizon]
    assert (gt[sky_rows] == IGNORE).all() and (rgb[sky_rows] == SKY_COLOR).all()
    assert (gt[ground_rows] == 0).all()
    assert (rgb[ground_rows] == ClassPalette().colors[0]).all()


def test_box_silhouette_matches_projected_corners():
    prim = Primitive("box", (12.0, 1.0), (3.0, 2.0, 1.5), 0.0, 1, (200, 40, 40), "car")
    calib = default_calibration()
    _, _, inst = render_camera(Scene((prim,), 0, sun=None), calib, (0.0, 0.0, 1.8), 0, noise_sigma=0.0)
    x0, x1, y0, y1 = prim.footprint()
    corners = [(x, y, z - 1.8) for x in (x0, x1) for y in (y0, y1) for z in (0.0, 1.5)]
    uv = np.array([project_point(transform_point(c, calib), calib) for c in corners])
    rows, cols = np.nonzero(inst == 1)
    assert abs(cols.min() - uv[:, 0].min()) <= 1 and abs(cols.max() - uv[:, 0].max()) <= 1
    assert abs(rows.min() - uv[:, 1].min()) <= 1 and abs(rows.max() - uv[:, 1].max()) <= 1


def test_accent_band_painted():
    prim = Primitive("box", (10.0, 0.0), (4.0, 1.8, 1.5), 0.0, 1, (208, 48, 48), "car", (0.62, 1.0))
    calib = default_calibration()
    rgb, gt, inst = render_camera(Scene((prim,), 0, sun=None), calib, (0.0, 0.0, 1.8), 0, noise_sigma=0.0)
    car = inst == 1
    accent = car & (rgb == ClassPalette().accent).all(axis=-1)
    body = car & (rgb == (208, 48, 48)).all(axis=-1)
    assert accent.any() and body.any()
    assert (accent | body)[car].all()
    # the band sits above the body in the image
    assert np.nonzero(accent)[0].mean() < np.nonzero(body)[0].mean()
    assert (gt[car] == 1).all()


def test_shadow_darkens_ground_only_with_sun():
    pole = Primitive("cylinder", (8.0, 0.0), (0.6, 4.0), 0.0, 3, (48, 48, 208), "pole")
    calib = default_calibration()
    sun = (0.0, -math.cos(math.radians(30)), math.sin(math.radians(30)))  # shadow falls sideways
    lit, _, inst = render_camera(Scene((pole,), 0, sun=None), calib, (0, 0, 1.8), 0, noise_sigma=0.0)
    shaded, _, _ = render_camera(Scene((pole,), 0, sun=sun), calib, (0, 0, 1.8), 0, noise_sigma=0.0)
    changed = (lit != shaded).any(axis=-1)
    assert changed.any()
    assert (inst[changed] == 0).all()
    expected = np.round(np.array(ClassPalette().colors[0]) * SHADOW_FACTOR)
    assert (shaded[changed] == expected).all()


def test_frame_determinism():
    a, b = simulate_frame(3, "a"), simulate_frame(3, "a")
    assert np.array_equal(a.image, b.image) and np.array_equal(a.cloud.xyz, b.cloud.xyz)
    assert np.array_equal(a.gt_class, b.gt_class)


def test_noise_sigma_zero_gives_flat_colours():
    frame = simulate_frame(4, "f", FrameSpec(noise_sigma=0.0))
    ground = frame.gt_class == 0
    # ground is either lit or shaded road grey
    road = np.array(ClassPalette().colors[0])
    colours = {tuple(c) for c in frame.image[ground].tolist()}
    assert colours <= {tuple(road), tuple(np.round(road * SHADOW_FACTOR).astype(int))}


def test_frame_round_trip(tmp_path):
    frame = simulate_frame(2, "f002")
    write_frame(tmp_path / "f002", frame)
    back = read_frame(tmp_path / "f002")
    assert back.frame_id == "f002" and back.seed == 2
    assert np.array_equal(back.image, frame.image)
    assert np.array_equal(back.gt_class, frame.gt_class)
    assert np.array_equal(back.gt_instance, frame.gt_instance)
    assert np.array_equal(back.cloud.valid, frame.cloud.valid)
    assert np.allclose(back.cloud.xyz, frame.cloud.xyz, rtol=0, atol=0)
    assert np.array_equal(back.lidar.elevation_angles, frame.lidar.elevation_angles)
    assert np.array_equal(back.calib.T_lidar_to_cam, frame.calib.T_lidar_to_cam)


def test_sensor_height_must_be_positive():
    with pytest.raises(ValueError):
        simulate_lidar(Scene((), 0), default_lidar(), 0.0)
