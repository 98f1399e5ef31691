"""Procedural street scenes, LiDAR ray casting and pinhole rendering with ground truth."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli_w

from . import IGNORE
from ._toml import load_toml
from .netpbm import read_pgm, read_ppm, write_pgm16, write_ppm
from .projection import CameraCalibration, read_calibration, write_calibration
from .rangeseg import LidarSpec, PointCloud, read_cloud_csv, write_cloud_csv

SKY_COLOR = (144, 208, 240)
PIXEL_NOISE_SIGMA = 8.0
SHADOW_FACTOR = 0.45
GROUND_GT = 0


@dataclass(frozen=True)
class Archetype:
    name: str
    shape: str  # "box" or "cylinder"
    class_name: str
    # box: (length, width, height); cylinder: (radius, height)
    size: tuple[float, ...]
    size_jitter: float = 0.1
    z_base: float = 0.0
    # height band (fractions of the object height) painted in the shared accent colour
    accent: tuple[float, float] | None = None


ARCHETYPES = (
    Archetype("car", "box", "vehicle", (4.0, 1.8, 1.5), accent=(0.62, 1.0)),
    Archetype("pedestrian", "cylinder", "person", (0.3, 1.75), accent=(0.0, 0.45)),
    Archetype("pole", "cylinder", "pole", (0.15, 4.0)),
    Archetype("wall", "box", "wall", (0.5, 7.0, 3.0), size_jitter=0.2),
    Archetype("bush", "box", "vegetation", (1.5, 2.0, 1.0)),
    Archetype("sign", "box", "pole", (0.3, 1.2, 0.9), z_base=1.8),
)


@dataclass(frozen=True)
class ClassPalette:
    """GT class names and colours; index 0 is the ground class."""
    names: tuple[str, ...] = ("road", "vehicle", "person", "pole", "wall", "vegetation")
    colors: tuple[tuple[int, int, int], ...] = (
        (112, 112, 112), (208, 48, 48), (240, 176, 48), (48, 48, 208), (176, 144, 112), (48, 176, 48),
    )
    # windows, trousers: one dark colour shared across classes
    accent: tuple[int, int, int] = (40, 40, 56)

    def __post_init__(self):
        if len(self.names) != len(self.colors):
            raise ValueError("palette names and colours differ in length")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def class_id(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class SceneSpec:
    n_objects: int = 8
    palette: ClassPalette = ClassPalette()
    min_distance: float = 6.0
    max_distance: float = 28.0
    max_bearing: float = math.radians(40.0)
    clearance: float = 0.5
    max_retries: int = 200
    sun_elevation: tuple[float, float] = (math.radians(25.0), math.radians(40.0))


@dataclass(frozen=True)
class Primitive:
    shape: str
    center: tuple[float, float]
    size: tuple[float, ...]
    z_base: float
    class_id: int
    color: tuple[int, int, int]
    archetype: str
    accent: tuple[float, float] | None = None

    @property
    def height(self) -> float:
        return self.size[-1]

    def footprint(self) -> tuple[float, float, float, float]:
        """Axis-aligned (xmin, xmax, ymin, ymax) of the ground footprint."""
        x, y = self.center
        if self.shape == "box":
            hl, hw = self.size[0] / 2, self.size[1] / 2
        else:
            hl = hw = self.size[0]
        return x - hl, x + hl, y - hw, y + hw


@dataclass(frozen=True)
class Scene:
    primitives: tuple[Primitive, ...]
    seed: int
    palette: ClassPalette = ClassPalette()
    sun: tuple[float, float, float] | None = None  # unit vector towards the sun; None disables shadows


@dataclass
class SimFrame:
    frame_id: str
    cloud: PointCloud
    lidar: LidarSpec
    calib: CameraCalibration
    image: np.ndarray
    gt_class: np.ndarray
    gt_instance: np.ndarray
    sensor_height: float
    seed: int
    class_names: tuple[str, ...] = ClassPalette().names
    lidar_hit_instance: np.ndarray | None = field(default=None, repr=False)


def default_lidar() -> LidarSpec:
    return LidarSpec.uniform(32, 360, math.radians(-25.0), math.radians(5.0))


def default_calibration(width: int = 192, height: int = 128, lidar_height: float = 1.8,
                        camera_height: float = 1.6, hfov: float = math.radians(90.0),
                        frame_id: str | None = None) -> CameraCalibration:
    """Forward-looking camera (+x of the LiDAR) below the LiDAR on the same vertical axis."""
    f = (width / 2) / math.tan(hfov / 2)
    # camera axes: x right = -y_lidar, y down = -z_lidar, z forward = +x_lidar
    rot = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    offset = np.array([0.0, 0.0, lidar_height - camera_height])  # lidar origin minus camera origin
    T = np.eye(4)
    T[:3, :3] = rot
    T[:3, 3] = rot @ offset
    return CameraCalibration(f, f, (width - 1) / 2, (height - 1) / 2, width, height, T, frame_id=frame_id)


def _overlap(a: tuple, b: tuple, clearance: float) -> bool:
    return not (a[1] + clearance <= b[0] or b[1] + clearance <= a[0]
                or a[3] + clearance <= b[2] or b[3] + clearance <= a[2])


def generate_scene(seed: int, spec: SceneSpec = SceneSpec()) -> Scene:
    rng = np.random.default_rng([seed, 0x5CE7E])
    palette = spec.palette
    placed: list[Primitive] = []
    for _ in range(spec.n_objects):
        arch = ARCHETYPES[int(rng.integers(len(ARCHETYPES)))]
        cid = palette.class_id(arch.class_name)
        base = np.array(palette.colors[cid])
        color = tuple(int(c) for c in np.clip(base + rng.integers(-6, 7, size=3), 0, 255))
        size = tuple(float(s * (1 + arch.size_jitter * rng.uniform(-1, 1))) for s in arch.size)
        for _attempt in range(spec.max_retries):
            dist = rng.uniform(spec.min_distance, spec.max_distance)
            bearing = rng.uniform(-spec.max_bearing, spec.max_bearing)
            prim = Primitive(arch.shape, (float(dist * math.cos(bearing)), float(dist * math.sin(bearing))),
                             size, arch.z_base, cid, color, arch.name, arch.accent)
            if all(not _overlap(prim.footprint(), other.footprint(), spec.clearance) for other in placed):
                placed.append(prim)
                break
        else:
            raise RuntimeError(f"could not place object {len(placed) + 1} after {spec.max_retries} tries")
    sun_rng = np.random.default_rng([seed, 0x5E1])
    az = sun_rng.uniform(-math.pi, math.pi)
    el = sun_rng.uniform(*spec.sun_elevation)
    sun = (math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el))
    return Scene(tuple(placed), seed, palette, sun)


# -- ray casting -------------------------------------------------------------

def _ray_box(origin: np.ndarray, dirs: np.ndarray, prim: Primitive) -> np.ndarray:
    xmin, xmax, ymin, ymax = prim.footprint()
    lo = np.array([xmin, ymin, prim.z_base])
    hi = np.array([xmax, ymax, prim.z_base + prim.height])
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    # zero direction components: inside the slab -> unbounded, outside -> miss
    par = dirs == 0
    inside = (origin >= lo) & (origin <= hi)
    tmin_ax = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    tmax_ax = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    tnear = tmin_ax.max(axis=-1)
    tfar = tmax_ax.min(axis=-1)
    hit = (tnear <= tfar) & (tnear > 1e-9)
    return np.where(hit, tnear, np.inf)


def _ray_cylinder(origin: np.ndarray, dirs: np.ndarray, prim: Primitive) -> np.ndarray:
    cx, cy = prim.center
    radius, height = prim.size
    z0, z1 = prim.z_base, prim.z_base + height
    ox, oy, oz = origin[..., 0] - cx, origin[..., 1] - cy, origin[..., 2]
    dx, dy, dz = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    a = dx * dx + dy * dy
    b = 2 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - radius * radius
    disc = b * b - 4 * a * c
    t_side = np.full(dirs.shape[:-1], np.inf)
    ok = (a > 0) & (disc >= 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        sq = np.sqrt(np.where(ok, disc, 0.0))
        ta = np.where(ok, (-b - sq) / (2 * np.where(ok, a, 1.0)), np.inf)
    z_at = oz + ta * dz
    side = ok & (ta > 1e-9) & (z_at >= z0) & (z_at <= z1)
    t_side[side] = ta[side]
    t_cap = np.full(dirs.shape[:-1], np.inf)
    for zc in (z0, z1):
        with np.errstate(invalid="ignore", divide="ignore"):
            tc = np.where(dz != 0, (zc - oz) / np.where(dz != 0, dz, 1.0), np.inf)
        px, py = ox + tc * dx, oy + tc * dy
        cap = (tc > 1e-9) & (px * px + py * py <= radius * radius)
        t_cap = np.where(cap, np.minimum(t_cap, tc), t_cap)
    return np.minimum(t_side, t_cap)


def cast_rays(scene: Scene, origin, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit distance and instance per ray: -1 none, 0 ground, i+1 for primitive i."""
    origin = np.asarray(origin, dtype=np.float64)
    t_best = np.full(dirs.shape[:-1], np.inf)
    inst = np.full(dirs.shape[:-1], -1, dtype=np.int64)
    dz = dirs[..., 2]
    if origin[2] > 0:
        with np.errstate(divide="ignore"):
            tg = np.where(dz < 0, -origin[2] / np.where(dz < 0, dz, -1.0), np.inf)
        hit = np.isfinite(tg)
        t_best[hit] = tg[hit]
        inst[hit] = 0
    for i, prim in enumerate(scene.primitives):
        t = _ray_box(origin, dirs, prim) if prim.shape == "box" else _ray_cylinder(origin, dirs, prim)
        closer = t < t_best
        t_best[closer] = t[closer]
        inst[closer] = i + 1
    return t_best, inst


def simulate_lidar(scene: Scene, lidar: LidarSpec, sensor_height: float,
                   max_range: float = 150.0, frame_id: str | None = None,
                   return_instances: bool = False):
    """One point per (beam, azimuth) cell in the sensor frame; no-hit cells are invalid."""
    if sensor_height <= 0:
        raise ValueError("sensor height must be positive")
    dirs = lidar.ray_directions()
    origin = np.array([0.0, 0.0, sensor_height])
    t, inst = cast_rays(scene, origin, dirs)
    valid = np.isfinite(t) & (t <= max_range)
    xyz = np.where(valid[..., None], dirs * np.where(valid, t, 0.0)[..., None], 0.0)
    rows, cols = np.mgrid[0:lidar.beams, 0:lidar.azimuth_steps]
    cloud = PointCloud(xyz.reshape(-1, 3), rows.ravel(), cols.ravel(), valid.ravel(), frame_id=frame_id)
    if return_instances:
        return cloud, np.where(valid, inst, -1)
    return cloud


def camera_center(calib: CameraCalibration, lidar_origin) -> np.ndarray:
    """Camera centre in the world, given the LiDAR origin (axes aligned with the world)."""
    return np.asarray(lidar_origin, dtype=np.float64) - calib.rotation.T @ calib.translation


def render_camera(scene: Scene, calib: CameraCalibration, lidar_origin, noise_seed: int,
                  noise_sigma: float = PIXEL_NOISE_SIGMA):
    """Ray-cast every pixel centre. Returns (rgb uint8, gt class, gt instance)."""
    h, w = calib.height, calib.width
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    d_cam = np.stack([(uu - calib.cx) / calib.fx, (vv - calib.cy) / calib.fy, np.ones_like(uu)], axis=-1)
    dirs = d_cam @ calib.rotation  # camera -> lidar/world axes
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    t, inst = cast_rays(scene, camera_center(calib, lidar_origin), dirs)

    palette = scene.palette
    colors = np.array([palette.colors[GROUND_GT]] + [p.color for p in scene.primitives], dtype=np.float64)
    classes = np.array([GROUND_GT] + [p.class_id for p in scene.primitives], dtype=np.int64)
    sky = inst < 0
    safe = np.where(sky, 0, inst)
    base = colors[safe]
    hit_z = camera_center(calib, lidar_origin)[2] + np.where(sky, 0.0, t) * dirs[..., 2]
    for i, prim in enumerate(scene.primitives):
        if prim.accent is None:
            continue
        lo, hi = (prim.z_base + f * prim.height for f in prim.accent)
        band = (inst == i + 1) & (hit_z >= lo) & (hit_z <= hi)
        base[band] = palette.accent
    if scene.sun is not None:
        ground = inst == 0
        pts = camera_center(calib, lidar_origin) + t[ground][:, None] * dirs[ground]
        pts[:, 2] = 1e-6
        sun = np.broadcast_to(np.asarray(scene.sun, dtype=np.float64), pts.shape)
        shade = np.zeros(len(pts), dtype=bool)
        for prim in scene.primitives:
            ts = _ray_box(pts, sun, prim) if prim.shape == "box" else _ray_cylinder(pts, sun, prim)
            shade |= np.isfinite(ts)
        lit = base[ground]
        lit[shade] *= SHADOW_FACTOR
        base[ground] = lit
    rng = np.random.default_rng([noise_seed, 0xC0103])
    rgb = base + rng.normal(0.0, noise_sigma, size=(h, w, 3))
    rgb[sky] = SKY_COLOR
    rgb = np.clip(np.round(rgb), 0, 255).astype(np.uint8)
    gt_class = np.where(sky, IGNORE, classes[safe])
    gt_instance = np.where(sky, IGNORE, inst)
    return rgb, gt_class, gt_instance


@dataclass(frozen=True)
class FrameSpec:
    scene: SceneSpec = SceneSpec()
    width: int = 192
    height: int = 128
    lidar_height: float = 1.8
    camera_height: float = 1.6
    beams: int = 32
    azimuth_steps: int = 360
    min_elevation: float = math.radians(-25.0)
    max_elevation: float = math.radians(5.0)
    noise_sigma: float = PIXEL_NOISE_SIGMA


def simulate_frame(seed: int, frame_id: str, spec: FrameSpec = FrameSpec()) -> SimFrame:
    scene = generate_scene(seed, spec.scene)
    lidar = LidarSpec.uniform(spec.beams, spec.azimuth_steps, spec.min_elevation, spec.max_elevation)
    calib = default_calibration(spec.width, spec.height, spec.lidar_height, spec.camera_height,
                                frame_id=frame_id)
    cloud, hit_inst = simulate_lidar(scene, lidar, spec.lidar_height, frame_id=frame_id,
                                     return_instances=True)
    rgb, gt_class, gt_inst = render_camera(scene, calib, (0.0, 0.0, spec.lidar_height), seed,
                                           spec.noise_sigma)
    return SimFrame(frame_id, cloud, lidar, calib, rgb, gt_class, gt_inst, spec.lidar_height, seed,
                    scene.palette.names, hit_inst)


# -- persistence -------------------------------------------------------------

FRAME_FILES = {
    "cloud": "cloud.csv", "calib": "calib.toml", "image": "image.ppm",
    "gt_class": "gt_class.pgm", "gt_instance": "gt_instance.pgm", "meta": "meta.toml",
}


def write_frame(directory: str | Path, frame: SimFrame) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_cloud_csv(d / FRAME_FILES["cloud"], frame.cloud)
    write_calibration(d / FRAME_FILES["calib"], frame.calib)
    write_ppm(d / FRAME_FILES["image"], frame.image)
    write_pgm16(d / FRAME_FILES["gt_class"], frame.gt_class)
    write_pgm16(d / FRAME_FILES["gt_instance"], frame.gt_instance)
    meta = {
        "frame_id": frame.frame_id,
        "seed": int(frame.seed),
        "sensor_height": float(frame.sensor_height),
        "class_names": list(frame.class_names),
        "lidar": lidar_to_dict(frame.lidar),
    }
    (d / FRAME_FILES["meta"]).write_text(tomli_w.dumps(meta))


def lidar_to_dict(lidar: LidarSpec) -> dict:
    return {
        "elevation_angles": [float(x) for x in lidar.elevation_angles],
        "azimuth_steps": int(lidar.azimuth_steps),
        "azimuth_origin": float(lidar.azimuth_origin),
        "azimuth_span": float(lidar.azimuth_span),
    }


def lidar_from_dict(doc: dict) -> LidarSpec:
    return LidarSpec(np.array(doc["elevation_angles"], dtype=np.float64), int(doc["azimuth_steps"]),
                     float(doc["azimuth_origin"]), float(doc["azimuth_span"]))


def read_frame(directory: str | Path) -> SimFrame:
    d = Path(directory)
    meta = load_toml(d / FRAME_FILES["meta"])
    fid = meta["frame_id"]
    return SimFrame(
        frame_id=fid,
        cloud=read_cloud_csv(d / FRAME_FILES["cloud"], frame_id=fid),
        lidar=lidar_from_dict(meta["lidar"]),
        calib=read_calibration(d / FRAME_FILES["calib"]),
        image=read_ppm(d / FRAME_FILES["image"]),
        gt_class=read_pgm(d / FRAME_FILES["gt_class"]),
        gt_instance=read_pgm(d / FRAME_FILES["gt_instance"]),
        sensor_height=float(meta["sensor_height"]),
        seed=int(meta["seed"]),
        class_names=tuple(meta.get("class_names", ClassPalette().names)),
    )
