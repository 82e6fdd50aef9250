"""Virtual hand-held scanner.

Synthesizes smooth jittered orbit trajectories, partitions frames into
pattern groups, renders patch lumitexels for training pairs, scores image
blur (re-blur / neighbor-difference attenuation) and rejects blurry groups.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from . import tnsr
from .geometry import (CameraIntrinsics, DepthRange, Pose, look_at, project,
                       relative_pose, rotation_about_axis, rotation_angle)
from .meshes import SceneObject
from .radiometry import LightSource, lumitexels_for_points, rig_arrays, rig_to_world
from .seeding import stream


class InfeasibleBounds(ValueError):
    """Velocity bounds cannot accommodate the requested motion."""


class TooFewFrames(ValueError):
    """Fewer frames than one group needs."""


class VisibilityFailure(RuntimeError):
    """Could not find a mutually visible training configuration."""

    def __init__(self, retries: int):
        super().__init__(f"no visible training pair after {retries} retries")
        self.retries = retries


@dataclass(frozen=True)
class TrajectoryConfig:
    duration: float = 8.0  # seconds
    frame_rate: float = 30.0
    angular_velocity: float = 0.8  # rad/s bound on inter-frame rotation
    linear_velocity: float = 0.35  # m/s bound on inter-frame translation
    orbit_radius: float = 0.38  # mean camera distance, meters
    jitter_position: float = 0.03  # keypoint jitter, meters
    jitter_angle: float = 0.12  # keypoint roll/elevation jitter, radians
    seed: int = 0

    def __post_init__(self):
        if self.duration <= 0 or self.frame_rate <= 0:
            raise ValueError("duration and frame rate must be positive")
        if self.angular_velocity < 0 or self.linear_velocity < 0:
            raise InfeasibleBounds("velocity bounds must be non-negative")


@dataclass(frozen=True)
class ScanGroup:
    """#p consecutive views; view i was captured under pattern i."""

    frame_ids: tuple[int, ...]
    poses: tuple[Pose, ...]

    def __post_init__(self):
        if len(self.frame_ids) != len(self.poses):
            raise ValueError("frame id / pose count mismatch")

    @property
    def size(self) -> int:
        return len(self.poses)

    @property
    def center_index(self) -> int:
        return (self.size + 1) // 2 - 1  # ceil(p/2), zero-based

    @property
    def center_pose(self) -> Pose:
        return self.poses[self.center_index]


def synth_trajectory(cfg: TrajectoryConfig) -> list[Pose]:
    """Seeded C2-smooth orbit with jitter, respecting per-frame motion bounds.

    Zero bounds with zero jitter give a constant pose sequence; zero bounds
    with nonzero jitter are infeasible.
    """
    n = max(2, int(round(cfg.duration * cfg.frame_rate)))
    rng = stream(cfg.seed, "trajectory")
    max_rot = cfg.angular_velocity / cfg.frame_rate
    max_trans = cfg.linear_velocity / cfg.frame_rate

    static = cfg.angular_velocity == 0 and cfg.linear_velocity == 0
    if static and (cfg.jitter_position > 0 or cfg.jitter_angle > 0):
        raise InfeasibleBounds("zero velocity bounds exclude jittered motion")

    # keypoints every ~0.5 s in orbit coordinates
    key_dt = 0.5
    n_keys = max(4, int(np.ceil(cfg.duration / key_dt)) + 3)
    t_keys = np.linspace(0.0, cfg.duration, n_keys)

    sweep_rate = 0.0 if static else min(0.5 * cfg.angular_velocity, 0.6)
    az = sweep_rate * t_keys + rng.normal(0, cfg.jitter_angle, n_keys)
    el = 0.35 + rng.normal(0, cfg.jitter_angle, n_keys)
    rad = cfg.orbit_radius + rng.normal(0, cfg.jitter_position, n_keys)
    roll = rng.normal(0, cfg.jitter_angle * 0.5, n_keys)
    target = rng.normal(0, cfg.jitter_position * 0.3, (n_keys, 3))
    if static:
        az[:] = az[0]
        el[:] = el[0]
        rad[:] = rad[0]
        roll[:] = roll[0]
        target[:] = target[0]

    t_frames = np.arange(n) / cfg.frame_rate
    t_frames = np.minimum(t_frames, cfg.duration)
    curves = {}
    for name, vals in (("az", az), ("el", el), ("rad", rad), ("roll", roll)):
        curves[name] = CubicSpline(t_keys, vals, bc_type="natural")(t_frames)
    tgt = CubicSpline(t_keys, target, axis=0, bc_type="natural")(t_frames)

    poses = []
    for i in range(n):
        a, e, r = curves["az"][i], curves["el"][i], curves["rad"][i]
        eye = tgt[i] + r * np.array([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)])
        base = look_at(eye, tgt[i], np.array([0.0, 0.0, 1.0]))
        fwd = base.rotation[2]  # view axis in world
        rot = rotation_about_axis(fwd, curves["roll"][i]) @ base.rotation.T
        poses.append(Pose(rot.T, -rot.T @ eye))

    if not static:
        for p0, p1 in zip(poses[:-1], poses[1:]):
            rel = relative_pose(p1, p0)
            if rotation_angle(rel.rotation) > max_rot + 1e-9:
                raise InfeasibleBounds(
                    f"inter-frame rotation {rotation_angle(rel.rotation):.4f} rad "
                    f"exceeds bound {max_rot:.4f}; reduce jitter or raise the bound")
            step = np.linalg.norm(p1.camera_center() - p0.camera_center())
            if step > max_trans + 1e-9:
                raise InfeasibleBounds(
                    f"inter-frame translation {step:.4f} m exceeds bound {max_trans:.4f}")
    return poses


def make_groups(frames: list[Pose], p: int) -> list[ScanGroup]:
    """Partition a frame sequence into disjoint consecutive groups of p."""
    if len(frames) < p:
        raise TooFewFrames(f"{len(frames)} frames cannot form a group of {p}")
    groups = []
    for g in range(len(frames) // p):
        ids = tuple(range(g * p, (g + 1) * p))
        groups.append(ScanGroup(ids, tuple(frames[i] for i in ids)))
    return groups


# -- blur ----------------------------------------------------------------------

class BlurScore(float):
    """Blur level in [0, 1]; ``degenerate`` marks edge-free (constant) input."""

    degenerate: bool = False

    def __new__(cls, value: float, degenerate: bool = False):
        obj = super().__new__(cls, value)
        obj.degenerate = degenerate
        return obj


def _box_blur(img: np.ndarray, axis: int, size: int) -> np.ndarray:
    pad = size // 2
    widths = [(0, 0), (0, 0)]
    widths[axis] = (pad, pad)
    padded = np.pad(img, widths, mode="edge")
    c = np.cumsum(padded, axis=axis, dtype=np.float64)
    zero = np.zeros_like(np.take(c, [0], axis=axis))
    c = np.concatenate([zero, c], axis=axis)
    hi = np.take(c, range(size, c.shape[axis]), axis=axis)
    lo = np.take(c, range(0, c.shape[axis] - size), axis=axis)
    return (hi - lo) / size


def blurriness(image: np.ndarray, kernel: int = 9) -> BlurScore:
    """Perceptual no-reference blur: re-blur and measure edge attenuation.

    A strong box blur is applied separately along each axis; the metric
    compares how much neighboring-pixel differences survive.  Sharp images
    lose a lot (score near 0), already-blurry images lose little (score
    near 1).  Invariant to affine intensity scaling.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 8 or img.shape[1] < 8:
        raise ValueError(f"blurriness needs a 2D image at least 8x8, got {img.shape}")

    scores = []
    for axis in (0, 1):
        blurred = _box_blur(img, axis, kernel)
        d_img = np.abs(np.diff(img, axis=axis))
        d_blur = np.abs(np.diff(blurred, axis=axis))
        variation = np.maximum(0.0, d_img - d_blur)
        s_img = d_img.sum()
        if s_img <= 0:
            scores.append(None)
            continue
        scores.append((s_img - variation.sum()) / s_img)
    if all(s is None for s in scores):
        return BlurScore(1.0, degenerate=True)
    return BlurScore(max(s for s in scores if s is not None))


def filter_groups(groups: list[ScanGroup], images: dict[int, np.ndarray],
                  threshold: float) -> list[ScanGroup]:
    """Keep groups whose images are all strictly below the blur threshold."""
    kept = []
    for g in groups:
        worst = max(float(blurriness(images[f])) for f in g.frame_ids)
        if worst < threshold:
            kept.append(g)
    return kept


def group_blur_report(groups: list[ScanGroup], images: dict[int, np.ndarray]
                      ) -> list[tuple[ScanGroup, float]]:
    return [(g, max(float(blurriness(images[f])) for f in g.frame_ids)) for g in groups]


# -- training pairs -------------------------------------------------------------

PATCH = 19
PATCH_HALF = PATCH // 2


@dataclass
class GroupObservation:
    """One group's view of a training point."""

    poses: list[Pose]  # length #p
    center_pixel: np.ndarray  # (2,) integer pixel in the center view
    depth_range: DepthRange
    lumitexels: np.ndarray  # (#p, PATCH, PATCH, L, C) float32
    valid: np.ndarray  # (#p, PATCH, PATCH) bool


@dataclass
class TrainingSample:
    object_index: int
    point: np.ndarray  # (3,)
    intrinsics: CameraIntrinsics
    groups: tuple[GroupObservation, GroupObservation]


def sample_view_distance(rng: np.random.Generator, lo: float = 0.16, hi: float = 0.65) -> float:
    return float(rng.uniform(lo, hi))


def _direction_about(normal: np.ndarray, rng: np.random.Generator,
                     max_angle: float = 1.2) -> np.ndarray:
    """Random unit direction within ``max_angle`` of the normal."""
    cos_t = rng.uniform(np.cos(max_angle), 1.0)
    sin_t = np.sqrt(max(0.0, 1 - cos_t * cos_t))
    phi = rng.uniform(0, 2 * np.pi)
    a = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(normal, a)
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    return cos_t * normal + sin_t * (np.cos(phi) * u + np.sin(phi) * v)


def _pose_through_pixel(cam_pos: np.ndarray, point: np.ndarray, pixel: np.ndarray,
                        intr: CameraIntrinsics, roll: float) -> Pose:
    """World-to-camera pose placing ``point`` exactly on ``pixel``."""
    v_world = point - cam_pos
    v_world = v_world / np.linalg.norm(v_world)
    up = np.array([0.0, 0.0, 1.0])
    if abs(v_world @ up) > 0.98:
        up = np.array([0.0, 1.0, 0.0])
    base = look_at(cam_pos, point, up)
    ray_cam = np.array([(pixel[0] - intr.cx) / intr.fx, (pixel[1] - intr.cy) / intr.fy, 1.0])
    ray_cam /= np.linalg.norm(ray_cam)
    # base maps v_world to +z; rotate camera frame so v_world maps to ray_cam
    axis = np.cross(np.array([0.0, 0.0, 1.0]), ray_cam)
    s = np.linalg.norm(axis)
    if s < 1e-12:
        align = np.eye(3)
    else:
        ang = np.arcsin(np.clip(s, -1, 1))
        align = rotation_about_axis(axis / s, ang)
    # align @ z = ray_cam, so R = align @ base.R sends v_world to ray_cam
    r = align @ base.rotation
    r = rotation_about_axis(ray_cam, roll) @ r
    return Pose(r, -r @ cam_pos)


def _render_patch(obj: SceneObject, pose: Pose, intr: CameraIntrinsics,
                  center_pixel: np.ndarray, rig: list[LightSource],
                  light_occlusion: bool = False):
    """Lumitexels for every pixel of the PATCH x PATCH window.

    Returns (lumitexels (PATCH, PATCH, L, C) float32, valid (PATCH, PATCH)).
    Pixels that miss the object carry zeros.
    """
    lp, ln, le, la = rig_arrays(rig_to_world(rig, pose))
    cam = pose.camera_center()
    us = center_pixel[0] + np.arange(PATCH) - PATCH_HALF
    vs = center_pixel[1] + np.arange(PATCH) - PATCH_HALF
    uu, vv = np.meshgrid(us, vs, indexing="xy")  # row-major: [v, u]
    dirs_cam = np.stack([(uu.ravel() - intr.cx) / intr.fx,
                         (vv.ravel() - intr.cy) / intr.fy,
                         np.ones(PATCH * PATCH)], axis=1)
    dirs_world = dirs_cam @ pose.rotation
    origins = np.broadcast_to(cam, dirs_world.shape)
    subset = obj.mesh.cull_cone(cam, dirs_world)
    hit, t, tri, bary = obj.mesh.raycast(origins, dirs_world, subset=subset)

    channels = obj.material.channels
    lum = np.zeros((PATCH * PATCH, lp.shape[0], channels), dtype=np.float32)
    if np.any(hit):
        pos, nrm, tan, rho_d, rho_s, ax, ay = obj.surface_attributes(tri[hit], bary[hit])
        occ = obj.mesh if light_occlusion else None
        vals = lumitexels_for_points(pos, nrm, tan, rho_d, rho_s, ax, ay,
                                     lp, ln, le, la, cam, occluder=occ)
        lum[hit] = vals.astype(np.float32)
    return (lum.reshape(PATCH, PATCH, lp.shape[0], channels),
            hit.reshape(PATCH, PATCH))


def _depth_range_for(obj: SceneObject, pose: Pose) -> DepthRange:
    center, radius = obj.mesh._bounding_sphere()
    z = float(pose.to_camera(center[None])[0, 2])
    margin = 1.3 * radius
    return DepthRange(max(0.03, z - margin), z + margin)


def sample_training_pair(objects: list[SceneObject], motions: list[list[Pose]],
                         seed: int, intr: CameraIntrinsics, rig: list[LightSource],
                         pattern_count: int = 5, max_retries: int = 60,
                         light_occlusion: bool = False) -> TrainingSample:
    """One surface point seen by two independent scan groups.

    The point projects exactly onto an integer patch-center pixel in each
    group's center view; the other poses of a group come from a random
    window of a recorded motion, applied relative to the center pose.
    """
    rng = stream(seed, "training-pair")
    margin = PATCH_HALF + 3
    center_idx = (pattern_count + 1) // 2 - 1
    for attempt in range(max_retries):
        obj_idx = int(rng.integers(len(objects)))
        obj = objects[obj_idx]
        pos, nrm, _, _ = obj.mesh.sample_surface(rng, 1)
        pos, nrm = pos[0], nrm[0]

        group_obs = []
        ok = True
        for _ in range(2):
            view_dir = _direction_about(nrm, rng)
            dist = sample_view_distance(rng)
            cam_pos = pos + view_dir * dist
            if obj.mesh.segment_occluded(pos[None] + 1e-5 * nrm[None], cam_pos[None])[0]:
                ok = False
                break
            pixel = np.array([int(rng.integers(margin, intr.width - margin)),
                              int(rng.integers(margin, intr.height - margin))], dtype=np.float64)
            roll = rng.uniform(0, 2 * np.pi)
            center_pose = _pose_through_pixel(cam_pos, pos, pixel, intr, roll)

            motion = motions[int(rng.integers(len(motions)))]
            w = int(rng.integers(0, len(motion) - pattern_count + 1))
            rels = [relative_pose(motion[w + i], motion[w + center_idx])
                    for i in range(pattern_count)]
            poses = [rel.compose(center_pose) for rel in rels]

            # all views must keep the patch inside the image
            for p in poses:
                try:
                    px, _ = project(intr, p, pos)
                except Exception:
                    ok = False
                    break
                if not (margin - 3 <= px[0] < intr.width - margin + 3
                        and margin - 3 <= px[1] < intr.height - margin + 3):
                    ok = False
                    break
            if not ok:
                break
            group_obs.append((poses, pixel, center_pose))
        if not ok or len(group_obs) < 2:
            continue

        groups = []
        for poses, pixel, _center in group_obs:
            lums = []
            valids = []
            for p in poses:
                lum, valid = _render_patch(obj, p, intr, pixel, rig, light_occlusion)
                lums.append(lum)
                valids.append(valid)
            groups.append(GroupObservation(
                poses=poses, center_pixel=pixel,
                depth_range=_depth_range_for(obj, poses[center_idx]),
                lumitexels=np.stack(lums), valid=np.stack(valids)))
        return TrainingSample(obj_idx, pos, intr, (groups[0], groups[1]))
    raise VisibilityFailure(max_retries)


def motion_pool(seed: int, count: int = 8, cfg: TrajectoryConfig | None = None) -> list[list[Pose]]:
    """Seeded stand-ins for recorded hand-held scan motions."""
    pool = []
    for k in range(count):
        c = cfg or TrajectoryConfig()
        pool.append(synth_trajectory(TrajectoryConfig(
            duration=c.duration, frame_rate=c.frame_rate,
            angular_velocity=c.angular_velocity, linear_velocity=c.linear_velocity,
            orbit_radius=c.orbit_radius, jitter_position=c.jitter_position,
            jitter_angle=c.jitter_angle, seed=stream(seed, f"motion-{k}").integers(2**31))))
    return pool


# -- dataset shards --------------------------------------------------------------

@dataclass
class DatasetSpec:
    lights: int
    channels: int
    pattern_count: int = 5

    @property
    def record_floats(self) -> int:
        per_group = 2 + 2 + self.pattern_count * 12
        lum = 2 * self.pattern_count * PATCH * PATCH * self.lights * self.channels
        valid = 2 * self.pattern_count * PATCH * PATCH
        return 6 + 3 + 1 + 2 * per_group + lum + valid


def pack_sample(spec: DatasetSpec, s: TrainingSample) -> np.ndarray:
    intr = s.intrinsics
    parts = [np.array([intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height]),
             s.point, np.array([s.object_index])]
    for g in s.groups:
        parts.append(g.center_pixel)
        parts.append(np.array([g.depth_range.z_min, g.depth_range.z_max]))
        for p in g.poses:
            parts.append(p.rotation.reshape(-1))
            parts.append(p.translation)
    for g in s.groups:
        parts.append(g.lumitexels.reshape(-1))
    for g in s.groups:
        parts.append(g.valid.astype(np.float32).reshape(-1))
    rec = np.concatenate([np.asarray(p, dtype=np.float32).reshape(-1) for p in parts])
    if rec.size != spec.record_floats:
        raise ValueError(f"record is {rec.size} floats, spec says {spec.record_floats}")
    return rec


def unpack_sample(spec: DatasetSpec, rec: np.ndarray) -> TrainingSample:
    p = spec.pattern_count
    off = 0

    def take(n):
        nonlocal off
        out = rec[off:off + n]
        off += n
        return np.asarray(out, dtype=np.float64)

    k = take(6)
    intr = CameraIntrinsics(float(k[0]), float(k[1]), float(k[2]), float(k[3]),
                            int(k[4]), int(k[5]))
    point = take(3)
    obj_idx = int(take(1)[0])
    metas = []
    for _ in range(2):
        pixel = take(2)
        zr = take(2)
        poses = []
        for _ in range(p):
            r = take(9).reshape(3, 3)
            t = take(3)
            poses.append(Pose(r, t))
        metas.append((pixel, DepthRange(float(zr[0]), float(zr[1])), poses))
    lum_n = p * PATCH * PATCH * spec.lights * spec.channels
    lums = [np.asarray(rec[off:off + lum_n], dtype=np.float32)
            .reshape(p, PATCH, PATCH, spec.lights, spec.channels)]
    off += lum_n
    lums.append(np.asarray(rec[off:off + lum_n], dtype=np.float32)
                .reshape(p, PATCH, PATCH, spec.lights, spec.channels))
    off += lum_n
    valid_n = p * PATCH * PATCH
    valids = []
    for _ in range(2):
        valids.append(np.asarray(rec[off:off + valid_n])
                      .reshape(p, PATCH, PATCH) > 0.5)
        off += valid_n
    groups = tuple(GroupObservation(poses=m[2], center_pixel=m[0], depth_range=m[1],
                                    lumitexels=l, valid=v)
                   for m, l, v in zip(metas, lums, valids))
    return TrainingSample(obj_idx, point, intr, groups)


def write_shards(out_dir: str | Path, spec: DatasetSpec, records: list[np.ndarray],
                 meta: list[dict], shard_size: int = 64) -> None:
    """Write dataset shards plus the manifest (id, object, seed, split, location)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"lights {spec.lights}", f"channels {spec.channels}",
             f"patterns {spec.pattern_count}"]
    for s0 in range(0, len(records), shard_size):
        batch = records[s0:s0 + shard_size]
        name = f"shard_{s0 // shard_size:04d}.tnsr"
        tnsr.write(out / name, np.stack(batch))
        for i, m in enumerate(meta[s0:s0 + shard_size]):
            lines.append(f"sample {m['id']} object {m['object']} seed {m['seed']} "
                         f"split {m['split']} shard {name} index {i}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


class ShardedDataset:
    """Memory-mapped reader over a shard directory."""

    def __init__(self, path: str | Path):
        self.dir = Path(path)
        header = {}
        self.samples: list[dict] = []
        for raw in (self.dir / "manifest.txt").read_text().splitlines():
            parts = raw.split()
            if not parts:
                continue
            if parts[0] in ("lights", "channels", "patterns"):
                header[parts[0]] = int(parts[1])
            elif parts[0] == "sample":
                kv = dict(zip(parts[0::2], parts[1::2]))
                self.samples.append(kv)
        self.spec = DatasetSpec(header["lights"], header["channels"], header["patterns"])
        self._maps: dict[str, np.ndarray] = {}

    def __len__(self):
        return len(self.samples)

    def split_indices(self, split: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.samples) if s["split"] == split],
                        dtype=np.int64)

    def record(self, i: int) -> np.ndarray:
        s = self.samples[i]
        shard = s["shard"]
        if shard not in self._maps:
            self._maps[shard] = tnsr.read(self.dir / shard, memmap=True)
        return self._maps[shard][int(s["index"])]

    def sample(self, i: int) -> TrainingSample:
        return unpack_sample(self.spec, self.record(i))
