"""Pinhole cameras and rigid poses.

Conventions, used everywhere in the package:

* world units are meters,
* pixel origin is the image's top-left, pixel centers sit on integer
  coordinates, x right / y down,
* a Pose maps world points into the camera frame: ``x_cam = R @ x_world + t``,
* camera looks along +z of its own frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class NonPositiveDepth(ValueError):
    """Point lies behind (or numerically on) the camera plane."""


class InvalidRange(ValueError):
    """Depth range with z_min >= z_max."""


class PoseFileError(ValueError):
    """Malformed camera pose file."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside image")


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform."""

    rotation: np.ndarray  # (3, 3) orthonormal, det +1
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal within 1e-6")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation determinant is not +1 within 1e-6")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) into the camera frame."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def to_world(self, points: np.ndarray) -> np.ndarray:
        """Inverse map: camera-frame points (..., 3) back to world."""
        pts = np.asarray(points, dtype=np.float64)
        return (pts - self.translation) @ self.rotation

    def camera_center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def compose(self, other: "Pose") -> "Pose":
        """Transform applying ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)


@dataclass(frozen=True)
class DepthRange:
    z_min: float
    z_max: float

    def __post_init__(self):
        if not (0 < self.z_min < self.z_max):
            raise InvalidRange(f"need 0 < z_min < z_max, got [{self.z_min}, {self.z_max}]")


def project(intr: CameraIntrinsics, pose: Pose, point: np.ndarray) -> tuple[np.ndarray, float]:
    """Project a world point; returns (pixel (2,), depth)."""
    cam = pose.to_camera(np.asarray(point, dtype=np.float64))
    z = float(cam[2])
    if z <= 1e-9:
        raise NonPositiveDepth(f"point depth {z:.3e} behind camera")
    pixel = np.array([intr.fx * cam[0] / z + intr.cx, intr.fy * cam[1] / z + intr.cy])
    return pixel, z


def project_many(intr: CameraIntrinsics, pose: Pose, points: np.ndarray
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of (N, 3) world points.

    Returns (pixels (N, 2), depths (N,)); rows with depth <= 1e-9 hold NaN
    pixels rather than raising, since bulk callers treat them as invalid.
    """
    cam = pose.to_camera(np.asarray(points, dtype=np.float64))
    z = cam[:, 2]
    ok = z > 1e-9
    safe_z = np.where(ok, z, 1.0)
    px = np.stack([intr.fx * cam[:, 0] / safe_z + intr.cx,
                   intr.fy * cam[:, 1] / safe_z + intr.cy], axis=1)
    px[~ok] = np.nan
    return px, z


def back_project(intr: CameraIntrinsics, pose: Pose, pixel: np.ndarray, depth: float
                 ) -> np.ndarray:
    """Lift a pixel at the given depth back to a world point."""
    if depth <= 0:
        raise NonPositiveDepth(f"depth {depth} must be positive")
    u, v = float(pixel[0]), float(pixel[1])
    cam = np.array([(u - intr.cx) / intr.fx * depth,
                    (v - intr.cy) / intr.fy * depth,
                    depth])
    return pose.to_world(cam)


def back_project_many(intr: CameraIntrinsics, pose: Pose, pixels: np.ndarray,
                      depths: np.ndarray) -> np.ndarray:
    """Vectorized back-projection: pixels (N, 2) x depths (M,) -> (N, M, 3) world."""
    px = np.asarray(pixels, dtype=np.float64)
    d = np.asarray(depths, dtype=np.float64)
    x = (px[:, 0:1] - intr.cx) / intr.fx * d[None, :]
    y = (px[:, 1:2] - intr.cy) / intr.fy * d[None, :]
    z = np.broadcast_to(d[None, :], x.shape)
    cam = np.stack([x, y, z], axis=-1)
    return pose.to_world(cam)


def sample_depths(rng: DepthRange, n: int) -> np.ndarray:
    """n depth hypotheses linearly spaced over [z_min, z_max], endpoints inclusive."""
    if n < 2:
        raise ValueError(f"need at least 2 depth samples, got {n}")
    return rng.z_min + np.arange(n, dtype=np.float64) * ((rng.z_max - rng.z_min) / (n - 1))


def relative_pose(a: Pose, b: Pose) -> Pose:
    """The pose ``rel`` with rel.compose(b) == a.

    Maps b's camera frame into a's camera frame.
    """
    r = a.rotation @ b.rotation.T
    t = a.translation - r @ b.translation
    return Pose(r, t)


def rotation_6d(rotation: np.ndarray) -> np.ndarray:
    """Continuous 6D rotation encoding: first two columns, column-major."""
    r = np.asarray(rotation)
    return np.concatenate([r[:, 0], r[:, 1]])


def look_at(eye: np.ndarray, target: np.ndarray, up: np.ndarray) -> Pose:
    """World-to-camera pose for a camera at ``eye`` looking at ``target``.

    Camera frame: +z toward target, +x right, +y down (consistent with the
    pixel convention).
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    nf = np.linalg.norm(fwd)
    if nf < 1e-12:
        raise ValueError("look_at eye and target coincide")
    fwd = fwd / nf
    upn = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upn)  # y-down frame
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        raise ValueError("up direction parallel to view direction")
    right /= nr
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd], axis=0)  # rows: camera axes in world
    return Pose(r, -r @ eye)


def rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about a unit axis."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def rotation_angle(r: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, radians."""
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


# -- pose file I/O -----------------------------------------------------------

def save_poses(path: str | Path, frames: list[tuple[int, CameraIntrinsics, Pose]]) -> None:
    """Write frames as blocks of `frame / K / R / t` lines."""
    lines = []
    for fid, intr, pose in frames:
        lines.append(f"frame {fid}")
        lines.append(f"K {intr.fx:.17g} {intr.fy:.17g} {intr.cx:.17g} {intr.cy:.17g} "
                     f"{intr.width} {intr.height}")
        lines.append("R " + " ".join(f"{v:.17g}" for v in pose.rotation.reshape(-1)))
        lines.append("t " + " ".join(f"{v:.17g}" for v in pose.translation))
    Path(path).write_text("\n".join(lines) + "\n")


def load_poses(path: str | Path) -> list[tuple[int, CameraIntrinsics, Pose]]:
    """Parse a pose file; raises PoseFileError naming the offending line."""
    frames: list[tuple[int, CameraIntrinsics, Pose]] = []
    cur: dict = {}

    def flush(lineno: int):
        if not cur:
            return
        missing = {"frame", "K", "R", "t"} - set(cur)
        if missing:
            raise PoseFileError(f"{path}: frame block before line {lineno} missing {sorted(missing)}")
        k = cur["K"]
        intr = CameraIntrinsics(k[0], k[1], k[2], k[3], int(k[4]), int(k[5]))
        pose = Pose(np.array(cur["R"]).reshape(3, 3), np.array(cur["t"]))
        frames.append((int(cur["frame"]), intr, pose))
        cur.clear()

    lineno = 0
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        key, vals = parts[0], parts[1:]
        try:
            nums = [float(v) for v in vals]
        except ValueError:
            raise PoseFileError(f"{path}:{lineno}: non-numeric value in {raw!r}") from None
        if key == "frame":
            flush(lineno)
            if len(nums) != 1:
                raise PoseFileError(f"{path}:{lineno}: frame takes one id")
            cur["frame"] = nums[0]
        elif key in ("K", "R", "t"):
            want = {"K": 6, "R": 9, "t": 3}[key]
            if len(nums) != want:
                raise PoseFileError(f"{path}:{lineno}: {key} needs {want} values, got {len(nums)}")
            if "frame" not in cur:
                raise PoseFileError(f"{path}:{lineno}: {key} before any frame line")
            cur[key] = nums
        else:
            raise PoseFileError(f"{path}:{lineno}: unknown key {key!r}")
    flush(lineno + 1)
    return frames
