"""Anisotropic GGX shading, light-array models and lumitexel rendering.

A lumitexel is the response vector of one surface point: entry ``l`` is the
image measurement the camera would record if only light ``l`` were switched
on at unit intensity.  A lighting pattern is a per-light intensity vector in
[0, 1]; the measurement under a pattern is the dot product of the two.

Each light is treated as a single-point quadrature of the area integral over
its emitting surface (area weight times the integrand at the light center),
with a clamped cosine-power angular profile about the light normal.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DegenerateGeometry(ValueError):
    """Surface point coincides with a light source."""


class LengthMismatch(ValueError):
    """Pattern and lumitexel lengths differ."""


class RigFileError(ValueError):
    """Malformed light rig file."""


@dataclass(frozen=True)
class GGXParams:
    """Per-channel albedos plus anisotropic roughness; alphas in [1e-3, 1]."""

    rho_d: np.ndarray  # (C,) diffuse albedo, each in [0, 1]
    rho_s: np.ndarray  # (C,) specular albedo (Fresnel F0), >= 0
    alpha_x: float
    alpha_y: float

    def __post_init__(self):
        rd = np.atleast_1d(np.asarray(self.rho_d, dtype=np.float64))
        rs = np.atleast_1d(np.asarray(self.rho_s, dtype=np.float64))
        if rd.shape != rs.shape:
            raise ValueError(f"rho_d {rd.shape} and rho_s {rs.shape} channel counts differ")
        if not (np.all(np.isfinite(rd)) and np.all(np.isfinite(rs))):
            raise ValueError("albedos must be finite")
        if np.any(rd < 0) or np.any(rs < 0):
            raise ValueError("albedos must be non-negative")
        if not (1e-3 <= self.alpha_x <= 1 and 1e-3 <= self.alpha_y <= 1):
            raise ValueError(f"alphas must lie in [1e-3, 1], got ({self.alpha_x}, {self.alpha_y})")
        object.__setattr__(self, "rho_d", rd)
        object.__setattr__(self, "rho_s", rs)

    @property
    def channels(self) -> int:
        return self.rho_d.shape[0]


@dataclass(frozen=True)
class SurfacePoint:
    position: np.ndarray  # (3,)
    normal: np.ndarray  # (3,) unit
    tangent: np.ndarray  # (3,) unit, orthogonal to normal
    material: GGXParams

    def __post_init__(self):
        p = np.asarray(self.position, dtype=np.float64).reshape(3)
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        t = np.asarray(self.tangent, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(n) - 1) > 1e-6 or abs(np.linalg.norm(t) - 1) > 1e-6:
            raise ValueError("normal and tangent must be unit vectors")
        if abs(float(n @ t)) > 1e-6:
            raise ValueError("tangent must be orthogonal to normal")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "tangent", t)


@dataclass(frozen=True)
class LightSource:
    index: int
    position: np.ndarray  # (3,)
    normal: np.ndarray  # (3,) unit
    exponent: float  # cosine-power angular profile, 0 = uniform
    area: float  # quadrature weight, m^2

    def __post_init__(self):
        p = np.asarray(self.position, dtype=np.float64).reshape(3)
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(n) - 1) > 1e-6:
            raise ValueError("light normal must be unit length")
        if self.exponent < 0:
            raise ValueError("angular exponent must be >= 0")
        if self.area <= 0:
            raise ValueError("area weight must be positive")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "normal", n)


@dataclass(frozen=True)
class Lumitexel:
    """Per-light response values, shape (#lights, channels), finite and >= 0."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("lumitexel entries must be finite and non-negative")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class LightingPatternSet:
    """#p patterns, each a per-light intensity vector with entries in [0, 1]."""

    patterns: np.ndarray  # (#p, #lights)

    def __post_init__(self):
        p = np.asarray(self.patterns, dtype=np.float64)
        if p.ndim != 2:
            raise ValueError(f"patterns must be 2D (#p, #lights), got {p.shape}")
        if np.any(p < 0) or np.any(p > 1):
            raise ValueError("pattern entries must lie in [0, 1]")
        object.__setattr__(self, "patterns", p)

    @property
    def count(self) -> int:
        return self.patterns.shape[0]

    @property
    def lights(self) -> int:
        return self.patterns.shape[1]


# -- BRDF --------------------------------------------------------------------

def _to_local(n, t, vec):
    b = np.cross(n, t)
    return np.stack([vec @ t, vec @ b, vec @ n], axis=-1)


def ggx_eval(mat: GGXParams, frame: tuple[np.ndarray, np.ndarray],
             wi: np.ndarray, wo: np.ndarray) -> np.ndarray:
    """Anisotropic GGX BRDF value per channel.

    Diffuse lobe rho_d/pi plus a microfacet lobe with the anisotropic GGX
    distribution, height-correlated Smith shadowing and Schlick Fresnel at
    F0 = rho_s.  Returns zeros when either direction is at or below the
    surface hemisphere.
    """
    n, t = (np.asarray(v, dtype=np.float64) for v in frame)
    wi = np.asarray(wi, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    wi_l = _to_local(n, t, wi)
    wo_l = _to_local(n, t, wo)
    return ggx_eval_local(mat.rho_d, mat.rho_s, mat.alpha_x, mat.alpha_y, wi_l, wo_l)


def ggx_eval_local(rho_d: np.ndarray, rho_s: np.ndarray, alpha_x, alpha_y,
                   wi_l: np.ndarray, wo_l: np.ndarray) -> np.ndarray:
    """Vectorized GGX in the local frame.

    ``wi_l``/``wo_l`` are (..., 3) unit directions with z along the normal;
    ``rho_d``/``rho_s`` are (..., C) or (C,); alphas scalar or (...,).
    Returns (..., C).
    """
    rho_d = np.asarray(rho_d, dtype=np.float64)
    rho_s = np.asarray(rho_s, dtype=np.float64)
    ax = np.asarray(alpha_x, dtype=np.float64)
    ay = np.asarray(alpha_y, dtype=np.float64)
    ci = wi_l[..., 2]
    co = wo_l[..., 2]
    up = (ci > 0) & (co > 0)
    ci_s = np.where(up, ci, 1.0)
    co_s = np.where(up, co, 1.0)

    h = wi_l + wo_l
    h = h / np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), 1e-12)
    hx, hy, hz = h[..., 0], h[..., 1], h[..., 2]

    d_denom = (hx / ax) ** 2 + (hy / ay) ** 2 + hz**2
    d_term = 1.0 / (np.pi * ax * ay * np.maximum(d_denom, 1e-16) ** 2)

    def lam(w, cz):
        a2 = (ax * w[..., 0]) ** 2 + (ay * w[..., 1]) ** 2
        return (-1.0 + np.sqrt(1.0 + a2 / np.maximum(cz**2, 1e-16))) / 2.0

    g_term = 1.0 / (1.0 + lam(wi_l, ci_s) + lam(wo_l, co_s))

    coh = np.clip(np.sum(wi_l * h, axis=-1), 0.0, 1.0)
    fres = rho_s + (1.0 - rho_s) * ((1.0 - coh) ** 5)[..., None]

    spec = fres * (d_term * g_term / (4.0 * ci_s * co_s))[..., None]
    val = rho_d / np.pi + spec
    return np.where(up[..., None], val, 0.0)


# -- lumitexel rendering (single-point quadrature per light) -----------------

def render_lumitexel(point: SurfacePoint, lights: list[LightSource],
                     cam_pos: np.ndarray, occluder=None) -> Lumitexel:
    """Response of a surface point to each light at unit intensity.

    ``occluder`` may provide ``segment_occluded(starts, ends) -> (N,) bool``;
    without one, visibility is 1 everywhere (dark-room assumption).
    """
    if not lights:
        raise ValueError("need at least one light")
    lp = np.stack([l.position for l in lights])
    ln = np.stack([l.normal for l in lights])
    exps = np.array([l.exponent for l in lights])
    areas = np.array([l.area for l in lights])
    vals = lumitexels_for_points(
        point.position[None], point.normal[None], point.tangent[None],
        point.material.rho_d[None], point.material.rho_s[None],
        np.array([point.material.alpha_x]), np.array([point.material.alpha_y]),
        lp, ln, exps, areas, np.asarray(cam_pos, dtype=np.float64), occluder)
    return Lumitexel(vals[0])


def lumitexels_for_points(positions, normals, tangents, rho_d, rho_s, alpha_x,
                          alpha_y, light_pos, light_nrm, light_exp, light_area,
                          cam_pos, occluder=None) -> np.ndarray:
    """Batched lumitexel rendering.

    positions/normals/tangents: (N, 3); rho_d/rho_s: (N, C);
    alpha_x/alpha_y: (N,); light_*: (L, ...); cam_pos: (3,).
    Returns (N, L, C).
    """
    pos = np.asarray(positions, dtype=np.float64)
    n = np.asarray(normals, dtype=np.float64)
    t = np.asarray(tangents, dtype=np.float64)
    npts, nl = pos.shape[0], light_pos.shape[0]

    delta = light_pos[None, :, :] - pos[:, None, :]  # (N, L, 3)
    dist2 = np.sum(delta * delta, axis=-1)
    if np.any(dist2 < 1e-12):
        raise DegenerateGeometry("surface point within 1e-6 m of a light source")
    dist = np.sqrt(dist2)
    wi = delta / dist[..., None]

    wo = cam_pos[None, :] - pos
    wo = wo / np.maximum(np.linalg.norm(wo, axis=-1, keepdims=True), 1e-12)

    cos_p = np.maximum(np.sum(wi * n[:, None, :], axis=-1), 0.0)  # (wi . n_p)+
    cos_l = np.maximum(np.sum(-wi * light_nrm[None, :, :], axis=-1), 0.0)
    with np.errstate(invalid="ignore"):
        psi = np.where(light_exp[None, :] == 0, 1.0, cos_l ** light_exp[None, :])

    b = np.cross(n, t)
    wi_l = np.stack([np.sum(wi * t[:, None, :], axis=-1),
                     np.sum(wi * b[:, None, :], axis=-1),
                     np.sum(wi * n[:, None, :], axis=-1)], axis=-1)
    wo_full = np.broadcast_to(wo[:, None, :], wi.shape)
    wo_l = np.stack([np.sum(wo_full * t[:, None, :], axis=-1),
                     np.sum(wo_full * b[:, None, :], axis=-1),
                     np.sum(wo_full * n[:, None, :], axis=-1)], axis=-1)

    f = ggx_eval_local(np.asarray(rho_d)[:, None, :], np.asarray(rho_s)[:, None, :],
                       np.asarray(alpha_x)[:, None], np.asarray(alpha_y)[:, None],
                       wi_l, wo_l)  # (N, L, C)

    vis = np.ones((npts, nl))
    if occluder is not None:
        starts = np.repeat(pos + 1e-5 * n, nl, axis=0)
        ends = np.tile(light_pos, (npts, 1))
        vis = (~occluder.segment_occluded(starts, ends)).reshape(npts, nl).astype(np.float64)

    scale = light_area[None, :] / dist2 * psi * vis * cos_p * cos_l
    return f * scale[..., None]


def measure(pattern: np.ndarray, lum: Lumitexel | np.ndarray) -> np.ndarray:
    """Image measurement under a pattern: the pattern/lumitexel dot product."""
    p = np.asarray(pattern, dtype=np.float64)
    v = lum.values if isinstance(lum, Lumitexel) else np.asarray(lum, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    if p.shape[0] != v.shape[0]:
        raise LengthMismatch(f"pattern has {p.shape[0]} entries, lumitexel {v.shape[0]}")
    return p @ v


# -- rigs ---------------------------------------------------------------------

def scanner_rig() -> list[LightSource]:
    """Desk-scale LED array: 16 x 8 grid, 2 cm pitch, camera at the top edge.

    Defined in the device (= camera) frame: x right, y down, z forward; the
    array lies in the z = 0 plane just below the camera, emitting along +z.
    """
    lights = []
    idx = 0
    for row in range(8):
        for col in range(16):
            x = -0.15 + 0.02 * col
            y = 0.02 + 0.02 * row
            lights.append(LightSource(idx, np.array([x, y, 0.0]),
                                      np.array([0.0, 0.0, 1.0]), 1.0, 4e-4))
            idx += 1
    return lights


def tablet_rig() -> list[LightSource]:
    """Tablet screen stand-in: 15 x 20 patch grid, uniform angular profile."""
    lights = []
    idx = 0
    for row in range(20):
        for col in range(15):
            x = -0.091 + 0.013 * col
            y = 0.013 + 0.013 * row
            lights.append(LightSource(idx, np.array([x, y, 0.0]),
                                      np.array([0.0, 0.0, 1.0]), 0.0, 1.69e-4))
            idx += 1
    return lights


def rig_to_world(lights: list[LightSource], pose) -> list[LightSource]:
    """Transform a device-frame rig into world space for a camera pose."""
    out = []
    for l in lights:
        out.append(LightSource(l.index, pose.to_world(l.position),
                               l.normal @ pose.rotation, l.exponent, l.area))
    return out


def rig_arrays(lights: list[LightSource]):
    """Split a rig into (positions, normals, exponents, areas) arrays."""
    return (np.stack([l.position for l in lights]),
            np.stack([l.normal for l in lights]),
            np.array([l.exponent for l in lights]),
            np.array([l.area for l in lights]))


def save_rig(path: str | Path, lights: list[LightSource]) -> None:
    lines = []
    for l in lights:
        lines.append(f"light {l.index}")
        lines.append("pos " + " ".join(f"{v:.17g}" for v in l.position))
        lines.append("normal " + " ".join(f"{v:.17g}" for v in l.normal))
        lines.append(f"exp {l.exponent:.17g}")
        lines.append(f"area {l.area:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_rig(path: str | Path) -> list[LightSource]:
    lights: list[LightSource] = []
    cur: dict = {}

    def flush(lineno):
        if not cur:
            return
        missing = {"light", "pos", "normal", "exp", "area"} - set(cur)
        if missing:
            raise RigFileError(f"{path}: light block before line {lineno} missing {sorted(missing)}")
        lights.append(LightSource(int(cur["light"][0]), np.array(cur["pos"]),
                                  np.array(cur["normal"]), cur["exp"][0], cur["area"][0]))
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
            raise RigFileError(f"{path}:{lineno}: non-numeric value in {raw!r}") from None
        if key == "light":
            flush(lineno)
            cur["light"] = nums
        elif key in ("pos", "normal", "exp", "area"):
            want = {"pos": 3, "normal": 3, "exp": 1, "area": 1}[key]
            if len(nums) != want:
                raise RigFileError(f"{path}:{lineno}: {key} needs {want} values, got {len(nums)}")
            if "light" not in cur:
                raise RigFileError(f"{path}:{lineno}: {key} before any light line")
            cur[key] = nums
        else:
            raise RigFileError(f"{path}:{lineno}: unknown key {key!r}")
    flush(lineno + 1)
    return lights
