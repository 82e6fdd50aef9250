"""Triangle meshes, procedural scan targets and spatially varying materials.

The synthetic pipeline stands on a small zoo of desk-scale objects: spheres,
superquadric "rounded cubes" and bumpy blobs, all built over a lat-long
parameterization so every mesh carries a usable uv atlas.  Ray casting is
brute-force Moller-Trumbore over all triangles, vectorized and chunked;
meshes stay below ~2k triangles so this is fast enough everywhere it is used.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .seeding import stream


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    normals: np.ndarray  # (V, 3) unit
    tangents: np.ndarray  # (V, 3) unit, orthogonal to normals
    uvs: np.ndarray  # (V, 2) in [0, 1]^2

    def __post_init__(self):
        self._tri_cache = None

    @property
    def triangle_count(self) -> int:
        return self.faces.shape[0]

    def _tris(self):
        if self._tri_cache is None:
            v0 = self.vertices[self.faces[:, 0]]
            e1 = self.vertices[self.faces[:, 1]] - v0
            e2 = self.vertices[self.faces[:, 2]] - v0
            center = 0.5 * (self.vertices.min(axis=0) + self.vertices.max(axis=0))
            radius = float(np.linalg.norm(self.vertices - center, axis=1).max()) * 1.0001
            self._tri_cache = (v0, e1, e2, center, radius)
        return self._tri_cache[:3]

    def _bounding_sphere(self):
        self._tris()
        return self._tri_cache[3], self._tri_cache[4]

    def triangle_areas(self) -> np.ndarray:
        _, e1, e2 = self._tris()
        return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def raycast(self, origins: np.ndarray, directions: np.ndarray,
                t_min: float = 1e-6, t_max: float = np.inf, subset=None):
        """First-hit ray cast.

        origins/directions: (N, 3); directions need not be unit (t is in
        direction units).  Returns (hit (N,) bool, t (N,), tri (N,) int,
        bary (N, 2)) where bary holds the (u, v) weights of vertices 1 and 2.
        ``subset`` optionally restricts the test to an index array of
        triangles (see ``cull_cone``); intersections run in float32.
        """
        origins = np.asarray(origins, dtype=np.float64)
        directions = np.asarray(directions, dtype=np.float64)
        n = origins.shape[0]
        best_t = np.full(n, np.inf)
        best_tri = np.full(n, -1, dtype=np.int64)
        best_uv = np.zeros((n, 2))
        v0, e1, e2 = self._tris()
        if subset is not None:
            if subset.size == 0:
                return np.zeros(n, dtype=bool), best_t, best_tri, best_uv
            v0, e1, e2 = v0[subset], e1[subset], e2[subset]

        # bounding-sphere precull: most image rays miss the object entirely
        center, radius = self._bounding_sphere()
        oc = origins - center
        dd = np.sum(directions * directions, axis=1)
        half_b = np.sum(oc * directions, axis=1)
        c0 = np.sum(oc * oc, axis=1) - radius * radius
        disc = half_b * half_b - dd * c0
        may_hit = (disc >= 0) & ((c0 <= 0) | (half_b < 0))
        todo = np.nonzero(may_hit)[0]
        if todo.size == 0:
            return np.isfinite(best_t), best_t, best_tri, best_uv

        v0 = v0.astype(np.float32)
        e1 = e1.astype(np.float32)
        e2 = e2.astype(np.float32)
        e1x, e1y, e1z = e1[:, 0], e1[:, 1], e1[:, 2]
        e2x, e2y, e2z = e2[:, 0], e2[:, 1], e2[:, 2]
        eps = 1e-6  # slack so edge/vertex grazes register on one triangle
        ntri = v0.shape[0]
        chunk = max(16, int(1_200_000 // max(1, ntri)))
        for s in range(0, todo.size, chunk):
            rows_idx = todo[s:s + chunk]
            o = origins[rows_idx].astype(np.float32)
            d = directions[rows_idx].astype(np.float32)
            dx, dy, dz = d[:, 0:1], d[:, 1:2], d[:, 2:3]
            # pvec = d x e2
            px = dy * e2z - dz * e2y
            py = dz * e2x - dx * e2z
            pz = dx * e2y - dy * e2x
            det = e1x * px + e1y * py + e1z * pz
            ok = np.abs(det) > 1e-14
            inv_det = np.where(ok, 1.0, 0.0) / np.where(ok, det, 1.0)
            tx = o[:, 0:1] - v0[None, :, 0]
            ty = o[:, 1:2] - v0[None, :, 1]
            tz = o[:, 2:3] - v0[None, :, 2]
            u = (tx * px + ty * py + tz * pz) * inv_det
            # qvec = tvec x e1
            qx = ty * e1z - tz * e1y
            qy = tz * e1x - tx * e1z
            qz = tx * e1y - ty * e1x
            v = (dx * qx + dy * qy + dz * qz) * inv_det
            t = (e2x * qx + e2y * qy + e2z * qz) * inv_det
            ok &= (u >= -eps) & (v >= -eps) & (u + v <= 1 + eps) & (t > t_min) & (t < t_max)
            t = np.where(ok, t, np.inf)
            j = np.argmin(t, axis=1)
            rr = np.arange(t.shape[0])
            tj = t[rr, j]
            hit = np.isfinite(tj)
            best_t[rows_idx] = np.where(hit, tj, np.inf)
            best_tri[rows_idx] = np.where(hit, j, -1)
            best_uv[rows_idx, 0] = np.where(hit, np.clip(u[rr, j], 0, 1), 0.0)
            best_uv[rows_idx, 1] = np.where(hit, np.clip(v[rr, j], 0, 1), 0.0)
        if subset is not None:
            mapped = np.where(best_tri >= 0, subset[np.maximum(best_tri, 0)], -1)
            best_tri = mapped
        return np.isfinite(best_t), best_t, best_tri, best_uv

    def cull_cone(self, apex: np.ndarray, directions: np.ndarray,
                  margin: float = 0.02) -> np.ndarray:
        """Triangles possibly hit by a ray bundle from one apex.

        Conservative cone test against per-triangle bounding spheres; pass
        the result as ``subset`` to raycast when many coherent rays share a
        camera center (patch windows, image tiles).
        """
        d = np.asarray(directions, dtype=np.float64)
        d = d / np.linalg.norm(d, axis=1, keepdims=True)
        axis = d.mean(axis=0)
        axis /= np.linalg.norm(axis)
        half = float(np.arccos(np.clip(d @ axis, -1, 1).min()))
        v0, e1, e2 = self._tris()
        cent = v0 + (e1 + e2) / 3.0
        rad = np.sqrt(np.maximum.reduce([
            np.sum((v0 - cent) ** 2, axis=1),
            np.sum((v0 + e1 - cent) ** 2, axis=1),
            np.sum((v0 + e2 - cent) ** 2, axis=1)]))
        w = cent - np.asarray(apex, dtype=np.float64)
        wl = np.linalg.norm(w, axis=1)
        close = wl <= rad  # apex inside the triangle's sphere
        cosang = np.clip(np.sum(w * axis, axis=1) / np.maximum(wl, 1e-12), -1, 1)
        ang = np.arccos(cosang) - np.arcsin(np.clip(rad / np.maximum(wl, 1e-12), 0, 1))
        keep = close | (ang <= half + margin)
        return np.nonzero(keep)[0]

    def segment_occluded(self, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
        """True where the open segment start->end intersects the mesh."""
        d = np.asarray(ends, dtype=np.float64) - np.asarray(starts, dtype=np.float64)
        hit, t, _, _ = self.raycast(starts, d, t_min=1e-6, t_max=1.0 - 1e-6)
        return hit

    def interpolate(self, tri: np.ndarray, bary: np.ndarray):
        """Vertex attributes at hit points; returns (position, normal, tangent, uv)."""
        f = self.faces[tri]
        w0 = (1.0 - bary[:, 0] - bary[:, 1])[:, None]
        w1 = bary[:, 0:1]
        w2 = bary[:, 1:2]

        def mix(attr):
            return w0 * attr[f[:, 0]] + w1 * attr[f[:, 1]] + w2 * attr[f[:, 2]]

        pos = mix(self.vertices)
        nrm = mix(self.normals)
        nrm = nrm / np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-12)
        tan = mix(self.tangents)
        tan = tan - np.sum(tan * nrm, axis=1, keepdims=True) * nrm
        bad = np.linalg.norm(tan, axis=1) < 1e-8
        if np.any(bad):
            alt = np.cross(nrm[bad], np.array([1.0, 0.0, 0.0]))
            alt2 = np.cross(nrm[bad], np.array([0.0, 1.0, 0.0]))
            take2 = np.linalg.norm(alt, axis=1) < 1e-6
            alt[take2] = alt2[take2]
            tan[bad] = alt
        tan = tan / np.maximum(np.linalg.norm(tan, axis=1, keepdims=True), 1e-12)
        return pos, nrm, tan, mix(self.uvs)

    def sample_surface(self, rng: np.random.Generator, count: int):
        """Area-weighted random surface points: (positions, normals, tangents, uvs)."""
        areas = self.triangle_areas()
        probs = areas / areas.sum()
        tri = rng.choice(len(probs), size=count, p=probs)
        r1 = rng.random(count)
        r2 = rng.random(count)
        flip = r1 + r2 > 1.0
        r1[flip] = 1.0 - r1[flip]
        r2[flip] = 1.0 - r2[flip]
        return self.interpolate(tri, np.stack([r1, r2], axis=1))


# -- procedural generation ----------------------------------------------------

def _latlong_mesh(radius_fn, stacks: int = 16, slices: int = 32) -> TriangleMesh:
    """Lat-long surface r(theta, phi) with a duplicated seam column for uv."""
    thetas = np.linspace(0.0, np.pi, stacks + 1)
    phis = np.linspace(0.0, 2 * np.pi, slices + 1)  # seam duplicated at u = 1
    tt, pp = np.meshgrid(thetas, phis, indexing="ij")
    r = radius_fn(tt, pp)
    st, ct = np.sin(tt), np.cos(tt)
    sp, cp = np.sin(pp), np.cos(pp)
    xyz = np.stack([r * st * cp, r * st * sp, r * ct], axis=-1)
    verts = xyz.reshape(-1, 3)
    uvs = np.stack([pp / (2 * np.pi), tt / np.pi], axis=-1).reshape(-1, 2)

    cols = slices + 1
    faces = []
    for i in range(stacks):
        for j in range(slices):
            a = i * cols + j
            b = a + 1
            c = a + cols
            d = c + 1
            if i > 0:
                faces.append((a, c, b))
            if i < stacks - 1:
                faces.append((b, c, d))
    faces = np.array(faces, dtype=np.int64)

    normals = _vertex_normals(verts, faces)
    # weld the seam's normals so shading is continuous across u = 0/1
    for i in range(stacks + 1):
        first = i * cols
        last = i * cols + slices
        avg = normals[first] + normals[last]
        avg /= max(np.linalg.norm(avg), 1e-12)
        normals[first] = avg
        normals[last] = avg
    tangents = _phi_tangents(verts, normals)
    return TriangleMesh(verts, faces, normals, tangents, uvs)


def _vertex_normals(verts, faces):
    fn = np.cross(verts[faces[:, 1]] - verts[faces[:, 0]],
                  verts[faces[:, 2]] - verts[faces[:, 0]])
    normals = np.zeros_like(verts)
    for k in range(3):
        np.add.at(normals, faces[:, k], fn)
    # outward for star-shaped bodies centered at the origin
    sign = np.sign(np.sum(normals * verts, axis=1, keepdims=True))
    sign[sign == 0] = 1.0
    normals *= sign
    return normals / np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-12)


def _phi_tangents(verts, normals):
    """Azimuthal direction, orthonormalized against the normal."""
    phi_dir = np.stack([-verts[:, 1], verts[:, 0], np.zeros(len(verts))], axis=1)
    small = np.linalg.norm(phi_dir, axis=1) < 1e-9
    phi_dir[small] = np.array([1.0, 0.0, 0.0])
    t = phi_dir - np.sum(phi_dir * normals, axis=1, keepdims=True) * normals
    small = np.linalg.norm(t, axis=1) < 1e-9
    if np.any(small):
        alt = np.cross(normals[small], np.array([0.0, 0.0, 1.0]))
        bad = np.linalg.norm(alt, axis=1) < 1e-9
        alt[bad] = np.cross(normals[small][bad], np.array([0.0, 1.0, 0.0]))
        t[small] = alt
    return t / np.maximum(np.linalg.norm(t, axis=1, keepdims=True), 1e-12)


def sphere_mesh(radius: float = 0.05, stacks: int = 16, slices: int = 32) -> TriangleMesh:
    return _latlong_mesh(lambda tt, pp: np.full_like(tt, radius), stacks, slices)


def rounded_cube_mesh(radius: float = 0.05, power: float = 5.0,
                      stacks: int = 16, slices: int = 32) -> TriangleMesh:
    """Superquadric: unit ball of the p-norm, p ~ 5 gives soft cube edges."""

    def rfn(tt, pp):
        d = np.stack([np.sin(tt) * np.cos(pp), np.sin(tt) * np.sin(pp), np.cos(tt)], axis=-1)
        return radius * np.sum(np.abs(d) ** power, axis=-1) ** (-1.0 / power)

    return _latlong_mesh(rfn, stacks, slices)


def blob_mesh(radius: float = 0.05, seed: int = 0, bumps: int = 8,
              amplitude: float = 0.18, stacks: int = 16, slices: int = 32) -> TriangleMesh:
    """Sphere with seeded gaussian bumps; a different seed is a new object."""
    rng = stream(seed, "blob-bumps")
    centers = rng.normal(size=(bumps, 3))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    amps = rng.uniform(-amplitude, amplitude, size=bumps)
    widths = rng.uniform(0.25, 0.6, size=bumps)

    def rfn(tt, pp):
        d = np.stack([np.sin(tt) * np.cos(pp), np.sin(tt) * np.sin(pp), np.cos(tt)], axis=-1)
        r = np.ones(tt.shape)
        for c, a, w in zip(centers, amps, widths):
            ang = np.arccos(np.clip(d @ c, -1.0, 1.0))
            r = r + a * np.exp(-(ang / w) ** 2)
        return radius * r

    return _latlong_mesh(rfn, stacks, slices)


# -- materials ----------------------------------------------------------------

@dataclass
class MaterialMaps:
    """Bilinear-sampled GGX parameter textures over the mesh uv atlas."""

    rho_d: np.ndarray  # (H, W, C)
    rho_s: np.ndarray  # (H, W, C)
    alpha_x: np.ndarray  # (H, W)
    alpha_y: np.ndarray  # (H, W)
    tangent_rot: np.ndarray  # (H, W) radians

    @property
    def channels(self) -> int:
        return self.rho_d.shape[2]

    def sample(self, uv: np.ndarray):
        """Material values at (N, 2) uv points.

        Returns (rho_d (N, C), rho_s (N, C), alpha_x (N,), alpha_y (N,),
        tangent_rot (N,)).
        """
        return (_bilinear(self.rho_d, uv), _bilinear(self.rho_s, uv),
                _bilinear(self.alpha_x[..., None], uv)[:, 0],
                _bilinear(self.alpha_y[..., None], uv)[:, 0],
                _bilinear(self.tangent_rot[..., None], uv)[:, 0])


def _bilinear(tex: np.ndarray, uv: np.ndarray) -> np.ndarray:
    h, w = tex.shape[:2]
    u = np.mod(uv[:, 0], 1.0) * (w - 1)
    v = np.clip(uv[:, 1], 0.0, 1.0) * (h - 1)
    x0 = np.floor(u).astype(int)
    y0 = np.floor(v).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (u - x0)[:, None]
    fy = (v - y0)[:, None]
    c00 = tex[y0, x0]
    c01 = tex[y0, x1]
    c10 = tex[y1, x0]
    c11 = tex[y1, x1]
    return (c00 * (1 - fx) * (1 - fy) + c01 * fx * (1 - fy)
            + c10 * (1 - fx) * fy + c11 * fx * fy)


def _value_noise(rng: np.random.Generator, size: int, cells: int,
                 lo: float, hi: float, octaves: int = 2) -> np.ndarray:
    """Smooth seeded noise field in [lo, hi], periodic along x (the uv seam)."""
    acc = np.zeros((size, size))
    amp = 1.0
    total = 0.0
    for o in range(octaves):
        c = cells * (2**o)
        grid = rng.random((c, c))
        gx = np.concatenate([grid, grid[:, :1]], axis=1)  # periodic in u
        ys = np.linspace(0, c - 1, size)
        xs = np.linspace(0, c, size, endpoint=False)
        x0 = np.floor(xs).astype(int)
        y0 = np.floor(ys).astype(int)
        fx = xs - x0
        fy = ys - y0
        fx = fx * fx * (3 - 2 * fx)
        fy = fy * fy * (3 - 2 * fy)
        x1 = np.minimum(x0 + 1, c)
        y1 = np.minimum(y0 + 1, c - 1)
        v = (gx[np.ix_(y0, x0)] * np.outer(1 - fy, 1 - fx)
             + gx[np.ix_(y0, x1)] * np.outer(1 - fy, fx)
             + gx[np.ix_(y1, x0)] * np.outer(fy, 1 - fx)
             + gx[np.ix_(y1, x1)] * np.outer(fy, fx))
        acc += amp * v
        total += amp
        amp *= 0.5
    acc /= total
    return lo + (hi - lo) * acc


def procedural_material(seed: int, channels: int = 1, size: int = 128,
                        specular: bool = True, anisotropic: bool = True) -> MaterialMaps:
    """Seeded GGX texture set with spatial variation in every parameter."""
    rng = stream(seed, "material")
    rho_d = np.stack([_value_noise(rng, size, 4, 0.08, 0.85) for _ in range(channels)], axis=-1)
    if specular:
        rho_s = np.stack([_value_noise(rng, size, 3, 0.05, 0.7) for _ in range(channels)], axis=-1)
    else:
        rho_s = np.zeros((size, size, channels))
    ax = _value_noise(rng, size, 3, 0.04, 0.45)
    if anisotropic:
        ay = _value_noise(rng, size, 3, 0.04, 0.45)
        rot = _value_noise(rng, size, 2, -np.pi, np.pi)
    else:
        ay = ax.copy()
        rot = np.zeros((size, size))
    return MaterialMaps(rho_d, rho_s, ax, ay, rot)


@dataclass
class SceneObject:
    """A scan target: mesh plus its material textures."""

    name: str
    mesh: TriangleMesh
    material: MaterialMaps

    def surface_attributes(self, tri: np.ndarray, bary: np.ndarray):
        """Shading inputs at hit points.

        Returns (pos, normal, tangent, rho_d, rho_s, alpha_x, alpha_y) with
        the material's tangent rotation already applied about the normal.
        """
        pos, nrm, tan, uv = self.mesh.interpolate(tri, bary)
        rho_d, rho_s, ax, ay, rot = self.material.sample(uv)
        bit = np.cross(nrm, tan)
        c = np.cos(rot)[:, None]
        s = np.sin(rot)[:, None]
        tan_rot = c * tan + s * bit
        return pos, nrm, tan_rot, rho_d, rho_s, ax, ay


def object_zoo(channels: int = 1, seed: int = 0) -> list[SceneObject]:
    """The four stock objects: three for training, the blob-2 held out."""
    return [
        SceneObject("sphere", sphere_mesh(0.05), procedural_material(seed + 11, channels)),
        SceneObject("cube", rounded_cube_mesh(0.05), procedural_material(seed + 23, channels)),
        SceneObject("blob1", blob_mesh(0.05, seed=seed + 37), procedural_material(seed + 41, channels)),
        SceneObject("blob2", blob_mesh(0.05, seed=seed + 53), procedural_material(seed + 59, channels)),
    ]


# -- OBJ I/O ------------------------------------------------------------------

def save_obj(path: str | Path, mesh: TriangleMesh) -> None:
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    for uv in mesh.uvs:
        lines.append(f"vt {uv[0]:.9g} {uv[1]:.9g}")
    for n in mesh.normals:
        lines.append(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}")
    for f in mesh.faces:
        a, b, c = f + 1
        lines.append(f"f {a}/{a}/{a} {b}/{b}/{b} {c}/{c}/{c}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path: str | Path) -> TriangleMesh:
    """Load an ASCII OBJ with per-vertex uv (vt) and normals (vn).

    Vertices are re-indexed so position/uv/normal share one index space.
    """
    positions, uvs, normals, faces = [], [], [], []
    combos: dict[tuple, int] = {}
    out_pos, out_uv, out_nrm = [], [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "v":
            positions.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vt":
            uvs.append([float(x) for x in parts[1:3]])
        elif parts[0] == "vn":
            normals.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: only triangle faces supported")
            tri = []
            for token in parts[1:]:
                fields = token.split("/")
                vi = int(fields[0]) - 1
                ti = int(fields[1]) - 1 if len(fields) > 1 and fields[1] else vi
                ni = int(fields[2]) - 1 if len(fields) > 2 and fields[2] else vi
                key = (vi, ti, ni)
                if key not in combos:
                    combos[key] = len(out_pos)
                    out_pos.append(positions[vi])
                    out_uv.append(uvs[ti] if uvs else [0.0, 0.0])
                    out_nrm.append(normals[ni] if normals else [0.0, 0.0, 1.0])
                tri.append(combos[key])
            faces.append(tri)
    verts = np.array(out_pos)
    faces = np.array(faces, dtype=np.int64)
    nrm = np.array(out_nrm)
    if not normals:
        nrm = _vertex_normals(verts, faces)
    nrm = nrm / np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-12)
    tan = _phi_tangents(verts, nrm)
    return TriangleMesh(verts, faces, nrm, tan, np.array(out_uv))
