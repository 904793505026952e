"""Scene representation: oriented planar splats, environment map, proxy mesh.

Splats are stored struct-of-arrays in a SplatCloud for vectorized math; the
Splat dataclass is a per-element view for construction and inspection. The
full SceneModel bundles the splat cloud with the background environment map
and the coarse proxy mesh it was initialized from.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import sh

DEFAULT_SPLAT_CAP = 4_000_000
_UNIT_TOL = 1e-6


class CapacityError(RuntimeError):
    """Raised when an operation would push the splat count above the cap."""


# ---------------------------------------------------------------------------
# splats


@dataclass
class Splat:
    """One oriented planar 2D Gaussian."""

    center: np.ndarray        # (3,) meters
    tangent_u: np.ndarray     # (3,) unit
    tangent_v: np.ndarray     # (3,) unit, orthogonal to tangent_u
    scale_u: float            # meters, > 0
    scale_v: float            # meters, > 0
    opacity: float            # [0, 1]
    sh_coeffs: np.ndarray     # (nb, 3); row 0 is plain RGB

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.tangent_u, self.tangent_v)


def orthonormalize_tangents(tu: np.ndarray, tv: np.ndarray):
    """Gram-Schmidt the raw tangent pair; returns (u, v, n) unit vectors.

    This is the exact frame used by the renderer, so backward passes can
    chain through it.
    """
    tu = np.atleast_2d(np.asarray(tu, dtype=np.float64))
    tv = np.atleast_2d(np.asarray(tv, dtype=np.float64))
    u = tu / np.linalg.norm(tu, axis=-1, keepdims=True)
    w = tv - np.sum(tv * u, axis=-1, keepdims=True) * u
    v = w / np.linalg.norm(w, axis=-1, keepdims=True)
    n = np.cross(u, v)
    return u, v, n


class SplatCloud:
    """Struct-of-arrays splat storage."""

    def __init__(self, centers, tangent_u, tangent_v, scales, opacities, sh_coeffs,
                 dtype=np.float32):
        self.centers = np.ascontiguousarray(centers, dtype=dtype).reshape(-1, 3)
        n = len(self.centers)
        self.tangent_u = np.ascontiguousarray(tangent_u, dtype=dtype).reshape(n, 3)
        self.tangent_v = np.ascontiguousarray(tangent_v, dtype=dtype).reshape(n, 3)
        self.scales = np.ascontiguousarray(scales, dtype=dtype).reshape(n, 2)
        self.opacities = np.ascontiguousarray(opacities, dtype=dtype).reshape(n)
        self.sh_coeffs = np.ascontiguousarray(sh_coeffs, dtype=dtype).reshape(n, -1, 3)
        sh.degree_for_bases(self.sh_coeffs.shape[1])  # validates the basis count

    def __len__(self) -> int:
        return len(self.centers)

    @property
    def dtype(self):
        return self.centers.dtype

    @property
    def sh_degree(self) -> int:
        return sh.degree_for_bases(self.sh_coeffs.shape[1])

    @classmethod
    def empty(cls, sh_degree: int = 0, dtype=np.float32) -> "SplatCloud":
        nb = sh.num_bases(sh_degree)
        z = np.zeros((0, 3))
        return cls(z, z, z, np.zeros((0, 2)), np.zeros(0), np.zeros((0, nb, 3)), dtype)

    @classmethod
    def from_splats(cls, splats, dtype=np.float32) -> "SplatCloud":
        if not splats:
            return cls.empty(dtype=dtype)
        return cls(
            np.stack([s.center for s in splats]),
            np.stack([s.tangent_u for s in splats]),
            np.stack([s.tangent_v for s in splats]),
            np.stack([[s.scale_u, s.scale_v] for s in splats]),
            np.array([s.opacity for s in splats]),
            np.stack([s.sh_coeffs for s in splats]),
            dtype,
        )

    def splat(self, i: int) -> Splat:
        return Splat(self.centers[i].copy(), self.tangent_u[i].copy(),
                     self.tangent_v[i].copy(), float(self.scales[i, 0]),
                     float(self.scales[i, 1]), float(self.opacities[i]),
                     self.sh_coeffs[i].copy())

    def copy(self) -> "SplatCloud":
        return SplatCloud(self.centers.copy(), self.tangent_u.copy(),
                          self.tangent_v.copy(), self.scales.copy(),
                          self.opacities.copy(), self.sh_coeffs.copy(), self.dtype)

    def astype(self, dtype) -> "SplatCloud":
        return SplatCloud(self.centers, self.tangent_u, self.tangent_v, self.scales,
                          self.opacities, self.sh_coeffs, dtype)

    def concatenated(self, other: "SplatCloud") -> "SplatCloud":
        if other.sh_coeffs.shape[1] != self.sh_coeffs.shape[1]:
            raise ValueError("SH degrees differ between clouds")
        return SplatCloud(
            np.concatenate([self.centers, other.centers]),
            np.concatenate([self.tangent_u, other.tangent_u]),
            np.concatenate([self.tangent_v, other.tangent_v]),
            np.concatenate([self.scales, other.scales]),
            np.concatenate([self.opacities, other.opacities]),
            np.concatenate([self.sh_coeffs, other.sh_coeffs]),
            self.dtype,
        )

    def frames(self):
        """Orthonormalized (u, v, n) arrays, each (N, 3) float64."""
        return orthonormalize_tangents(self.tangent_u, self.tangent_v)

    def extent(self) -> float:
        """Bounding-box diagonal of the splat centers (0 for empty clouds)."""
        if len(self) == 0:
            return 0.0
        span = self.centers.max(axis=0) - self.centers.min(axis=0)
        return float(np.linalg.norm(span))

    def validate(self):
        """Checks the per-splat invariants, raising ValueError on violation."""
        if len(self) == 0:
            return
        if not np.all(np.isfinite(self.centers)):
            raise ValueError("non-finite splat center")
        nu = np.linalg.norm(self.tangent_u.astype(np.float64), axis=-1)
        nv = np.linalg.norm(self.tangent_v.astype(np.float64), axis=-1)
        if np.abs(nu - 1.0).max() > _UNIT_TOL or np.abs(nv - 1.0).max() > _UNIT_TOL:
            raise ValueError("tangent vectors must be unit length within 1e-6")
        dots = np.abs(np.sum(self.tangent_u.astype(np.float64)
                             * self.tangent_v.astype(np.float64), axis=-1))
        if dots.max() > _UNIT_TOL:
            raise ValueError("tangent vectors must be orthogonal within 1e-6")
        if self.scales.min() <= 0.0:
            raise ValueError("scales must be positive")
        if self.opacities.min() < 0.0 or self.opacities.max() > 1.0:
            raise ValueError("opacity must be in [0, 1]")


# ---------------------------------------------------------------------------
# environment map


class EnvironmentMap:
    """Equirectangular radiance map: rows are polar angle, columns azimuth."""

    def __init__(self, pixels: np.ndarray):
        pixels = np.ascontiguousarray(pixels, dtype=np.float32)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError(f"env map must be HxWx3, got {pixels.shape}")
        if pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise ValueError("env map must be at least 1x1")
        if not np.all(np.isfinite(pixels)) or pixels.min() < 0.0:
            raise ValueError("env map values must be finite and non-negative")
        self.pixels = pixels

    @property
    def shape(self):
        return self.pixels.shape

    @classmethod
    def uniform(cls, color=(0.5, 0.5, 0.5), height: int = 8, width: int = 16):
        px = np.broadcast_to(np.asarray(color, dtype=np.float32),
                             (height, width, 3)).copy()
        return cls(px)


def dirs_to_angles(dirs: np.ndarray):
    """Unit-free directions (..., 3) -> (azimuth in [0, 2pi), polar in [0, pi])."""
    dirs = np.asarray(dirs, dtype=np.float64)
    norm = np.linalg.norm(dirs, axis=-1)
    if not np.all(np.isfinite(dirs)):
        raise ValueError("direction must be finite")
    if np.any(norm == 0.0):
        raise ValueError("direction must be nonzero")
    phi = np.mod(np.arctan2(dirs[..., 1], dirs[..., 0]), 2.0 * np.pi)
    eta = np.arccos(np.clip(dirs[..., 2] / norm, -1.0, 1.0))
    return phi, eta


def env_query(direction, env: EnvironmentMap, mode: str = "bilinear") -> np.ndarray:
    """Sample the equirectangular map for directions or (phi, eta) pairs.

    `direction` is either (..., 3) vectors or a tuple (phi, eta) of arrays.
    Azimuth wraps periodically; polar angle clamps at the poles.
    """
    if isinstance(direction, tuple) and len(direction) == 2:
        phi = np.asarray(direction[0], dtype=np.float64)
        eta = np.asarray(direction[1], dtype=np.float64)
        if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(eta))):
            raise ValueError("angles must be finite")
        phi = np.mod(phi, 2.0 * np.pi)
    else:
        phi, eta = dirs_to_angles(direction)

    h, w, _ = env.pixels.shape
    u = phi / (2.0 * np.pi)           # [0, 1)
    v = eta / np.pi                   # [0, 1]
    px = env.pixels.astype(np.float64)

    if mode == "nearest":
        col = np.mod(np.floor(u * w).astype(np.int64), w)
        row = np.clip(np.floor(v * h).astype(np.int64), 0, h - 1)
        out = px[row, col]
    elif mode == "bilinear":
        x = u * w - 0.5
        y = np.clip(v * h - 0.5, 0.0, h - 1.0)
        x0 = np.floor(x).astype(np.int64)
        y0 = np.floor(y).astype(np.int64)
        fx = (x - x0)[..., None]
        fy = (y - y0)[..., None]
        c0 = np.mod(x0, w)
        c1 = np.mod(x0 + 1, w)
        r0 = np.clip(y0, 0, h - 1)
        r1 = np.clip(y0 + 1, 0, h - 1)
        top = px[r0, c0] * (1.0 - fx) + px[r0, c1] * fx
        bot = px[r1, c0] * (1.0 - fx) + px[r1, c1] * fx
        out = top * (1.0 - fy) + bot * fy
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return out


def cosine_hemisphere_dirs(normal: np.ndarray, samples_per_axis: int = 8) -> np.ndarray:
    """Deterministic cosine-weighted directions about `normal`, (k*k, 3).

    Stratified grid in (sin^2 theta, phi); averaging the radiance over these
    directions estimates the cosine-weighted hemisphere mean and is exact for
    constant radiance.
    """
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    k = samples_per_axis
    i, j = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    u1 = (i.ravel() + 0.5) / k
    u2 = (j.ravel() + 0.5) / k
    sin_t = np.sqrt(u1)
    cos_t = np.sqrt(1.0 - u1)
    phi = 2.0 * np.pi * u2
    local = np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=-1)
    # frame about n: pick the world axis least aligned with n
    a = np.zeros(3)
    a[np.argmin(np.abs(n))] = 1.0
    t = np.cross(n, a)
    t /= np.linalg.norm(t)
    b = np.cross(n, t)
    return local[:, 0:1] * t + local[:, 1:2] * b + local[:, 2:3] * n


# ---------------------------------------------------------------------------
# proxy mesh


class TriangleMesh:
    """Indexed triangle mesh; may be empty."""

    def __init__(self, vertices, faces):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces):
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise ValueError("face index out of range")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("face references the same vertex twice")

    def __len__(self) -> int:
        return len(self.faces)

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def face_corners(self):
        v = self.vertices
        f = self.faces
        return v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]

    def face_normals_areas(self):
        """Unit normals and areas per face; degenerate faces get zero normal."""
        a, b, c = self.face_corners()
        cr = np.cross(b - a, c - a)
        dbl = np.linalg.norm(cr, axis=-1)
        areas = dbl / 2.0
        normals = np.zeros_like(cr)
        ok = dbl > 0.0
        normals[ok] = cr[ok] / dbl[ok, None]
        return normals, areas


# ---------------------------------------------------------------------------
# scene


@dataclass
class SceneModel:
    """Complete optimizable scene: splat set, environment map, proxy mesh."""

    cloud: SplatCloud
    env: EnvironmentMap
    proxy: TriangleMesh = field(default_factory=TriangleMesh.empty)
    metadata: dict = field(default_factory=dict)
    splat_cap: int = DEFAULT_SPLAT_CAP

    def __post_init__(self):
        if len(self.cloud) > self.splat_cap:
            raise CapacityError(
                f"splat count {len(self.cloud)} exceeds cap {self.splat_cap}")

    def validate(self):
        self.cloud.validate()
        if len(self.cloud) > self.splat_cap:
            raise CapacityError(
                f"splat count {len(self.cloud)} exceeds cap {self.splat_cap}")

    def copy(self) -> "SceneModel":
        return SceneModel(self.cloud.copy(), self.env, self.proxy,
                          dict(self.metadata), self.splat_cap)


# ---------------------------------------------------------------------------
# mesh -> splats


def _subdivide_large_faces(mesh: TriangleMesh, max_area: float) -> TriangleMesh:
    """Midpoint-split faces until none exceeds max_area."""
    verts = [v for v in mesh.vertices]
    out_faces = []
    stack = [tuple(f) for f in mesh.faces]
    while stack:
        f = stack.pop()
        a, b, c = (np.asarray(verts[i]) for i in f)
        area = np.linalg.norm(np.cross(b - a, c - a)) / 2.0
        if area <= max_area or area == 0.0:
            out_faces.append(f)
            continue
        base = len(verts)
        verts.extend([(a + b) / 2.0, (b + c) / 2.0, (c + a) / 2.0])
        ab, bc, ca = base, base + 1, base + 2
        stack.extend([(f[0], ab, ca), (ab, f[1], bc), (ca, bc, f[2]), (ab, bc, ca)])
    return TriangleMesh(np.asarray(verts), np.asarray(out_faces, dtype=np.int64))


def mesh_to_splats(mesh: TriangleMesh, scale_factor: float = 1.0, *,
                   opacity: float = 0.7, sh_degree: int = 0,
                   subdivide_area: float | None = None,
                   dtype=np.float32):
    """One splat per non-degenerate face, oriented by the face frame.

    tangent_u runs along the longest edge; tangent_v completes the frame so
    that tangent_u x tangent_v equals the face normal. The scale product is
    face_area * scale_factor, split by the face's bounding extents along the
    tangents. Color starts mid-gray, higher SH bands zero.

    Returns (cloud, skipped) where skipped counts zero-area faces.
    """
    if mesh.is_empty:
        raise ValueError("mesh is empty")
    if scale_factor <= 0.0:
        raise ValueError("scale_factor must be positive")
    if subdivide_area is not None:
        mesh = _subdivide_large_faces(mesh, subdivide_area)

    a, b, c = mesh.face_corners()
    normals, areas = mesh.face_normals_areas()
    ok = areas > 1e-12
    skipped = int(np.count_nonzero(~ok))
    a, b, c, normals, areas = a[ok], b[ok], c[ok], normals[ok], areas[ok]

    centroid = (a + b + c) / 3.0
    edges = np.stack([b - a, c - b, a - c], axis=1)           # (F, 3, 3)
    lengths = np.linalg.norm(edges, axis=-1)
    longest = np.argmax(lengths, axis=1)
    e = edges[np.arange(len(edges)), longest]
    tu = e / np.linalg.norm(e, axis=-1, keepdims=True)
    tv = np.cross(normals, tu)
    tv /= np.linalg.norm(tv, axis=-1, keepdims=True)

    # bounding extents of the corners along the tangent frame set the aspect
    rel = np.stack([a - centroid, b - centroid, c - centroid], axis=1)
    pu = np.einsum("fvk,fk->fv", rel, tu)
    pv = np.einsum("fvk,fk->fv", rel, tv)
    ext_u = pu.max(axis=1) - pu.min(axis=1)
    ext_v = pv.max(axis=1) - pv.min(axis=1)
    aspect = ext_u / np.maximum(ext_v, 1e-12)
    prod = areas * scale_factor
    s_u = np.sqrt(prod * aspect)
    s_v = np.sqrt(prod / aspect)

    n = len(centroid)
    nb = sh.num_bases(sh_degree)
    coeffs = np.zeros((n, nb, 3))
    coeffs[:, 0, :] = 0.5
    cloud = SplatCloud(centroid, tu, tv, np.stack([s_u, s_v], axis=-1),
                       np.full(n, opacity), coeffs, dtype)
    return cloud, skipped


# ---------------------------------------------------------------------------
# composition and relighting


@dataclass
class RigidTransform:
    """Rotation + translation + uniform scale, applied as x -> s*R@x + t."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > _UNIT_TOL or np.linalg.det(self.rotation) < 0.0:
            raise ValueError("rotation must be orthonormal with determinant +1")
        if self.scale <= 0.0:
            raise ValueError("scale must be positive")


def compose_and_relight(scene: SceneModel, asset: SplatCloud,
                        transform: RigidTransform | None = None, *,
                        relight: bool = False,
                        reference_irradiance: float = 1.0,
                        env_samples_per_axis: int = 8) -> SceneModel:
    """Transform an asset cloud into the scene and append it.

    With `relight`, each asset splat's degree-0 color is scaled channel-wise
    by the cosine-weighted hemisphere average of the environment map about
    the splat normal, divided by `reference_irradiance`.
    """
    if transform is None:
        transform = RigidTransform()
    total = len(scene.cloud) + len(asset)
    if total > scene.splat_cap:
        raise CapacityError(
            f"composition would reach {total} splats, cap is {scene.splat_cap}")

    r, t, s = transform.rotation, transform.translation, transform.scale
    identity = (s == 1.0 and np.array_equal(r, np.eye(3)) and not t.any())
    if identity:
        moved = asset.copy()
    else:
        moved = SplatCloud(
            s * (asset.centers.astype(np.float64) @ r.T) + t,
            asset.tangent_u.astype(np.float64) @ r.T,
            asset.tangent_v.astype(np.float64) @ r.T,
            asset.scales.astype(np.float64) * s,
            asset.opacities, asset.sh_coeffs, asset.dtype)

    if relight and len(moved):
        if reference_irradiance <= 0.0:
            raise ValueError("reference_irradiance must be positive")
        _, _, normals = moved.frames()
        gains = np.empty((len(moved), 3))
        for i, n in enumerate(normals):
            dirs = cosine_hemisphere_dirs(n, env_samples_per_axis)
            gains[i] = env_query(dirs, scene.env).mean(axis=0) / reference_irradiance
        coeffs = moved.sh_coeffs.astype(np.float64)
        coeffs[:, 0, :] *= gains
        moved.sh_coeffs = coeffs.astype(moved.dtype)

    out = scene.copy()
    out.cloud = scene.cloud.concatenated(moved)
    return out
