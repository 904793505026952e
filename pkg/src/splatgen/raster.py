"""Differentiable splat rendering and proxy-mesh buffer rendering.

Three render paths share one contract: `render` (tiled, compiled),
`render_reference` (vectorized numpy, the equivalence oracle, capped at 10k
splats), and `backward` (analytic adjoints of the composited buffers with
respect to every splat parameter). A pixel's value is defined by ray against
splat plane intersection: tau = (p - o) . n / (d . n) with rays scaled so tau
is camera-space depth, a planar Gaussian weight in the splat's tangent frame,
exact per-pixel front-to-back sorting (ties broken by splat index), and alpha
compositing over the environment map at infinity.

Normals are composited in camera space, flipped so they point along the view
ray (a planar splat is two-sided), and renormalized. Disparity is the
transmittance-weighted sum of 1/depth. The Gaussian support is truncated at
`sigma_cutoff` standard deviations in both paths; gradient tests disable the
cutoff to keep the forward map smooth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sh
from .camera import Camera
from .scene import SceneModel, SplatCloud, TriangleMesh

REFERENCE_SPLAT_LIMIT = 10_000

# must match _kernels constants; reference and tiled paths cull identically
_DEN_EPS = 1e-12
_W_MAX = 1.0 - 1e-7
_NORM_EPS = 1e-12


@dataclass
class RenderSettings:
    dtype: type = np.float32
    sigma_cutoff: float | None = 3.0
    tile_size: int = 16
    deterministic: bool = True
    env_mode: str = "bilinear"

    @property
    def cutoff_sq(self) -> float:
        if self.sigma_cutoff is None:
            return np.inf
        return float(self.sigma_cutoff) ** 2


@dataclass
class RenderBuffers:
    color: np.ndarray      # H x W x 3
    disparity: np.ndarray  # H x W, 1/meters, 0 at background
    normal: np.ndarray     # H x W x 3, camera space unit or zero
    alpha: np.ndarray      # H x W

    @property
    def resolution(self):
        return self.color.shape[1], self.color.shape[0]

    def validate(self):
        for name in ("color", "disparity", "normal", "alpha"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {name} buffer")
        if self.alpha.min() < 0.0 or self.alpha.max() > 1.0 + 1e-6:
            raise ValueError("alpha out of range")
        bgpix = self.alpha == 0.0
        if np.any(self.disparity[bgpix] != 0.0):
            raise ValueError("background pixel with nonzero disparity")
        if np.any(self.normal[bgpix] != 0.0):
            raise ValueError("background pixel with nonzero normal")


@dataclass
class BufferAdjoints:
    """Per-pixel loss gradients flowing back into the rendered buffers."""

    color: np.ndarray | None = None
    disparity: np.ndarray | None = None
    normal: np.ndarray | None = None
    alpha: np.ndarray | None = None

    def dense(self, height: int, width: int):
        def pick(arr, shape):
            if arr is None:
                return np.zeros(shape, dtype=np.float64)
            out = np.ascontiguousarray(arr, dtype=np.float64)
            if out.shape != shape:
                raise ValueError(f"adjoint shape {out.shape}, expected {shape}")
            return out
        return (pick(self.color, (height, width, 3)),
                pick(self.disparity, (height, width)),
                pick(self.normal, (height, width, 3)),
                pick(self.alpha, (height, width)))


@dataclass
class SplatGradients:
    """Loss partials per splat, ordered like the scene's splat arrays."""

    centers: np.ndarray    # N x 3
    tangent_u: np.ndarray  # N x 3, w.r.t. the raw (stored) tangent
    tangent_v: np.ndarray  # N x 3
    scales: np.ndarray     # N x 2
    opacities: np.ndarray  # N
    sh_coeffs: np.ndarray  # N x nb x 3

    def assert_finite(self):
        for name in ("centers", "tangent_u", "tangent_v", "scales",
                     "opacities", "sh_coeffs"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite gradient in {name}")

    def scaled(self, factor: float) -> "SplatGradients":
        return SplatGradients(self.centers * factor, self.tangent_u * factor,
                              self.tangent_v * factor, self.scales * factor,
                              self.opacities * factor, self.sh_coeffs * factor)


def set_threads(n: int):
    """Size the compiled kernels' thread pool; raises if n exceeds the host."""
    import numba
    if n < 1:
        raise ValueError("thread count must be >= 1")
    try:
        numba.set_num_threads(n)
    except ValueError as exc:
        raise ValueError(
            f"cannot use {n} threads on this host: {exc}") from exc


# ---------------------------------------------------------------------------
# shared preparation


def _splat_inputs(cloud: SplatCloud, campos: np.ndarray):
    """Float64 kernel inputs plus the color-evaluation byproducts."""
    u, v, n = cloud.frames()
    centers = cloud.centers.astype(np.float64)
    rel = centers - campos[None, :]
    r = np.linalg.norm(rel, axis=-1)
    dirs = np.zeros_like(rel)
    ok = r > 1e-12
    dirs[ok] = rel[ok] / r[ok, None]
    dirs[~ok] = (0.0, 0.0, 1.0)
    colors, inside, basis = sh.eval_colors(
        cloud.sh_coeffs.astype(np.float64), dirs)
    return {
        "centers": centers,
        "u": u, "v": v, "n": n,
        "scales": cloud.scales.astype(np.float64),
        "opac": cloud.opacities.astype(np.float64),
        "colors": np.ascontiguousarray(colors),
        "inside": inside, "basis": basis, "dirs": dirs, "radii": r,
    }


def _background(scene: SceneModel, ray_dirs: np.ndarray, mode: str):
    from .scene import env_query
    return np.ascontiguousarray(env_query(ray_dirs, scene.env, mode))


def _point_tile_ranges(points, campos, camera: Camera, tile_size: int,
                       tiles_x: int, tiles_y: int):
    """Conservative tile and pixel ranges for per-primitive corners (N, k, 3).

    Entirely-behind or beyond-far primitives get an empty range; primitives
    crossing the near plane fall back to all tiles (their projection is
    unbounded). Also returns the inclusive pixel-center bounds the tile
    ranges derive from, full-image for the unbounded case.
    """
    npts = points.shape[0]
    rot = camera.rotation.astype(np.float64)
    cam_pts = (points - campos[None, None, :]) @ rot.T
    z = cam_pts[..., 2]
    zmin = z.min(axis=1)
    zmax = z.max(axis=1)
    cull = (zmax <= camera.near) | (zmin >= camera.far)
    unbounded = (~cull) & (zmin <= camera.near)

    tx0 = np.zeros(npts, dtype=np.int64)
    tx1 = np.full(npts, tiles_x - 1, dtype=np.int64)
    ty0 = np.zeros(npts, dtype=np.int64)
    ty1 = np.full(npts, tiles_y - 1, dtype=np.int64)
    px0 = np.zeros(npts, dtype=np.int64)
    px1 = np.full(npts, camera.width - 1, dtype=np.int64)
    py0 = np.zeros(npts, dtype=np.int64)
    py1 = np.full(npts, camera.height - 1, dtype=np.int64)

    safe = ~(cull | unbounded)
    if np.any(safe):
        f = camera.focal
        cx, cy = camera.principal
        zs = z[safe]
        px = f * cam_pts[safe, :, 0] / zs + (cx - 0.5)
        py = f * cam_pts[safe, :, 1] / zs + (cy - 0.5)
        ix0 = np.ceil(px.min(axis=1) - 1e-6)
        ix1 = np.floor(px.max(axis=1) + 1e-6)
        iy0 = np.ceil(py.min(axis=1) - 1e-6)
        iy1 = np.floor(py.max(axis=1) + 1e-6)
        ix0 = np.clip(ix0, 0, camera.width - 1).astype(np.int64)
        ix1 = np.clip(ix1, 0, camera.width - 1).astype(np.int64)
        iy0 = np.clip(iy0, 0, camera.height - 1).astype(np.int64)
        iy1 = np.clip(iy1, 0, camera.height - 1).astype(np.int64)
        offscreen = (px.max(axis=1) < -1e-6) | (px.min(axis=1) > camera.width - 1 + 1e-6) \
            | (py.max(axis=1) < -1e-6) | (py.min(axis=1) > camera.height - 1 + 1e-6)
        tx0[safe] = ix0 // tile_size
        tx1[safe] = ix1 // tile_size
        ty0[safe] = iy0 // tile_size
        ty1[safe] = iy1 // tile_size
        px0[safe] = ix0
        px1[safe] = ix1
        py0[safe] = iy0
        py1[safe] = iy1
        sidx = np.flatnonzero(safe)[offscreen]
        tx1[sidx] = -1
    tx1[cull] = -1
    tx0[cull] = 0
    return tx0, tx1, ty0, ty1, px0, px1, py0, py1


def _splat_bins(prep, campos, camera: Camera, settings: RenderSettings,
                tiles_x: int, tiles_y: int):
    """Tile bins plus per-splat conservative pixel bounds."""
    from . import _kernels
    n = len(prep["centers"])
    if n == 0:
        z = np.zeros(0, dtype=np.int64)
        return (np.zeros(tiles_x * tiles_y + 1, dtype=np.int64), z,
                z, z, z, z)
    if settings.sigma_cutoff is None:
        tx0 = np.zeros(n, dtype=np.int64)
        tx1 = np.full(n, tiles_x - 1, dtype=np.int64)
        ty0 = np.zeros(n, dtype=np.int64)
        ty1 = np.full(n, tiles_y - 1, dtype=np.int64)
        px0 = np.zeros(n, dtype=np.int64)
        px1 = np.full(n, camera.width - 1, dtype=np.int64)
        py0 = np.zeros(n, dtype=np.int64)
        py1 = np.full(n, camera.height - 1, dtype=np.int64)
    else:
        c = float(settings.sigma_cutoff)
        du = (c * prep["scales"][:, 0])[:, None] * prep["u"]
        dv = (c * prep["scales"][:, 1])[:, None] * prep["v"]
        p = prep["centers"]
        corners = np.stack([p + du + dv, p + du - dv, p - du + dv, p - du - dv],
                           axis=1)
        tx0, tx1, ty0, ty1, px0, px1, py0, py1 = _point_tile_ranges(
            corners, campos, camera, settings.tile_size, tiles_x, tiles_y)
    off, ids = _kernels.fill_tile_bins(tx0, tx1, ty0, ty1, tiles_x, tiles_y)
    return off, ids, px0, px1, py0, py1


def _plane_constants(prep, campos, rot):
    """Per-splat quantities fixed by the camera pose.

    num is the plane offset along the normal, ku/kv the tangent-plane
    coordinates of the camera, with the tangents pre-divided by scale; the
    kernels reconstruct every per-pixel quantity from these plus d alone.
    inv_num is inf for a plane through the camera, which is harmless: such
    splats have tau = 0 and never survive the depth test.
    """
    u, v, nn = prep["u"], prep["v"], prep["n"]
    tus = u / prep["scales"][:, 0:1]
    tvs = v / prep["scales"][:, 1:2]
    rel = prep["centers"] - campos[None, :]
    num = np.einsum("ij,ij->i", rel, nn)
    with np.errstate(divide="ignore"):
        inv_num = 1.0 / num
    ku = np.einsum("ij,ij->i", rel, tus)
    kv = np.einsum("ij,ij->i", rel, tvs)
    return {
        "tus": tus, "tvs": tvs, "num": num, "inv_num": inv_num,
        "ku": ku, "kv": kv, "ncam": nn @ rot.T, "zc": rel @ rot[2],
    }


def _tile_grid(camera: Camera, tile_size: int):
    tiles_x = (camera.width + tile_size - 1) // tile_size
    tiles_y = (camera.height + tile_size - 1) // tile_size
    return tiles_x, tiles_y


# ---------------------------------------------------------------------------
# forward


def render(scene: SceneModel, camera: Camera,
           settings: RenderSettings | None = None) -> RenderBuffers:
    """Tiled compiled render of the full scene."""
    from . import _kernels
    settings = settings or RenderSettings()
    campos = camera.position.astype(np.float64)
    prep = _splat_inputs(scene.cloud, campos)
    ray_dirs = camera.pixel_ray_dirs(np.float64)
    bg = _background(scene, ray_dirs, settings.env_mode)
    tiles_x, tiles_y = _tile_grid(camera, settings.tile_size)
    tile_off, tile_ids, px0, px1, py0, py1 = _splat_bins(
        prep, campos, camera, settings, tiles_x, tiles_y)
    rot = camera.rotation.astype(np.float64)
    pc = _plane_constants(prep, campos, rot)
    dxp = np.ascontiguousarray(ray_dirs[:, :, 0])
    dyp = np.ascontiguousarray(ray_dirs[:, :, 1])
    dzp = np.ascontiguousarray(ray_dirs[:, :, 2])

    h, w = camera.height, camera.width
    color = np.empty((h, w, 3), dtype=np.float64)
    disp = np.empty((h, w), dtype=np.float64)
    normal = np.empty((h, w, 3), dtype=np.float64)
    alpha = np.empty((h, w), dtype=np.float64)
    _kernels.forward_kernel(
        dxp, dyp, dzp, prep["n"], pc["tus"], pc["tvs"], pc["num"],
        pc["inv_num"], pc["ku"], pc["kv"], prep["opac"], prep["colors"],
        np.ascontiguousarray(pc["ncam"]), pc["zc"], px0, px1, py0, py1,
        tile_off, tile_ids, tiles_x, settings.tile_size, bg,
        camera.near, camera.far, settings.cutoff_sq,
        color, disp, normal, alpha)
    dt = settings.dtype
    return RenderBuffers(color.astype(dt), disp.astype(dt),
                         normal.astype(dt), alpha.astype(dt))


def render_reference(scene: SceneModel, camera: Camera,
                     settings: RenderSettings | None = None) -> RenderBuffers:
    """Exhaustive per-pixel oracle; contract identical to `render`."""
    from ._kernels import exp_neg_half
    settings = settings or RenderSettings()
    n = len(scene.cloud)
    if n > REFERENCE_SPLAT_LIMIT:
        raise ValueError(
            f"reference path limited to {REFERENCE_SPLAT_LIMIT} splats, got {n}")
    campos = camera.position.astype(np.float64)
    prep = _splat_inputs(scene.cloud, campos)
    ray_dirs = camera.pixel_ray_dirs(np.float64)
    bg = _background(scene, ray_dirs, settings.env_mode)
    rot = camera.rotation.astype(np.float64)

    h, w = camera.height, camera.width
    color = np.empty((h, w, 3), dtype=np.float64)
    disp = np.zeros((h, w), dtype=np.float64)
    normal = np.zeros((h, w, 3), dtype=np.float64)
    alpha = np.zeros((h, w), dtype=np.float64)

    if n == 0:
        color[:] = bg
        dt = settings.dtype
        return RenderBuffers(color.astype(dt), disp.astype(dt),
                             normal.astype(dt), alpha.astype(dt))

    nn = prep["n"]
    opac = prep["opac"]
    cols = prep["colors"]
    pc = _plane_constants(prep, campos, rot)
    tus, tvs = pc["tus"], pc["tvs"]
    num = pc["num"][None, :]
    inv_num = pc["inv_num"][None, :]
    ku = pc["ku"][None, :]
    kv = pc["kv"][None, :]
    m_cam_pos = pc["ncam"]   # camera-space unflipped normals, N x 3

    cutoff_sq = settings.cutoff_sq

    def dots(d, m):
        # explicit mul-add chain: bit-identical to the kernels, unlike BLAS
        return (d[:, None, 0] * m[None, :, 0] + d[:, None, 1] * m[None, :, 1]
                + d[:, None, 2] * m[None, :, 2])

    for row in range(h):
        d = ray_dirs[row].astype(np.float64)              # W x 3
        den = dots(d, nn)                                 # W x N
        live = np.abs(den) >= _DEN_EPS
        inv = 1.0 / np.where(live, den, 1.0)
        tau = num * inv
        live &= (tau > camera.near) & (tau < camera.far)
        tud = dots(d, tus)
        tvd = dots(d, tvs)
        ru = (num * tud - ku * den) * inv
        rv = (num * tvd - kv * den) * inv
        q = ru * ru + rv * rv
        live &= q <= cutoff_sq
        gmask = np.where(live, q, 0.0)
        gk = exp_neg_half(gmask.ravel()).reshape(gmask.shape)
        wgt = np.where(live, opac[None, :] * gk, 0.0)
        wgt = np.minimum(wgt, _W_MAX)

        tau_sort = np.where(live, tau, np.inf)
        order = np.argsort(tau_sort, axis=1, kind="stable")
        w_s = np.take_along_axis(wgt, order, axis=1)
        keep = np.cumprod(1.0 - w_s, axis=1)
        t_prev = np.concatenate([np.ones((w, 1)), keep[:, :-1]], axis=1)
        wt = t_prev * w_s

        c_s = cols[order]                                 # W x N x 3
        color[row] = np.einsum("wn,wnk->wk", wt, c_s) + keep[:, -1:] * bg[row]
        with np.errstate(invalid="ignore"):
            dinv = np.where(live, den * inv_num, 0.0)     # 1/tau, masked
        disp[row] = (wt * np.take_along_axis(dinv, order, axis=1)).sum(axis=1)
        flip = np.where(den >= 0.0, 1.0, -1.0)
        m = flip[..., None] * m_cam_pos[None, :, :]       # W x N x 3
        m_s = np.take_along_axis(m, order[..., None], axis=1)
        nsum = np.einsum("wn,wnk->wk", wt, m_s)
        nlen = np.linalg.norm(nsum, axis=-1)
        good = nlen > _NORM_EPS
        normal[row][good] = nsum[good] / nlen[good, None]
        alpha[row] = 1.0 - keep[:, -1]

    dt = settings.dtype
    return RenderBuffers(color.astype(dt), disp.astype(dt),
                         normal.astype(dt), alpha.astype(dt))


# ---------------------------------------------------------------------------
# backward


def backward(scene: SceneModel, camera: Camera, adjoints: BufferAdjoints,
             settings: RenderSettings | None = None) -> SplatGradients:
    """Analytic adjoint of `render` with respect to every splat parameter.

    Accumulation is serial in tile-then-pixel order, so results are exactly
    reproducible for a given scene and camera.
    """
    from . import _kernels
    settings = settings or RenderSettings()
    campos = camera.position.astype(np.float64)
    cloud = scene.cloud
    prep = _splat_inputs(cloud, campos)
    ray_dirs = camera.pixel_ray_dirs(np.float64)
    bg = _background(scene, ray_dirs, settings.env_mode)
    tiles_x, tiles_y = _tile_grid(camera, settings.tile_size)
    tile_off, tile_ids = _splat_bins(prep, campos, camera, settings,
                                     tiles_x, tiles_y)[:2]
    a_color, a_disp, a_normal, a_alpha = adjoints.dense(camera.height,
                                                        camera.width)

    n = len(cloud)
    g_center = np.zeros((n, 3))
    g_u = np.zeros((n, 3))
    g_v = np.zeros((n, 3))
    g_n = np.zeros((n, 3))
    g_scale = np.zeros((n, 2))
    g_opac = np.zeros(n)
    g_color = np.zeros((n, 3))
    _kernels.backward_kernel(
        ray_dirs, campos, camera.rotation.astype(np.float64),
        prep["centers"], prep["u"], prep["v"], prep["n"], prep["scales"],
        prep["opac"], prep["colors"], tile_off, tile_ids, tiles_x,
        settings.tile_size, bg, camera.near, camera.far, settings.cutoff_sq,
        a_color, a_disp, a_normal, a_alpha,
        g_center, g_u, g_v, g_n, g_scale, g_opac, g_color)

    u, v = prep["u"], prep["v"]
    # n = u x v: fold the normal adjoint into the orthonormal tangents
    g_u_total = g_u + np.cross(v, g_n)
    g_v_total = g_v + np.cross(g_n, u)

    # Gram-Schmidt chain back to the raw stored tangents
    tu_raw = cloud.tangent_u.astype(np.float64)
    tv_raw = cloud.tangent_v.astype(np.float64)
    l1 = np.linalg.norm(tu_raw, axis=-1, keepdims=True)
    cdot = np.sum(tv_raw * u, axis=-1, keepdims=True)
    wvec = tv_raw - cdot * u
    l2 = np.linalg.norm(wvec, axis=-1, keepdims=True)

    g_w = (g_v_total - np.sum(g_v_total * v, axis=-1, keepdims=True) * v) / l2
    g_tv = g_w - np.sum(g_w * u, axis=-1, keepdims=True) * u
    g_u_total = g_u_total - np.sum(g_w * u, axis=-1, keepdims=True) * tv_raw \
        - cdot * g_w
    g_tu = (g_u_total - np.sum(g_u_total * u, axis=-1, keepdims=True) * u) / l1

    # color chain: clip mask, then coefficients and the view-direction term
    inside = prep["inside"].astype(np.float64)
    g_c = g_color * inside
    basis = prep["basis"]                              # N x nb
    g_coeffs = basis[:, :, None] * g_c[:, None, :]     # N x nb x 3
    degree = cloud.sh_degree
    if degree > 0:
        gb = sh.eval_basis_grad(prep["dirs"], degree)  # N x nb x 3
        coeffs = cloud.sh_coeffs.astype(np.float64)
        g_dir = np.einsum("nc,nbc,nbk->nk", g_c, coeffs, gb)
        r = prep["radii"]
        ok = r > 1e-12
        d = prep["dirs"]
        proj = g_dir - np.sum(g_dir * d, axis=-1, keepdims=True) * d
        g_center[ok] += proj[ok] / r[ok, None]

    return SplatGradients(g_center, g_tu, g_tv, g_scale, g_opac, g_coeffs)


# ---------------------------------------------------------------------------
# proxy-mesh buffers


def render_mesh_buffers(mesh: TriangleMesh, camera: Camera,
                        settings: RenderSettings | None = None) -> RenderBuffers:
    """Nearest-hit rasterization of the proxy mesh into conditioning buffers.

    Color stays zero; alpha is the hit mask; normals follow the same
    face-the-ray orientation as the splat path so the buffers are comparable.
    """
    from . import _kernels
    settings = settings or RenderSettings()
    h, w = camera.height, camera.width
    dt = settings.dtype
    disp = np.zeros((h, w), dtype=np.float64)
    normal = np.zeros((h, w, 3), dtype=np.float64)
    alpha = np.zeros((h, w), dtype=np.float64)
    if mesh.is_empty:
        return RenderBuffers(np.zeros((h, w, 3), dtype=dt), disp.astype(dt),
                             normal.astype(dt), alpha.astype(dt))

    campos = camera.position.astype(np.float64)
    va, vb, vc = (np.ascontiguousarray(x) for x in mesh.face_corners())
    fnrm, _ = mesh.face_normals_areas()
    ray_dirs = camera.pixel_ray_dirs(np.float64)
    tiles_x, tiles_y = _tile_grid(camera, settings.tile_size)
    tri = np.stack([va, vb, vc], axis=1)
    tx0, tx1, ty0, ty1 = _point_tile_ranges(tri, campos, camera,
                                            settings.tile_size,
                                            tiles_x, tiles_y)[:4]
    tile_off, tile_ids = _kernels.fill_tile_bins(tx0, tx1, ty0, ty1,
                                                 tiles_x, tiles_y)
    _kernels.mesh_forward_kernel(
        ray_dirs, campos, camera.rotation.astype(np.float64), va, vb, vc,
        np.ascontiguousarray(fnrm), tile_off, tile_ids, tiles_x,
        settings.tile_size, camera.near, camera.far, disp, normal, alpha)
    return RenderBuffers(np.zeros((h, w, 3), dtype=dt), disp.astype(dt),
                         normal.astype(dt), alpha.astype(dt))


def render_mesh_buffers_reference(mesh: TriangleMesh, camera: Camera,
                                  settings: RenderSettings | None = None):
    """Unbinned numpy mesh pass used to cross-check the compiled kernel."""
    settings = settings or RenderSettings()
    h, w = camera.height, camera.width
    dt = settings.dtype
    out = RenderBuffers(np.zeros((h, w, 3), dtype=dt), np.zeros((h, w), dtype=dt),
                        np.zeros((h, w, 3), dtype=dt), np.zeros((h, w), dtype=dt))
    if mesh.is_empty:
        return out
    campos = camera.position.astype(np.float64)
    va, vb, vc = mesh.face_corners()
    fnrm, _ = mesh.face_normals_areas()
    rot = camera.rotation.astype(np.float64)
    ray_dirs = camera.pixel_ray_dirs(np.float64)
    e1 = vb - va
    e2 = vc - va
    s = campos[None, :] - va
    disp = np.zeros((h, w), dtype=np.float64)
    normal = np.zeros((h, w, 3), dtype=np.float64)
    alpha = np.zeros((h, w), dtype=np.float64)
    for row in range(h):
        d = ray_dirs[row]                                     # W x 3
        hvec = np.cross(d[:, None, :], e2[None, :, :])        # W x F x 3
        det = np.einsum("fk,wfk->wf", e1, hvec)
        live = np.abs(det) >= 1e-12
        inv = np.where(live, 1.0 / np.where(live, det, 1.0), 0.0)
        bu = np.einsum("fk,wfk->wf", s, hvec) * inv
        live &= (bu >= 0.0) & (bu <= 1.0)
        qvec = np.cross(s, e1)                                # F x 3
        bv = np.einsum("wk,fk->wf", d, qvec) * inv
        live &= (bv >= 0.0) & (bu + bv <= 1.0)
        tau = np.einsum("fk,fk->f", e2, qvec)[None, :] * inv
        live &= (tau > camera.near) & (tau < camera.far)
        tau = np.where(live, tau, np.inf)
        best = np.argmin(tau, axis=1)                         # ties: lowest id
        rows_idx = np.arange(w)
        hit = np.isfinite(tau[rows_idx, best])
        f = best[hit]
        den = np.einsum("wk,wk->w", d[hit], fnrm[f])
        flip = np.where(den >= 0.0, 1.0, -1.0)
        normal[row][hit] = (flip[:, None] * fnrm[f]) @ rot.T
        disp[row][hit] = 1.0 / tau[rows_idx, best][hit]
        alpha[row][hit] = 1.0
    return RenderBuffers(out.color, disp.astype(dt), normal.astype(dt),
                         alpha.astype(dt))
