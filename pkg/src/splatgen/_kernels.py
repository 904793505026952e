"""Numba kernels for the tiled rasterizer.

All kernels compute in float64 and are cached to disk. The forward kernel
parallelizes over tiles; each pixel is owned by exactly one tile, so the
parallel schedule cannot change any pixel's value. Within a tile it walks
candidates over their projected pixel boxes, rejects most pixels with a
division-free fused-multiply prefilter, and scatters survivors into per-pixel
chains that are then sorted and composited. The backward kernel is serial:
per-splat accumulation order is then a pure function of the scene, which the
determinism contract requires.
"""

import math

import numpy as np
from numba import njit, prange

# culling constants shared by every render path (tiled, reference, backward);
# the paths must agree bit-for-bit on which contributions exist
DEN_EPS = 1e-12
W_MAX = 1.0 - 1e-7
NORM_EPS = 1e-12


@njit(cache=True)
def exp_neg_half(q):
    """libm exp(-q/2) over a flat array.

    numpy's vectorized exp and libm disagree by one ulp on a few percent of
    inputs; every path must use the libm result or the bit-for-bit
    equivalence contract breaks.
    """
    out = np.empty_like(q)
    for i in range(q.shape[0]):
        out[i] = math.exp(-0.5 * q[i])
    return out


@njit(cache=True)
def fill_tile_bins(tx0, tx1, ty0, ty1, tiles_x, tiles_y):
    """Scatter splats into per-tile id lists from inclusive tile ranges.

    Returns (offsets, ids): ids[offsets[t]:offsets[t+1]] are the splat ids
    binned to tile t, ascending.
    """
    ntiles = tiles_x * tiles_y
    counts = np.zeros(ntiles + 1, dtype=np.int64)
    n = tx0.shape[0]
    for s in range(n):
        if tx1[s] < tx0[s]:
            continue
        for ty in range(ty0[s], ty1[s] + 1):
            base = ty * tiles_x
            for tx in range(tx0[s], tx1[s] + 1):
                counts[base + tx + 1] += 1
    offsets = np.cumsum(counts)
    ids = np.empty(offsets[ntiles], dtype=np.int64)
    cursor = offsets[:ntiles].copy()
    for s in range(n):
        if tx1[s] < tx0[s]:
            continue
        for ty in range(ty0[s], ty1[s] + 1):
            base = ty * tiles_x
            for tx in range(tx0[s], tx1[s] + 1):
                t = base + tx
                ids[cursor[t]] = s
                cursor[t] += 1
    return offsets, ids


@njit(cache=True, error_model="numpy")
def _bbox_eval(dxp, dyp, dzp, ya, yb, xa, xb, n0, n1, n2, u0, u1, u2,
               v0, v1, v2, num, ku, kv, near, far, cutoff_sq,
               taub, denb, qb, okb):
    """Per-pixel cull decisions and hit values over one candidate's box.

    Straight-line strict IEEE ops per lane, so the loop vectorizes while
    every value stays bit-identical to the reference path's. The numpy error
    model lets den = 0 lanes flow through as inf/nan; every comparison below
    then rejects them, matching the explicit epsilon cull.
    """
    for py in range(ya, yb + 1):
        r = py - ya
        for i in range(xb - xa + 1):
            dx = dxp[py, xa + i]
            dy = dyp[py, xa + i]
            dz = dzp[py, xa + i]
            den = n0 * dx + n1 * dy + n2 * dz
            invden = 1.0 / den
            tau = num * invden
            tud = u0 * dx + u1 * dy + u2 * dz
            tvd = v0 * dx + v1 * dy + v2 * dz
            ru = (num * tud - ku * den) * invden
            rv = (num * tvd - kv * den) * invden
            q = ru * ru + rv * rv
            taub[r, i] = tau
            denb[r, i] = den
            qb[r, i] = q
            okb[r, i] = (abs(den) >= DEN_EPS) & (tau > near) & (tau < far) \
                & (q <= cutoff_sq)


@njit(cache=True, parallel=True)
def forward_kernel(dxp, dyp, dzp, nrm, tus, tvs, num, inv_num, ku, kv,
                   opac, colors, ncam, zc, bx0a, bx1a, by0a, by1a,
                   tile_off, tile_ids, tiles_x, tile_size,
                   bg, near, far, cutoff_sq,
                   out_color, out_disp, out_normal, out_alpha):
    height, width = dxp.shape
    ntiles = tile_off.shape[0] - 1
    # widened bounds for the prefilter; far and the cutoff are clamped to a
    # finite value so fastmath never sees an inf operand
    nearw = near * (1.0 - 1e-6)
    farw = min(far * (1.0 + 1e-6), 1e300)
    cutoffw = min(cutoff_sq * (1.0 + 1e-6), 1e300)
    deps = DEN_EPS * (1.0 - 1e-6)
    for t in prange(ntiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        y0 = ty * tile_size
        x0 = tx * tile_size
        y1 = min(y0 + tile_size, height)
        x1 = min(x0 + tile_size, width)
        tw = x1 - x0
        tpx = (y1 - y0) * tw
        start = tile_off[t]
        cnt = tile_off[t + 1] - start

        head = np.full(tpx, -1, dtype=np.int32)
        nb = max(cnt, 1)
        btau = np.empty(nb, dtype=np.float64)
        bw = np.empty(nb, dtype=np.float64)
        bden = np.empty(nb, dtype=np.float64)
        bsid = np.empty(nb, dtype=np.int64)

        if cnt > 0:
            # candidates in center-depth order, so per-pixel chains come out
            # nearly sorted and the insertion sort below stays linear
            zcl = np.empty(cnt, dtype=np.float64)
            for k in range(cnt):
                zcl[k] = zc[tile_ids[start + k]]
            order = np.argsort(zcl)

            csid = np.empty(cnt, dtype=np.int64)
            cbx0 = np.empty(cnt, dtype=np.int64)
            cbx1 = np.empty(cnt, dtype=np.int64)
            cby0 = np.empty(cnt, dtype=np.int64)
            cby1 = np.empty(cnt, dtype=np.int64)
            cap = 0
            for k in range(cnt):
                s = tile_ids[start + order[k]]
                csid[k] = s
                a = max(bx0a[s], x0)
                b = min(bx1a[s], x1 - 1)
                c = max(by0a[s], y0)
                e = min(by1a[s], y1 - 1)
                cbx0[k] = a
                cbx1[k] = b
                cby0[k] = c
                cby1[k] = e
                if b >= a and e >= c:
                    cap += (b - a + 1) * (e - c + 1)

            ntau = np.empty(cap, dtype=np.float64)
            nw = np.empty(cap, dtype=np.float64)
            nden = np.empty(cap, dtype=np.float64)
            nsid = np.empty(cap, dtype=np.int32)
            nnext = np.empty(cap, dtype=np.int32)
            okb = np.empty((tile_size, tile_size), dtype=np.bool_)
            nn = 0

            for k in range(cnt):
                xa = cbx0[k]
                xb = cbx1[k]
                ya = cby0[k]
                yb = cby1[k]
                if xb < xa or yb < ya:
                    continue
                s = csid[k]
                n0 = nrm[s, 0]
                n1 = nrm[s, 1]
                n2 = nrm[s, 2]
                u0 = tus[s, 0]
                u1 = tus[s, 1]
                u2 = tus[s, 2]
                v0 = tvs[s, 0]
                v1 = tvs[s, 1]
                v2 = tvs[s, 2]
                nm = num[s]
                k_u = ku[s]
                k_v = kv[s]
                op = opac[s]
                _prefilter_bbox(dxp, dyp, dzp, ya, yb, xa, xb, n0, n1, n2,
                                u0, u1, u2, v0, v1, v2, nm, k_u, k_v,
                                nearw, farw, cutoffw, deps, okb)
                for py in range(ya, yb + 1):
                    r = py - ya
                    rowbase = (py - y0) * tw - x0
                    for i in range(xb - xa + 1):
                        if not okb[r, i]:
                            continue
                        px = xa + i
                        dx = dxp[py, px]
                        dy = dyp[py, px]
                        dz = dzp[py, px]
                        den = n0 * dx + n1 * dy + n2 * dz
                        if abs(den) < DEN_EPS:
                            continue
                        invden = 1.0 / den
                        tau = nm * invden
                        if tau <= near or tau >= far:
                            continue
                        tud = u0 * dx + u1 * dy + u2 * dz
                        tvd = v0 * dx + v1 * dy + v2 * dz
                        ru = (nm * tud - k_u * den) * invden
                        rv = (nm * tvd - k_v * den) * invden
                        q = ru * ru + rv * rv
                        if q > cutoff_sq:
                            continue
                        w = op * math.exp(-0.5 * q)
                        if w > W_MAX:
                            w = W_MAX
                        p = rowbase + px
                        ntau[nn] = tau
                        nw[nn] = w
                        nden[nn] = den
                        nsid[nn] = s
                        nnext[nn] = head[p]
                        head[p] = nn
                        nn += 1

        p = 0
        for py in range(y0, y1):
            for px in range(x0, x1):
                # chains are last-in first-out, so walking gives far-to-near;
                # reverse, then finish with an exact (tau, id) insertion sort
                m = 0
                j = head[p]
                while j >= 0:
                    btau[m] = ntau[j]
                    bw[m] = nw[j]
                    bden[m] = nden[j]
                    bsid[m] = nsid[j]
                    m += 1
                    j = nnext[j]
                for a in range(m // 2):
                    b = m - 1 - a
                    btau[a], btau[b] = btau[b], btau[a]
                    bw[a], bw[b] = bw[b], bw[a]
                    bden[a], bden[b] = bden[b], bden[a]
                    bsid[a], bsid[b] = bsid[b], bsid[a]
                for a in range(1, m):
                    kt = btau[a]
                    kw = bw[a]
                    kd = bden[a]
                    ki = bsid[a]
                    b = a - 1
                    while b >= 0 and (btau[b] > kt or (btau[b] == kt and bsid[b] > ki)):
                        btau[b + 1] = btau[b]
                        bw[b + 1] = bw[b]
                        bden[b + 1] = bden[b]
                        bsid[b + 1] = bsid[b]
                        b -= 1
                    btau[b + 1] = kt
                    bw[b + 1] = kw
                    bden[b + 1] = kd
                    bsid[b + 1] = ki

                trans = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                dsum = 0.0
                nx = 0.0
                ny = 0.0
                nz = 0.0
                for j in range(m):
                    s = bsid[j]
                    w = bw[j]
                    flip = 1.0 if bden[j] >= 0.0 else -1.0
                    wt = trans * w
                    c0 += wt * colors[s, 0]
                    c1 += wt * colors[s, 1]
                    c2 += wt * colors[s, 2]
                    dsum += wt * (bden[j] * inv_num[s])
                    nx += wt * (flip * ncam[s, 0])
                    ny += wt * (flip * ncam[s, 1])
                    nz += wt * (flip * ncam[s, 2])
                    trans *= (1.0 - w)
                out_color[py, px, 0] = c0 + trans * bg[py, px, 0]
                out_color[py, px, 1] = c1 + trans * bg[py, px, 1]
                out_color[py, px, 2] = c2 + trans * bg[py, px, 2]
                out_disp[py, px] = dsum
                out_alpha[py, px] = 1.0 - trans
                nlen = math.sqrt(nx * nx + ny * ny + nz * nz)
                if nlen > NORM_EPS:
                    out_normal[py, px, 0] = nx / nlen
                    out_normal[py, px, 1] = ny / nlen
                    out_normal[py, px, 2] = nz / nlen
                else:
                    out_normal[py, px, 0] = 0.0
                    out_normal[py, px, 1] = 0.0
                    out_normal[py, px, 2] = 0.0
                p += 1


@njit(cache=True)
def backward_kernel(ray_dirs, campos, rot, centers, tan_u, tan_v, nrm, scales,
                    opac, colors, tile_off, tile_ids, tiles_x, tile_size,
                    bg, near, far, cutoff_sq,
                    a_color, a_disp, a_normal, a_alpha,
                    g_center, g_u, g_v, g_n, g_scale, g_opac, g_color):
    """Fused forward recompute + analytic adjoint accumulation, serial."""
    height, width = ray_dirs.shape[0], ray_dirs.shape[1]
    ntiles = tile_off.shape[0] - 1
    for t in range(ntiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        y0 = ty * tile_size
        x0 = tx * tile_size
        y1 = min(y0 + tile_size, height)
        x1 = min(x0 + tile_size, width)
        start = tile_off[t]
        cnt = tile_off[t + 1] - start
        if cnt == 0:
            continue

        taus = np.empty(cnt, dtype=np.float64)
        ws = np.empty(cnt, dtype=np.float64)
        sid = np.empty(cnt, dtype=np.int64)
        dens = np.empty(cnt, dtype=np.float64)
        uus = np.empty(cnt, dtype=np.float64)
        vvs = np.empty(cnt, dtype=np.float64)
        gks = np.empty(cnt, dtype=np.float64)       # Gaussian factor exp(-q/2)
        clamped = np.empty(cnt, dtype=np.uint8)
        tj = np.empty(cnt + 1, dtype=np.float64)    # prefix transmittance

        for py in range(y0, y1):
            for px in range(x0, x1):
                dx = ray_dirs[py, px, 0]
                dy = ray_dirs[py, px, 1]
                dz = ray_dirs[py, px, 2]
                m = 0
                for kk in range(cnt):
                    s = tile_ids[start + kk]
                    den = nrm[s, 0] * dx + nrm[s, 1] * dy + nrm[s, 2] * dz
                    if abs(den) < DEN_EPS:
                        continue
                    num = ((centers[s, 0] - campos[0]) * nrm[s, 0]
                           + (centers[s, 1] - campos[1]) * nrm[s, 1]
                           + (centers[s, 2] - campos[2]) * nrm[s, 2])
                    tau = num / den
                    if tau <= near or tau >= far:
                        continue
                    ex = campos[0] + tau * dx - centers[s, 0]
                    ey = campos[1] + tau * dy - centers[s, 1]
                    ez = campos[2] + tau * dz - centers[s, 2]
                    uu = ex * tan_u[s, 0] + ey * tan_u[s, 1] + ez * tan_u[s, 2]
                    vv = ex * tan_v[s, 0] + ey * tan_v[s, 1] + ez * tan_v[s, 2]
                    ru = uu / scales[s, 0]
                    rv = vv / scales[s, 1]
                    q = ru * ru + rv * rv
                    if q > cutoff_sq:
                        continue
                    gk = math.exp(-0.5 * q)
                    w = opac[s] * gk
                    cl = np.uint8(0)
                    if w > W_MAX:
                        w = W_MAX
                        cl = np.uint8(1)
                    taus[m] = tau
                    ws[m] = w
                    sid[m] = s
                    dens[m] = den
                    uus[m] = uu
                    vvs[m] = vv
                    gks[m] = gk
                    clamped[m] = cl
                    m += 1

                for a in range(1, m):
                    kt = taus[a]
                    kw = ws[a]
                    ki = sid[a]
                    kd = dens[a]
                    ku = uus[a]
                    kv = vvs[a]
                    kg = gks[a]
                    kc = clamped[a]
                    b = a - 1
                    while b >= 0 and (taus[b] > kt or (taus[b] == kt and sid[b] > ki)):
                        taus[b + 1] = taus[b]
                        ws[b + 1] = ws[b]
                        sid[b + 1] = sid[b]
                        dens[b + 1] = dens[b]
                        uus[b + 1] = uus[b]
                        vvs[b + 1] = vvs[b]
                        gks[b + 1] = gks[b]
                        clamped[b + 1] = clamped[b]
                        b -= 1
                    taus[b + 1] = kt
                    ws[b + 1] = kw
                    sid[b + 1] = ki
                    dens[b + 1] = kd
                    uus[b + 1] = ku
                    vvs[b + 1] = kv
                    gks[b + 1] = kg
                    clamped[b + 1] = kc

                # pass 1: transmittance prefix and raw composited normal
                tj[0] = 1.0
                nx = 0.0
                ny = 0.0
                nz = 0.0
                for j in range(m):
                    s = sid[j]
                    flip = 1.0 if dens[j] >= 0.0 else -1.0
                    wt = tj[j] * ws[j]
                    wx = flip * nrm[s, 0]
                    wy = flip * nrm[s, 1]
                    wz = flip * nrm[s, 2]
                    nx += wt * (rot[0, 0] * wx + rot[0, 1] * wy + rot[0, 2] * wz)
                    ny += wt * (rot[1, 0] * wx + rot[1, 1] * wy + rot[1, 2] * wz)
                    nz += wt * (rot[2, 0] * wx + rot[2, 1] * wy + rot[2, 2] * wz)
                    tj[j + 1] = tj[j] * (1.0 - ws[j])

                ac0 = a_color[py, px, 0]
                ac1 = a_color[py, px, 1]
                ac2 = a_color[py, px, 2]
                ad = a_disp[py, px]
                aa = a_alpha[py, px]

                # adjoint of the raw (pre-normalization) normal sum
                nlen = math.sqrt(nx * nx + ny * ny + nz * nz)
                an0 = 0.0
                an1 = 0.0
                an2 = 0.0
                if nlen > NORM_EPS:
                    ih = 1.0 / nlen
                    hx = nx * ih
                    hy = ny * ih
                    hz = nz * ih
                    g0 = a_normal[py, px, 0]
                    g1 = a_normal[py, px, 1]
                    g2 = a_normal[py, px, 2]
                    proj = g0 * hx + g1 * hy + g2 * hz
                    an0 = (g0 - proj * hx) * ih
                    an1 = (g1 - proj * hy) * ih
                    an2 = (g2 - proj * hz) * ih

                phi_env = (bg[py, px, 0] * ac0 + bg[py, px, 1] * ac1
                           + bg[py, px, 2] * ac2)
                suffix = tj[m] * (phi_env - aa)

                for j in range(m - 1, -1, -1):
                    s = sid[j]
                    tau = taus[j]
                    w = ws[j]
                    den = dens[j]
                    uu = uus[j]
                    vv = vvs[j]
                    gk = gks[j]
                    flip = 1.0 if den >= 0.0 else -1.0

                    # camera-space flipped normal
                    wx = flip * nrm[s, 0]
                    wy = flip * nrm[s, 1]
                    wz = flip * nrm[s, 2]
                    mc0 = rot[0, 0] * wx + rot[0, 1] * wy + rot[0, 2] * wz
                    mc1 = rot[1, 0] * wx + rot[1, 1] * wy + rot[1, 2] * wz
                    mc2 = rot[2, 0] * wx + rot[2, 1] * wy + rot[2, 2] * wz

                    phi = (colors[s, 0] * ac0 + colors[s, 1] * ac1
                           + colors[s, 2] * ac2 + ad / tau
                           + mc0 * an0 + mc1 * an1 + mc2 * an2)
                    gw = tj[j] * phi - suffix / (1.0 - w)
                    suffix += tj[j] * w * phi
                    wt = tj[j] * w

                    g_color[s, 0] += wt * ac0
                    g_color[s, 1] += wt * ac1
                    g_color[s, 2] += wt * ac2

                    # normal compositing: back to world frame, signed
                    gw0 = rot[0, 0] * an0 + rot[1, 0] * an1 + rot[2, 0] * an2
                    gw1 = rot[0, 1] * an0 + rot[1, 1] * an1 + rot[2, 1] * an2
                    gw2 = rot[0, 2] * an0 + rot[1, 2] * an1 + rot[2, 2] * an2
                    g_n[s, 0] += flip * wt * gw0
                    g_n[s, 1] += flip * wt * gw1
                    g_n[s, 2] += flip * wt * gw2

                    g_tau = -wt * ad / (tau * tau)
                    gu_s = 0.0
                    gv_s = 0.0
                    if clamped[j] == 0:
                        g_opac[s] += gk * gw
                        gq = -0.5 * gk * opac[s] * gw
                        su = scales[s, 0]
                        sv = scales[s, 1]
                        g_scale[s, 0] += gq * (-2.0 * uu * uu / (su * su * su))
                        g_scale[s, 1] += gq * (-2.0 * vv * vv / (sv * sv * sv))
                        gu_s = gq * 2.0 * uu / (su * su)
                        gv_s = gq * 2.0 * vv / (sv * sv)

                    ex = campos[0] + tau * dx - centers[s, 0]
                    ey = campos[1] + tau * dy - centers[s, 1]
                    ez = campos[2] + tau * dz - centers[s, 2]

                    # u = delta . t_u at fixed tau, plus tau dependence below
                    g_u[s, 0] += gu_s * ex
                    g_u[s, 1] += gu_s * ey
                    g_u[s, 2] += gu_s * ez
                    g_v[s, 0] += gv_s * ex
                    g_v[s, 1] += gv_s * ey
                    g_v[s, 2] += gv_s * ez

                    tud = tan_u[s, 0] * dx + tan_u[s, 1] * dy + tan_u[s, 2] * dz
                    tvd = tan_v[s, 0] * dx + tan_v[s, 1] * dy + tan_v[s, 2] * dz
                    g_tau += gu_s * tud + gv_s * tvd

                    g_center[s, 0] += -gu_s * tan_u[s, 0] - gv_s * tan_v[s, 0]
                    g_center[s, 1] += -gu_s * tan_u[s, 1] - gv_s * tan_v[s, 1]
                    g_center[s, 2] += -gu_s * tan_u[s, 2] - gv_s * tan_v[s, 2]

                    # tau = (p - cp) . n / (d . n)
                    g_center[s, 0] += g_tau * nrm[s, 0] / den
                    g_center[s, 1] += g_tau * nrm[s, 1] / den
                    g_center[s, 2] += g_tau * nrm[s, 2] / den
                    g_n[s, 0] += g_tau * (-ex) / den
                    g_n[s, 1] += g_tau * (-ey) / den
                    g_n[s, 2] += g_tau * (-ez) / den


@njit(cache=True, parallel=True)
def mesh_forward_kernel(ray_dirs, campos, rot, va, vb, vc, fnrm,
                        tile_off, tile_ids, tiles_x, tile_size, near, far,
                        out_disp, out_normal, out_alpha):
    """Nearest-hit triangle pass; ties broken by face id for determinism."""
    height, width = ray_dirs.shape[0], ray_dirs.shape[1]
    ntiles = tile_off.shape[0] - 1
    for t in prange(ntiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        y0 = ty * tile_size
        x0 = tx * tile_size
        y1 = min(y0 + tile_size, height)
        x1 = min(x0 + tile_size, width)
        start = tile_off[t]
        cnt = tile_off[t + 1] - start
        for py in range(y0, y1):
            for px in range(x0, x1):
                dx = ray_dirs[py, px, 0]
                dy = ray_dirs[py, px, 1]
                dz = ray_dirs[py, px, 2]
                best = far
                hit = -1
                for kk in range(cnt):
                    f = tile_ids[start + kk]
                    e1x = vb[f, 0] - va[f, 0]
                    e1y = vb[f, 1] - va[f, 1]
                    e1z = vb[f, 2] - va[f, 2]
                    e2x = vc[f, 0] - va[f, 0]
                    e2y = vc[f, 1] - va[f, 1]
                    e2z = vc[f, 2] - va[f, 2]
                    # h = d x e2
                    hx = dy * e2z - dz * e2y
                    hy = dz * e2x - dx * e2z
                    hz = dx * e2y - dy * e2x
                    det = e1x * hx + e1y * hy + e1z * hz
                    if abs(det) < 1e-12:
                        continue
                    inv = 1.0 / det
                    sx = campos[0] - va[f, 0]
                    sy = campos[1] - va[f, 1]
                    sz = campos[2] - va[f, 2]
                    bu = (sx * hx + sy * hy + sz * hz) * inv
                    if bu < 0.0 or bu > 1.0:
                        continue
                    qx = sy * e1z - sz * e1y
                    qy = sz * e1x - sx * e1z
                    qz = sx * e1y - sy * e1x
                    bv = (dx * qx + dy * qy + dz * qz) * inv
                    if bv < 0.0 or bu + bv > 1.0:
                        continue
                    tau = (e2x * qx + e2y * qy + e2z * qz) * inv
                    if tau <= near or tau >= best:
                        continue
                    best = tau
                    hit = f
                if hit >= 0:
                    den = fnrm[hit, 0] * dx + fnrm[hit, 1] * dy + fnrm[hit, 2] * dz
                    flip = 1.0 if den >= 0.0 else -1.0
                    wx = flip * fnrm[hit, 0]
                    wy = flip * fnrm[hit, 1]
                    wz = flip * fnrm[hit, 2]
                    out_normal[py, px, 0] = rot[0, 0] * wx + rot[0, 1] * wy + rot[0, 2] * wz
                    out_normal[py, px, 1] = rot[1, 0] * wx + rot[1, 1] * wy + rot[1, 2] * wz
                    out_normal[py, px, 2] = rot[2, 0] * wx + rot[2, 1] * wy + rot[2, 2] * wz
                    out_disp[py, px] = 1.0 / best
                    out_alpha[py, px] = 1.0
