"""CPU renderer for axis-aligned box rooms (numba).

One kernel produces every buffer of a scene in a single pass over pixels:
geometry buffers (albedo, normal, depth) from the primary hit, a direct-only
shading buffer with no visibility term (the "flat" shading), and a Monte
Carlo global-illumination shading buffer with area-light next-event
estimation and cosine-weighted diffuse bounces.

Shading is stored with the primary-hit albedo divided out, i.e. the buffers
satisfy image = albedo * shading per pixel. The emitter itself is invisible
to camera and bounce rays; all direct light arrives via next-event
estimation, so nothing is double counted.

Determinism: each pixel's sampler is seeded from (scene seed, pixel index),
so results are bit-identical for a given (seed, spp, bounces) regardless of
traversal order.
"""

from __future__ import annotations

import numpy as np
from numba import njit

U64 = np.uint64
_GOLDEN = U64(0x9E3779B97F4A7C15)
_INV_2_53 = 1.0 / 9007199254740992.0


@njit(cache=True, inline="always")
def _mix64(z):
    z = (z ^ (z >> U64(30))) * U64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> U64(27))) * U64(0x94D049BB133111EB)
    return z ^ (z >> U64(31))


@njit(cache=True, inline="always")
def _seed_state(seed, idx):
    z = seed * _GOLDEN + idx * U64(0xD2B74407B1CE6E93) + U64(1)
    s0 = _mix64(z)
    s1 = _mix64(z + _GOLDEN)
    if s0 == U64(0) and s1 == U64(0):
        s0 = U64(0x9E3779B97F4A7C15)
    return s0, s1


@njit(cache=True, inline="always")
def _uniform(s0, s1):
    # xoroshiro128+
    result = s0 + s1
    s1 = s1 ^ s0
    s0 = ((s0 << U64(55)) | (s0 >> U64(9))) ^ s1 ^ (s1 << U64(14))
    s1 = (s1 << U64(36)) | (s1 >> U64(28))
    return s0, s1, float(result >> U64(11)) * _INV_2_53


@njit(cache=True, inline="always")
def _room_exit(ox, oy, oz, dx, dy, dz, rx, ry, rz):
    """Nearest wall of the room [0,rx]x[0,ry]x[0,rz] from an interior origin.

    Returns (t, face) with faces 0:x=0 1:x=rx 2:y=0 3:y=ry 4:z=0 5:z=rz.
    """
    t = 1e30
    face = -1
    if dx > 1e-12:
        tc = (rx - ox) / dx
        if tc < t:
            t = tc
            face = 1
    elif dx < -1e-12:
        tc = -ox / dx
        if tc < t:
            t = tc
            face = 0
    if dy > 1e-12:
        tc = (ry - oy) / dy
        if tc < t:
            t = tc
            face = 3
    elif dy < -1e-12:
        tc = -oy / dy
        if tc < t:
            t = tc
            face = 2
    if dz > 1e-12:
        tc = (rz - oz) / dz
        if tc < t:
            t = tc
            face = 5
    elif dz < -1e-12:
        tc = -oz / dz
        if tc < t:
            t = tc
            face = 4
    return t, face


@njit(cache=True, inline="always")
def _box_enter(ox, oy, oz, dx, dy, dz, lo0, lo1, lo2, hi0, hi1, hi2, tmax):
    """Entering slab intersection with one box; (t, axis, sign) or t < 0."""
    tmin = 1e-4
    axis = -1
    sgn = 0.0

    if dx > 1e-12 or dx < -1e-12:
        inv = 1.0 / dx
        t0 = (lo0 - ox) * inv
        t1 = (hi0 - ox) * inv
        s = -1.0 if dx > 0.0 else 1.0
        if t0 > t1:
            tmp = t0
            t0 = t1
            t1 = tmp
        if t0 > tmin:
            tmin = t0
            axis = 0
            sgn = s
        if t1 < tmax:
            tmax = t1
        if tmin > tmax:
            return -1.0, -1, 0.0
    elif ox < lo0 or ox > hi0:
        return -1.0, -1, 0.0

    if dy > 1e-12 or dy < -1e-12:
        inv = 1.0 / dy
        t0 = (lo1 - oy) * inv
        t1 = (hi1 - oy) * inv
        s = -1.0 if dy > 0.0 else 1.0
        if t0 > t1:
            tmp = t0
            t0 = t1
            t1 = tmp
        if t0 > tmin:
            tmin = t0
            axis = 1
            sgn = s
        if t1 < tmax:
            tmax = t1
        if tmin > tmax:
            return -1.0, -1, 0.0
    elif oy < lo1 or oy > hi1:
        return -1.0, -1, 0.0

    if dz > 1e-12 or dz < -1e-12:
        inv = 1.0 / dz
        t0 = (lo2 - oz) * inv
        t1 = (hi2 - oz) * inv
        s = -1.0 if dz > 0.0 else 1.0
        if t0 > t1:
            tmp = t0
            t0 = t1
            t1 = tmp
        if t0 > tmin:
            tmin = t0
            axis = 2
            sgn = s
        if t1 < tmax:
            tmax = t1
        if tmin > tmax:
            return -1.0, -1, 0.0
    elif oz < lo2 or oz > hi2:
        return -1.0, -1, 0.0

    if axis == -1:
        # origin inside the box; no entering face
        return -1.0, -1, 0.0
    return tmin, axis, sgn


@njit(cache=True, inline="always")
def _trace(ox, oy, oz, dx, dy, dz, rx, ry, rz, boxes):
    """Nearest surface hit. Returns (t, nx, ny, nz, material index).

    Material indices: 0..5 are room faces (see _room_exit), 6+i is box i.
    The room is closed, so every interior ray hits something.
    """
    t, face = _room_exit(ox, oy, oz, dx, dy, dz, rx, ry, rz)
    nx = 0.0
    ny = 0.0
    nz = 0.0
    if face == 0:
        nx = 1.0
    elif face == 1:
        nx = -1.0
    elif face == 2:
        ny = 1.0
    elif face == 3:
        ny = -1.0
    elif face == 4:
        nz = 1.0
    else:
        nz = -1.0
    mat = face
    for i in range(boxes.shape[0]):
        tb, axis, sgn = _box_enter(ox, oy, oz, dx, dy, dz,
                                   boxes[i, 0], boxes[i, 1], boxes[i, 2],
                                   boxes[i, 3], boxes[i, 4], boxes[i, 5], t)
        if tb > 0.0 and tb < t:
            t = tb
            nx = sgn if axis == 0 else 0.0
            ny = sgn if axis == 1 else 0.0
            nz = sgn if axis == 2 else 0.0
            mat = 6 + i
    return t, nx, ny, nz, mat


@njit(cache=True, inline="always")
def _occluded(ox, oy, oz, dx, dy, dz, dist, boxes):
    """True when any box blocks the segment of length dist (walls cannot)."""
    for i in range(boxes.shape[0]):
        tb, axis, sgn = _box_enter(ox, oy, oz, dx, dy, dz,
                                   boxes[i, 0], boxes[i, 1], boxes[i, 2],
                                   boxes[i, 3], boxes[i, 4], boxes[i, 5],
                                   dist - 1e-3)
        if tb > 0.0:
            return True
    return False


@njit(cache=True, inline="always")
def _albedo_at(mat, px, py, pz, nx, ny, nz, mat_mode, mat_ca, mat_cb, mat_scale):
    """Surface albedo at a hit point: solid color or procedural pattern.

    Pattern coordinates are the two world coordinates orthogonal to the
    dominant normal axis, so patterns are stable in world space.
    """
    mode = mat_mode[mat]
    if mode == 0:
        return mat_ca[mat, 0], mat_ca[mat, 1], mat_ca[mat, 2]
    ax = abs(nx)
    ay = abs(ny)
    az = abs(nz)
    if ax >= ay and ax >= az:
        u = py
        v = pz
    elif ay >= az:
        u = px
        v = pz
    else:
        u = px
        v = py
    s = mat_scale[mat]
    iu = int(np.floor(u / s))
    iv = int(np.floor(v / s))
    if mode == 1:
        pick = (iu + iv) & 1
    else:
        pick = iu & 1
    if pick == 0:
        return mat_ca[mat, 0], mat_ca[mat, 1], mat_ca[mat, 2]
    return mat_cb[mat, 0], mat_cb[mat, 1], mat_cb[mat, 2]


@njit(cache=True)
def render_kernel(room, boxes, mat_mode, mat_ca, mat_cb, mat_scale,
                  light, cam, gl, height, width, spp, bounces, seed):
    """Render all buffers for one scene.

    room: (3,) box extents, the room spans [0, room] per axis
    boxes: (nb, 6) lo/hi corners
    mat_*: per-material pattern mode / colors / scale, room faces then boxes
    light: (8,) cx, cy, cz, half_u, half_v, radiance rgb (rectangle at the
        ceiling facing down)
    cam: (13,) position, forward, right, up, tan(vfov/2)
    gl: (4,) direct-light intensity rgb of the flat shader, ambient level
    Returns (albedo, normal, depth, shading_flat, shading_gi, var_gi); the
    variance buffer holds the per-sample variance of the GI estimate.
    """
    rx = room[0]
    ry = room[1]
    rz = room[2]
    lcx = light[0]
    lcy = light[1]
    lcz = light[2]
    lhu = light[3]
    lhv = light[4]
    lr0 = light[5]
    lr1 = light[6]
    lr2 = light[7]
    area = 4.0 * lhu * lhv
    cpx = cam[0]
    cpy = cam[1]
    cpz = cam[2]
    fx = cam[3]
    fy = cam[4]
    fz = cam[5]
    rgx = cam[6]
    rgy = cam[7]
    rgz = cam[8]
    ux = cam[9]
    uy = cam[10]
    uz = cam[11]
    tan_half = cam[12]
    gi0 = gl[0]
    gi1 = gl[1]
    gi2 = gl[2]
    ambient = gl[3]
    aspect = width / height

    albedo = np.zeros((height, width, 3), np.float32)
    normal = np.zeros((height, width, 3), np.float32)
    depth = np.zeros((height, width, 1), np.float32)
    s_flat = np.zeros((height, width, 3), np.float32)
    s_gi = np.zeros((height, width, 3), np.float32)
    var_gi = np.zeros((height, width, 3), np.float32)

    inv_pi = 1.0 / np.pi

    for py in range(height):
        for px in range(width):
            # primary ray through the pixel center
            sx = ((px + 0.5) / width * 2.0 - 1.0) * tan_half * aspect
            sy = (1.0 - (py + 0.5) / height * 2.0) * tan_half
            dx = fx + sx * rgx + sy * ux
            dy = fy + sx * rgy + sy * uy
            dz = fz + sx * rgz + sy * uz
            dn = np.sqrt(dx * dx + dy * dy + dz * dz)
            dx /= dn
            dy /= dn
            dz /= dn

            t, nx, ny, nz, mat = _trace(cpx, cpy, cpz, dx, dy, dz,
                                        rx, ry, rz, boxes)
            hx = cpx + t * dx
            hy = cpy + t * dy
            hz = cpz + t * dz
            aR, aG, aB = _albedo_at(mat, hx, hy, hz, nx, ny, nz,
                                    mat_mode, mat_ca, mat_cb, mat_scale)

            albedo[py, px, 0] = aR
            albedo[py, px, 1] = aG
            albedo[py, px, 2] = aB
            normal[py, px, 0] = nx
            normal[py, px, 1] = ny
            normal[py, px, 2] = nz
            depth[py, px, 0] = t

            # flat shader: constant-intensity light toward the emitter
            # center, no visibility test, constant ambient floor
            wx = lcx - hx
            wy = lcy - hy
            wz = lcz - hz
            wn = np.sqrt(wx * wx + wy * wy + wz * wz)
            ndl = (nx * wx + ny * wy + nz * wz) / wn
            if ndl < 0.0:
                ndl = 0.0
            s_flat[py, px, 0] = ambient + gi0 * ndl
            s_flat[py, px, 1] = ambient + gi1 * ndl
            s_flat[py, px, 2] = ambient + gi2 * ndl

            # GI estimate: per-pixel sampler, NEE at every path vertex
            ox0 = hx + nx * 1e-4
            oy0 = hy + ny * 1e-4
            oz0 = hz + nz * 1e-4
            s0, s1 = _seed_state(seed, U64(py * width + px))
            m1R = 0.0
            m1G = 0.0
            m1B = 0.0
            m2R = 0.0
            m2G = 0.0
            m2B = 0.0
            for _ in range(spp):
                smpR = 0.0
                smpG = 0.0
                smpB = 0.0
                ox = ox0
                oy = oy0
                oz = oz0
                vnx = nx
                vny = ny
                vnz = nz
                tR = 1.0
                tG = 1.0
                tB = 1.0
                for b in range(bounces):
                    # next-event estimation toward a light sample
                    s0, s1, u1 = _uniform(s0, s1)
                    s0, s1, u2 = _uniform(s0, s1)
                    lx = lcx + (2.0 * u1 - 1.0) * lhu
                    lz = lcz + (2.0 * u2 - 1.0) * lhv
                    wx = lx - ox
                    wy = lcy - oy
                    wz = lz - oz
                    d2 = wx * wx + wy * wy + wz * wz
                    dist = np.sqrt(d2)
                    cosx = (vnx * wx + vny * wy + vnz * wz) / dist
                    cosl = wy / dist  # emitter faces straight down
                    if cosx > 0.0 and cosl > 0.0:
                        if not _occluded(ox, oy, oz, wx / dist, wy / dist,
                                         wz / dist, dist, boxes):
                            g = cosx * cosl * area * inv_pi / d2
                            smpR += tR * lr0 * g
                            smpG += tG * lr1 * g
                            smpB += tB * lr2 * g
                    if b + 1 >= bounces:
                        break
                    # cosine-weighted bounce; throughput picks up the
                    # albedo of the surface the bounce ray lands on
                    s0, s1, r1 = _uniform(s0, s1)
                    s0, s1, r2 = _uniform(s0, s1)
                    st = np.sqrt(r2)
                    phi = 2.0 * np.pi * r1
                    lx_ = np.cos(phi) * st
                    ly_ = np.sin(phi) * st
                    lz_ = np.sqrt(1.0 - r2)
                    # orthonormal basis around the vertex normal
                    if vny > 0.9 or vny < -0.9:
                        tx = 1.0
                        ty = 0.0
                        tz = 0.0
                    else:
                        tx = 0.0
                        ty = 1.0
                        tz = 0.0
                    bx = vny * tz - vnz * ty
                    by = vnz * tx - vnx * tz
                    bz = vnx * ty - vny * tx
                    bn = np.sqrt(bx * bx + by * by + bz * bz)
                    bx /= bn
                    by /= bn
                    bz /= bn
                    cx = vny * bz - vnz * by
                    cy = vnz * bx - vnx * bz
                    cz = vnx * by - vny * bx
                    dxx = lx_ * bx + ly_ * cx + lz_ * vnx
                    dyy = lx_ * by + ly_ * cy + lz_ * vny
                    dzz = lx_ * bz + ly_ * cz + lz_ * vnz
                    t2, n2x, n2y, n2z, mat2 = _trace(ox, oy, oz,
                                                     dxx, dyy, dzz,
                                                     rx, ry, rz, boxes)
                    ox = ox + t2 * dxx
                    oy = oy + t2 * dyy
                    oz = oz + t2 * dzz
                    a2R, a2G, a2B = _albedo_at(mat2, ox, oy, oz,
                                               n2x, n2y, n2z,
                                               mat_mode, mat_ca, mat_cb,
                                               mat_scale)
                    tR *= a2R
                    tG *= a2G
                    tB *= a2B
                    ox += n2x * 1e-4
                    oy += n2y * 1e-4
                    oz += n2z * 1e-4
                    vnx = n2x
                    vny = n2y
                    vnz = n2z
                m1R += smpR
                m1G += smpG
                m1B += smpB
                m2R += smpR * smpR
                m2G += smpG * smpG
                m2B += smpB * smpB
            meanR = m1R / spp
            meanG = m1G / spp
            meanB = m1B / spp
            s_gi[py, px, 0] = meanR
            s_gi[py, px, 1] = meanG
            s_gi[py, px, 2] = meanB
            if spp > 1:
                vR = (m2R - spp * meanR * meanR) / (spp - 1)
                vG = (m2G - spp * meanG * meanG) / (spp - 1)
                vB = (m2B - spp * meanB * meanB) / (spp - 1)
                var_gi[py, px, 0] = vR if vR > 0.0 else 0.0
                var_gi[py, px, 1] = vG if vG > 0.0 else 0.0
                var_gi[py, px, 2] = vB if vB > 0.0 else 0.0

    return albedo, normal, depth, s_flat, s_gi, var_gi
