"""Hot numeric kernels with a numba loop path and a numpy path.

Arrays are flattened to pixel lists: ``albedo``/``normal`` are ``(P, 3)``,
``mask`` is ``(P,)`` bool, ``dirs`` is ``(K, 3)`` and ``radiance`` is the
already-weighted ``(K, 3)`` environment (cell weight folded in). Public
wrappers dispatch on :func:`invrender._accel.backend`.
"""

import numpy as np

from invrender._accel import backend, njit

NORM_EPS = 1e-12


# --------------------------------------------------------------------------
# direct shading


@njit
def _shade_forward_nb(albedo, normal, mask, dirs, radiance):
    n_pix = albedo.shape[0]
    n_dir = dirs.shape[0]
    out = np.zeros((n_pix, 3))
    for p in range(n_pix):
        if not mask[p]:
            continue
        nx, ny, nz = normal[p, 0], normal[p, 1], normal[p, 2]
        norm = np.sqrt(nx * nx + ny * ny + nz * nz)
        if norm < NORM_EPS:
            continue
        nx /= norm
        ny /= norm
        nz /= norm
        s0 = 0.0
        s1 = 0.0
        s2 = 0.0
        for i in range(n_dir):
            c = nx * dirs[i, 0] + ny * dirs[i, 1] + nz * dirs[i, 2]
            if c > 0.0:
                s0 += c * radiance[i, 0]
                s1 += c * radiance[i, 1]
                s2 += c * radiance[i, 2]
        out[p, 0] = albedo[p, 0] * s0
        out[p, 1] = albedo[p, 1] * s1
        out[p, 2] = albedo[p, 2] * s2
    return out


def _unit_rows(normal):
    norm = np.linalg.norm(normal, axis=1, keepdims=True)
    return normal / np.maximum(norm, NORM_EPS), norm


def _shade_forward_np(albedo, normal, mask, dirs, radiance):
    unit, norm = _unit_rows(normal)
    valid = mask & (norm[:, 0] >= NORM_EPS)
    cos = np.maximum(unit[valid] @ dirs.T, 0.0)
    out = np.zeros((albedo.shape[0], 3))
    out[valid] = albedo[valid] * (cos @ radiance)
    return out


def shade_forward(albedo, normal, mask, dirs, radiance):
    args = (
        np.ascontiguousarray(albedo, dtype=np.float64),
        np.ascontiguousarray(normal, dtype=np.float64),
        np.ascontiguousarray(mask, dtype=np.bool_),
        np.ascontiguousarray(dirs, dtype=np.float64),
        np.ascontiguousarray(radiance, dtype=np.float64),
    )
    if backend() == "numba":
        return _shade_forward_nb(*args)
    return _shade_forward_np(*args)


@njit
def _shade_backward_nb(albedo, normal, mask, dirs, radiance, grad_out):
    n_pix = albedo.shape[0]
    n_dir = dirs.shape[0]
    g_albedo = np.zeros((n_pix, 3))
    g_normal = np.zeros((n_pix, 3))
    g_radiance = np.zeros((n_dir, 3))
    for p in range(n_pix):
        if not mask[p]:
            continue
        mx, my, mz = normal[p, 0], normal[p, 1], normal[p, 2]
        norm = np.sqrt(mx * mx + my * my + mz * mz)
        if norm < NORM_EPS:
            continue
        nx = mx / norm
        ny = my / norm
        nz = mz / norm
        # upstream gradient times albedo, per channel
        ga0 = grad_out[p, 0] * albedo[p, 0]
        ga1 = grad_out[p, 1] * albedo[p, 1]
        ga2 = grad_out[p, 2] * albedo[p, 2]
        s0 = 0.0
        s1 = 0.0
        s2 = 0.0
        gnx = 0.0
        gny = 0.0
        gnz = 0.0
        for i in range(n_dir):
            c = nx * dirs[i, 0] + ny * dirs[i, 1] + nz * dirs[i, 2]
            if c > 0.0:
                s0 += c * radiance[i, 0]
                s1 += c * radiance[i, 1]
                s2 += c * radiance[i, 2]
                g_radiance[i, 0] += ga0 * c
                g_radiance[i, 1] += ga1 * c
                g_radiance[i, 2] += ga2 * c
                t = ga0 * radiance[i, 0] + ga1 * radiance[i, 1] + ga2 * radiance[i, 2]
                gnx += t * dirs[i, 0]
                gny += t * dirs[i, 1]
                gnz += t * dirs[i, 2]
        g_albedo[p, 0] = grad_out[p, 0] * s0
        g_albedo[p, 1] = grad_out[p, 1] * s1
        g_albedo[p, 2] = grad_out[p, 2] * s2
        # back through n = m / |m|
        dot = gnx * nx + gny * ny + gnz * nz
        g_normal[p, 0] = (gnx - dot * nx) / norm
        g_normal[p, 1] = (gny - dot * ny) / norm
        g_normal[p, 2] = (gnz - dot * nz) / norm
    return g_albedo, g_normal, g_radiance


def _shade_backward_np(albedo, normal, mask, dirs, radiance, grad_out):
    unit, norm = _unit_rows(normal)
    valid = mask & (norm[:, 0] >= NORM_EPS)
    n = unit[valid]
    dots = n @ dirs.T
    cos = np.maximum(dots, 0.0)
    lit = (dots > 0.0).astype(np.float64)
    g = grad_out[valid]
    ga = g * albedo[valid]

    g_albedo = np.zeros_like(albedo)
    g_albedo[valid] = g * (cos @ radiance)
    g_radiance = cos.T @ ga
    g_unit = (lit * (ga @ radiance.T)) @ dirs
    dot = np.sum(g_unit * n, axis=1, keepdims=True)
    g_normal = np.zeros_like(normal)
    g_normal[valid] = (g_unit - dot * n) / norm[valid]
    return g_albedo, g_normal, g_radiance


def shade_backward(albedo, normal, mask, dirs, radiance, grad_out):
    """Vector-Jacobian product of :func:`shade_forward`.

    Returns gradients with respect to albedo, the *unnormalised* normal
    input, and the weighted radiance.
    """
    args = (
        np.ascontiguousarray(albedo, dtype=np.float64),
        np.ascontiguousarray(normal, dtype=np.float64),
        np.ascontiguousarray(mask, dtype=np.bool_),
        np.ascontiguousarray(dirs, dtype=np.float64),
        np.ascontiguousarray(radiance, dtype=np.float64),
        np.ascontiguousarray(grad_out, dtype=np.float64),
    )
    if backend() == "numba":
        return _shade_backward_nb(*args)
    return _shade_backward_np(*args)


# --------------------------------------------------------------------------
# square-patch means, used for reflectance-judgment sampling


@njit
def _patch_means_nb(plane, rows, cols, radius):
    h, w = plane.shape
    out = np.empty(rows.shape[0])
    for j in range(rows.shape[0]):
        r0 = max(rows[j] - radius, 0)
        r1 = min(rows[j] + radius, h - 1)
        c0 = max(cols[j] - radius, 0)
        c1 = min(cols[j] + radius, w - 1)
        acc = 0.0
        for r in range(r0, r1 + 1):
            for c in range(c0, c1 + 1):
                acc += plane[r, c]
        out[j] = acc / ((r1 - r0 + 1) * (c1 - c0 + 1))
    return out


def _patch_means_np(plane, rows, cols, radius):
    h, w = plane.shape
    # summed-area table with a zero border
    sat = np.zeros((h + 1, w + 1))
    sat[1:, 1:] = plane.cumsum(0).cumsum(1)
    r0 = np.clip(rows - radius, 0, h - 1)
    r1 = np.clip(rows + radius, 0, h - 1) + 1
    c0 = np.clip(cols - radius, 0, w - 1)
    c1 = np.clip(cols + radius, 0, w - 1) + 1
    total = sat[r1, c1] - sat[r0, c1] - sat[r1, c0] + sat[r0, c0]
    return total / ((r1 - r0) * (c1 - c0))


def patch_means(plane, rows, cols, radius):
    """Mean of ``plane`` over the bounds-clipped square patch around each point."""
    plane = np.ascontiguousarray(plane, dtype=np.float64)
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    cols = np.ascontiguousarray(cols, dtype=np.int64)
    if backend() == "numba":
        return _patch_means_nb(plane, rows, cols, int(radius))
    return _patch_means_np(plane, rows, cols, int(radius))
