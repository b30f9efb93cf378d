"""Closed-form direct (Lambertian, distant-light) renderer and its inverses.

Per pixel ``p`` and channel ``k``::

    out[p, k] = A[p, k] * sum_i w_i * max(0, n_p . d_i) * L[i, k]

with ``w_i = 1`` for ``weighting="literal_sum"`` (the default) and the cell
solid angle for ``weighting="solid_angle"``. Normals are renormalised before
the dot product. Masked pixels render to zero.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import nnls

from invrender import kernels
from invrender.errors import ShapeError, ValidationError
from invrender.grid import EnvironmentMap, direction_grid

UNIT_TOL = 1e-3
WEIGHTINGS = ("literal_sum", "solid_angle")


def _as_env(env):
    if isinstance(env, EnvironmentMap):
        return env
    return EnvironmentMap(np.asarray(env))


def _check_maps(albedo, normal, mask):
    albedo = np.asarray(albedo, dtype=np.float64)
    normal = np.asarray(normal, dtype=np.float64)
    if albedo.ndim != 3 or albedo.shape[2] != 3:
        raise ShapeError(f"albedo must be (H, W, 3), got {albedo.shape}")
    if normal.shape != albedo.shape:
        raise ShapeError(f"normal shape {normal.shape} does not match albedo {albedo.shape}")
    if mask is None:
        mask = np.ones(albedo.shape[:2], dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != albedo.shape[:2]:
            raise ShapeError(f"mask shape {mask.shape} does not match maps {albedo.shape[:2]}")
    norms = np.linalg.norm(normal[mask], axis=-1)
    if norms.size and np.max(np.abs(norms - 1.0)) > UNIT_TOL:
        raise ValidationError(
            f"normals deviate from unit length by up to {np.max(np.abs(norms - 1.0)):.3g}"
        )
    return albedo, normal, mask


def shade_direct(albedo, normal, env, weighting="literal_sum", mask=None):
    """Render ``(H, W, 3)`` direct illumination from albedo, normals and an env map."""
    if weighting not in WEIGHTINGS:
        raise ValidationError(f"unknown weighting {weighting!r}")
    albedo, normal, mask = _check_maps(albedo, normal, mask)
    env = _as_env(env)
    h, w, _ = albedo.shape
    out = kernels.shade_forward(
        albedo.reshape(-1, 3),
        normal.reshape(-1, 3),
        mask.reshape(-1),
        env.grid.flat_directions(),
        env.weighted_flat(weighting),
    )
    return out.reshape(h, w, 3)


def shade_direct_vjp(albedo, normal, env, grad_out, weighting="literal_sum", mask=None):
    """Gradients of ``sum(grad_out * shade_direct(...))``.

    Returns ``(d_albedo, d_normal, d_radiance)`` shaped like the inputs; the
    normal gradient accounts for the internal renormalisation.
    """
    albedo, normal, mask = _check_maps(albedo, normal, mask)
    env = _as_env(env)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != albedo.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match {albedo.shape}")
    weights = env.grid.weights(weighting)
    g_a, g_n, g_wl = kernels.shade_backward(
        albedo.reshape(-1, 3),
        normal.reshape(-1, 3),
        mask.reshape(-1),
        env.grid.flat_directions(),
        env.weighted_flat(weighting),
        grad_out.reshape(-1, 3),
    )
    g_rad = (g_wl * weights[:, None]).reshape(env.shape)
    return g_a.reshape(albedo.shape), g_n.reshape(normal.shape), g_rad


# --------------------------------------------------------------------------
# torch path used inside training graphs

_TORCH_BLOCK = 1 << 19  # elements per (B, chunk, K) cosine block; cache-sized is fastest


def _grid_tensors(rows, cols, weighting, dtype, device):
    grid = direction_grid(rows, cols)
    dirs = torch.tensor(grid.flat_directions(), dtype=dtype, device=device)
    w = torch.tensor(grid.weights(weighting), dtype=dtype, device=device)
    return dirs, w


def shade_direct_torch(albedo, normal, env, weighting="literal_sum", mask=None):
    """Batched differentiable renderer.

    ``albedo``/``normal`` are ``(B, 3, H, W)``, ``env`` is ``(B, 3, R, C)`` and
    ``mask`` (optional) is ``(B, 1, H, W)``. Returns ``(B, 3, H, W)``.
    """
    if weighting not in WEIGHTINGS:
        raise ValidationError(f"unknown weighting {weighting!r}")
    if albedo.shape != normal.shape or albedo.dim() != 4 or albedo.shape[1] != 3:
        raise ShapeError(f"albedo {tuple(albedo.shape)} / normal {tuple(normal.shape)} mismatch")
    b, _, h, w = albedo.shape
    if env.dim() != 4 or env.shape[0] != b or env.shape[1] != 3:
        raise ShapeError(f"env must be (B, 3, R, C), got {tuple(env.shape)}")
    dirs, cell_w = _grid_tensors(env.shape[2], env.shape[3], weighting, albedo.dtype, albedo.device)
    rad = env.flatten(2).transpose(1, 2) * cell_w[None, :, None]  # (B, K, 3)
    n = F.normalize(normal, dim=1, eps=1e-12).flatten(2).transpose(1, 2)  # (B, P, 3)
    chunk = max(16, _TORCH_BLOCK // (b * dirs.shape[0]))
    pieces = []
    for start in range(0, h * w, chunk):
        cos = torch.relu(n[:, start:start + chunk] @ dirs.T)
        pieces.append(cos @ rad)
    shading = torch.cat(pieces, dim=1).transpose(1, 2).reshape(b, 3, h, w)
    out = albedo * shading
    if mask is not None:
        out = out * mask.to(out.dtype)
    return out


# --------------------------------------------------------------------------
# least-squares environment fit


@dataclass
class EnvFit:
    env: EnvironmentMap
    uncovered: np.ndarray  # (R, C) bool, cells no valid normal sees
    residual: float  # masked mean absolute reconstruction error
    iterations: int


def _nnls_projected_gradient(gram, rhs, iters, tol):
    """Accelerated projected gradient for ``min 0.5 x'Gx - b'x  s.t. x >= 0``."""
    lip = np.linalg.eigvalsh(gram)[-1]
    if lip <= 0:
        return np.zeros_like(rhs), 0
    step = 1.0 / lip
    x = np.zeros_like(rhs)
    y = x.copy()
    t = 1.0
    for it in range(1, iters + 1):
        x_new = np.maximum(y - step * (gram @ y - rhs), 0.0)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        delta = np.max(np.abs(x_new - x))
        x, t = x_new, t_new
        if delta < tol:
            return x, it
    return x, iters


def _nnls_active_set(m, y):
    """Lawson-Hanson on the QR-reduced system; exact up to round-off."""
    q, r = np.linalg.qr(m)
    try:
        x, _ = nnls(r, q.T @ y, maxiter=50 * m.shape[1])
    except RuntimeError:
        return None
    return x


def fit_env_least_squares(
    image,
    albedo,
    normal,
    weighting="literal_sum",
    mask=None,
    rows=18,
    cols=36,
    solver="active_set",
    iters=2000,
    tol=1e-10,
):
    """Nonnegative least-squares environment that best re-renders ``image``.

    Each colour channel is an independent NNLS problem over the env cells.
    Cells outside every valid normal's positive hemisphere have an all-zero
    column; they are pinned to zero (the minimum-norm choice) and reported in
    ``EnvFit.uncovered``.

    ``solver="active_set"`` runs Lawson-Hanson and falls back to projected
    gradient if it fails to terminate; ``solver="projected_gradient"`` runs
    only the accelerated projected-gradient loop (``iters``, ``tol``).
    """
    if solver not in ("active_set", "projected_gradient"):
        raise ValidationError(f"unknown solver {solver!r}")
    albedo, normal, mask = _check_maps(albedo, normal, mask)
    image = np.asarray(image, dtype=np.float64)
    if image.shape != albedo.shape:
        raise ShapeError(f"image shape {image.shape} does not match {albedo.shape}")
    grid = direction_grid(rows, cols)
    n = normal[mask]
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    design = np.maximum(n @ grid.flat_directions().T, 0.0) * grid.weights(weighting)[None, :]
    covered = np.any(design > 0.0, axis=0)
    a = albedo[mask]
    y = image[mask]

    radiance = np.zeros((rows * cols, 3))
    used = 0
    sub = design[:, covered]
    for k in range(3):
        m = sub * a[:, k:k + 1]
        x, it = None, 0
        if solver == "active_set" and m.size:
            x = _nnls_active_set(m, y[:, k])
        if x is None:
            x, it = _nnls_projected_gradient(m.T @ m, m.T @ y[:, k], iters, tol)
        radiance[covered, k] = x
        used = max(used, it)
    env = EnvironmentMap(radiance.reshape(rows, cols, 3))
    recon = shade_direct(albedo, normal, env, weighting, mask)
    residual = float(np.mean(np.abs(recon - image)[mask])) if mask.any() else 0.0
    return EnvFit(env, ~covered.reshape(rows, cols), residual, used)


# --------------------------------------------------------------------------
# diffuse probe


def sphere_normals(resolution):
    """Orthographic unit-sphere normals and disk mask, ``(res, res, 3)``."""
    if resolution < 1:
        raise ValidationError("resolution must be positive")
    c = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    x = np.broadcast_to(c[None, :], (resolution, resolution))
    y = np.broadcast_to(-c[:, None], (resolution, resolution))
    r2 = x * x + y * y
    mask = r2 < 1.0
    z = np.sqrt(np.clip(1.0 - r2, 0.0, None))
    normal = np.stack([x, y, z], axis=-1)
    normal[~mask] = 0.0
    return normal, mask


def render_probe(env, resolution=64, weighting="literal_sum"):
    """Render a unit-albedo diffuse ball under ``env``. Returns ``(image, mask)``."""
    if resolution < 8:
        raise ValidationError(f"probe resolution must be >= 8, got {resolution}")
    normal, mask = sphere_normals(resolution)
    albedo = np.where(mask[..., None], 1.0, 0.0) * np.ones(3)
    return shade_direct(albedo, normal, env, weighting, mask), mask
