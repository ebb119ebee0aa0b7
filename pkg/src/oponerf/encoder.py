"""Cost-volume geometry encoder producing the paired feature/adaptiveness volumes.

Sampling (bilinear warps, neighbour smoothing, trilinear lookups) is expressed
as constant sparse operators applied with :func:`sparse_matmul`, so gradients
reach the feature tables without scatter loops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .camera import Camera, apply_homography, homography
from .nn import MLP, Module
from .tensor import ShapeError, Tensor, concat, op_forward, register_op, sparse_matmul


@dataclass
class EncoderConfig:
    grid_x: int = 32
    grid_y: int = 32
    grid_z: int = 8
    channels: int = 16
    n_layers: int = 4
    hidden: int = 16
    cost_stats: str = "var"  # "var" or "mean_var"


class GeometryEncoder(Module):
    """T(.) per-pixel patch MLP and B(.) per-voxel MLP."""

    def __init__(self, rng: np.random.Generator, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        c_in = cfg.channels * (2 if cfg.cost_stats == "mean_var" else 1)
        self.tnet = MLP(rng, [27, cfg.hidden, cfg.channels])
        self.bnet = MLP(rng, [c_in, cfg.hidden, cfg.channels + cfg.n_layers], last_gain=1.0)


@dataclass
class VolumeGrid:
    """Reference-frustum grid: pixel-aligned columns times depth planes."""

    camera: Camera
    nx: int
    ny: int
    depths: np.ndarray

    @property
    def nz(self) -> int:
        return len(self.depths)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny * self.nz

    def node_pixels(self) -> tuple[np.ndarray, np.ndarray]:
        """Continuous reference-view pixel coordinates of every (i, j) column."""
        u = (np.arange(self.nx) + 0.5) * self.camera.width / self.nx
        v = (np.arange(self.ny) + 0.5) * self.camera.height / self.ny
        return u, v

    def world_to_grid(self, points: np.ndarray) -> np.ndarray:
        u, v, z = self.camera.project(points)
        gi = u * self.nx / self.camera.width - 0.5
        gj = v * self.ny / self.camera.height - 0.5
        z0, z1 = self.depths[0], self.depths[-1]
        gk = (z - z0) / (z1 - z0) * (self.nz - 1)
        return np.stack([gi, gj, gk], axis=-1)

    def grid_to_world(self, g: np.ndarray) -> np.ndarray:
        g = np.atleast_2d(np.asarray(g, dtype=np.float64))
        u = (g[:, 0] + 0.5) * self.camera.width / self.nx
        v = (g[:, 1] + 0.5) * self.camera.height / self.ny
        z = self.depths[0] + g[:, 2] / (self.nz - 1) * (self.depths[-1] - self.depths[0])
        pc = np.stack([u, v, np.ones_like(u)], axis=-1) @ np.linalg.inv(self.camera.K).T * z[:, None]
        return (pc - self.camera.t) @ self.camera.R


@dataclass
class SceneVolumes:
    F: Tensor  # (X, Y, Z, C)
    A: Tensor  # (X, Y, Z, L)
    grid: VolumeGrid

    def __post_init__(self):
        if self.F.shape[:3] != self.A.shape[:3]:
            raise ValueError("F and A must share spatial extents")


def make_grid(camera: Camera, cfg: EncoderConfig) -> VolumeGrid:
    return VolumeGrid(camera, cfg.grid_x, cfg.grid_y, np.linspace(camera.near, camera.far, cfg.grid_z))


# ---------------------------------------------------------------------------
# 2D features
# ---------------------------------------------------------------------------


def image_patches(image: np.ndarray) -> np.ndarray:
    """3x3 reflect-padded RGB neighbourhoods, shape (H*W, 27)."""
    image = np.asarray(image, dtype=np.float64)
    h, w, _ = image.shape
    padded = np.pad(image, ((1, 1), (1, 1), (0, 0)), mode="reflect")
    cols = [padded[dy : dy + h, dx : dx + w] for dy in range(3) for dx in range(3)]
    return np.concatenate(cols, axis=-1).reshape(h * w, 27)


def extract_2d_features(image, tnet: MLP) -> Tensor:
    data = image.data if isinstance(image, Tensor) else np.asarray(getattr(image, "data", image))
    h, w, _ = data.shape
    if h < 3 or w < 3:
        raise ValueError("image must be at least 3x3")
    return tnet(Tensor(image_patches(data))).reshape(h, w, -1)


# ---------------------------------------------------------------------------
# Warping
# ---------------------------------------------------------------------------


def bilinear_operator(src_h: int, src_w: int, x: np.ndarray, y: np.ndarray) -> tuple[sp.csr_matrix, np.ndarray]:
    """Sparse (P, src_h*src_w) bilinear sampler at continuous pixel coords.

    Pixel centers sit at ``i + 0.5``; samples outside the span of pixel
    centers are invalid and produce all-zero rows.
    """
    xi = np.asarray(x, dtype=np.float64).reshape(-1) - 0.5
    yi = np.asarray(y, dtype=np.float64).reshape(-1) - 0.5
    tol = 1e-9
    valid = np.isfinite(xi) & np.isfinite(yi) & (xi >= -tol) & (xi <= src_w - 1 + tol) & (yi >= -tol) & (yi <= src_h - 1 + tol)
    xi = np.clip(np.where(valid, xi, 0.0), 0, src_w - 1)
    yi = np.clip(np.where(valid, yi, 0.0), 0, src_h - 1)
    x0 = np.minimum(np.floor(xi).astype(int), max(src_w - 2, 0))
    y0 = np.minimum(np.floor(yi).astype(int), max(src_h - 2, 0))
    fx = xi - x0
    fy = yi - y0
    x1 = np.minimum(x0 + 1, src_w - 1)
    y1 = np.minimum(y0 + 1, src_h - 1)
    rows = np.repeat(np.arange(len(xi)), 4)
    cols = np.stack([y0 * src_w + x0, y0 * src_w + x1, y1 * src_w + x0, y1 * src_w + x1], axis=1).reshape(-1)
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    wts = (wts * valid[:, None]).reshape(-1)
    op = sp.csr_matrix((wts, (rows, cols)), shape=(len(xi), src_h * src_w))
    return op, valid


def warp_features(F_k: Tensor, H: np.ndarray, out_hw: tuple[int, int] | None = None, pixels=None):
    """Sample F_k at H @ [u, v, 1] for every output pixel.

    Returns the warped (h, w, C) tensor and a boolean validity map.
    ``pixels`` overrides the output sample positions with explicit continuous
    coordinates (u, v), each of shape (h, w).
    """
    if abs(np.linalg.det(H)) < 1e-15:
        raise ValueError("homography is singular")
    src_h, src_w, c = F_k.shape
    if pixels is None:
        h, w = out_hw or (src_h, src_w)
        vv, uu = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    else:
        uu, vv = pixels
        h, w = uu.shape
    x, y = apply_homography(H, uu.reshape(-1), vv.reshape(-1))
    op, valid = bilinear_operator(src_h, src_w, x, y)
    out = sparse_matmul(op, F_k.reshape(src_h * src_w, c))
    return out.reshape(h, w, c), valid.reshape(h, w)


@register_op("masked_variance")
def _masked_variance(stack, masks, with_mean=False):
    m = masks.astype(np.float64)[..., None]  # (K, P, 1)
    count = m.sum(axis=0)
    inv = 1.0 / np.maximum(count, 1.0)
    keep = (count >= 2) * inv
    # running mean: identical valid samples reproduce the sample exactly,
    # so their deviations (and the variance) are exactly zero
    mean = np.zeros(stack.shape[1:])
    seen = np.zeros_like(count)
    for k in range(stack.shape[0]):
        seen = seen + m[k]
        mean = mean + m[k] * (stack[k] - mean) / np.maximum(seen, 1.0)
    dev = (stack - mean) * m
    var = (dev * dev).sum(axis=0) * keep
    c = stack.shape[-1]

    def bwd(g):
        g_var = g[..., c:] if with_mean else g
        grad = 2.0 * dev * (g_var * keep)
        if with_mean:
            grad = grad + m * (g[..., :c] * inv * (count >= 1))
        return (grad,)

    if with_mean:
        return np.concatenate([mean * (count >= 1), var], axis=-1), bwd
    return var, bwd


def masked_variance(stack: Tensor, masks: np.ndarray, with_mean: bool = False) -> Tensor:
    """Per-position population variance over the leading (view) axis of ``stack``.

    ``masks`` (K, P) flags valid samples; fewer than two valid views give zero.
    ``with_mean`` prepends the masked mean as extra channels.
    """
    masks = np.asarray(masks, dtype=bool)
    if stack.shape[0] < 2:
        raise ValueError("cost volume needs at least two views")
    if masks.shape != stack.shape[:-1]:
        raise ShapeError(f"masks {masks.shape} do not match features {stack.shape}")
    return op_forward("masked_variance", (stack,), {"masks": masks, "with_mean": with_mean})


def cost_volume(warped: list[Tensor], valid: list[np.ndarray], with_mean: bool = False) -> Tensor:
    """Variance across the warped views (each (..., C) with a validity map (...))."""
    if len(warped) < 2:
        raise ValueError("cost volume needs at least two views")
    shape = warped[0].shape
    stack = concat([w.reshape(1, -1, shape[-1]) for w in warped], axis=0)
    masks = np.stack([np.asarray(v, dtype=bool).reshape(-1) for v in valid])
    out = masked_variance(stack, masks, with_mean)
    return out.reshape(*shape[:-1], out.shape[-1])


# ---------------------------------------------------------------------------
# Full encoder
# ---------------------------------------------------------------------------


def smoothing_operator(nx: int, ny: int, nz: int) -> sp.csr_matrix:
    """Average of each cell with its in-bounds 6-neighbours."""
    idx = np.arange(nx * ny * nz).reshape(nx, ny, nz)
    rows = [idx.reshape(-1)]
    cols = [idx.reshape(-1)]
    for axis in range(3):
        for shift in (-1, 1):
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            if shift == 1:
                src[axis], dst[axis] = slice(1, None), slice(None, -1)
            else:
                src[axis], dst[axis] = slice(None, -1), slice(1, None)
            rows.append(idx[tuple(dst)].reshape(-1))
            cols.append(idx[tuple(src)].reshape(-1))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    counts = np.bincount(rows, minlength=idx.size).astype(np.float64)
    return sp.csr_matrix((1.0 / counts[rows], (rows, cols)), shape=(idx.size, idx.size))


class WarpCache:
    """Per-rig sparse warps from each support view onto the reference grid."""

    def __init__(self, cameras: list[Camera], grid: VolumeGrid):
        u, v = grid.node_pixels()
        uu, vv = np.meshgrid(u, v, indexing="ij")  # (X, Y)
        self.ops = []
        self.valid = []
        for cam in cameras:
            ops, masks = [], []
            for z in grid.depths:
                H = homography(cam, grid.camera, float(z))
                x, y = apply_homography(H, uu.reshape(-1), vv.reshape(-1))
                op, ok = bilinear_operator(cam.height, cam.width, x, y)
                ops.append(op)
                masks.append(ok)
            # rows ordered (z, i, j) -> reorder to (i, j, z)
            stacked = sp.vstack(ops).tocsr()
            order = np.arange(grid.n_cells).reshape(grid.nz, grid.nx, grid.ny).transpose(1, 2, 0).reshape(-1)
            self.ops.append(stacked[order])
            self.valid.append(np.concatenate(masks)[order])
        self.block = sp.block_diag(self.ops, format="csr")
        self.masks = np.stack(self.valid)
        self.smooth = smoothing_operator(grid.nx, grid.ny, grid.nz)


def encode_scene(
    images: list,
    cameras: list[Camera],
    encoder: GeometryEncoder,
    grid: VolumeGrid | None = None,
    cache: WarpCache | None = None,
) -> SceneVolumes:
    """Support views (first = reference) to the paired volumes (F, A)."""
    cfg = encoder.cfg
    arrays = [np.asarray(getattr(im, "data", im), dtype=np.float64) for im in images]
    if len(arrays) != len(cameras):
        raise ValueError("need one camera per support image")
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"support images differ in size: {sorted(shapes)}")
    grid = grid or make_grid(cameras[0], cfg)
    cache = cache or WarpCache(cameras, grid)
    h, w, _ = arrays[0].shape
    patches = np.concatenate([image_patches(a) for a in arrays])
    feats = encoder.tnet(Tensor(patches))  # (K*H*W, C), one shared T-net pass
    warped = sparse_matmul(cache.block, feats).reshape(len(arrays), grid.n_cells, cfg.channels)
    cost = masked_variance(warped, cache.masks, with_mean=cfg.cost_stats == "mean_var")
    out = encoder.bnet(cost)
    C = cfg.channels
    F = sparse_matmul(cache.smooth, out[:, :C])
    A = out[:, C:]
    shape = (grid.nx, grid.ny, grid.nz)
    return SceneVolumes(F.reshape(*shape, C), A.reshape(*shape, cfg.n_layers), grid)


def trilinear_operator(grid: VolumeGrid, points: np.ndarray) -> tuple[sp.csr_matrix, np.ndarray]:
    g = grid.world_to_grid(np.atleast_2d(points))
    dims = np.array([grid.nx, grid.ny, grid.nz])
    tol = 1e-9
    inside = np.all(np.isfinite(g), axis=1) & np.all((g >= -tol) & (g <= dims - 1 + tol), axis=1)
    g = np.clip(np.where(inside[:, None], g, 0.0), 0, dims - 1)
    base = np.minimum(np.floor(g).astype(int), np.maximum(dims - 2, 0))
    frac = g - base
    rows, cols, wts = [], [], []
    n = len(g)
    for corner in range(8):
        off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        idx = np.minimum(base + off, dims - 1)
        w = np.prod(np.where(off == 1, frac, 1.0 - frac), axis=1) * inside
        rows.append(np.arange(n))
        cols.append((idx[:, 0] * grid.ny + idx[:, 1]) * grid.nz + idx[:, 2])
        wts.append(w)
    op = sp.csr_matrix(
        (np.concatenate(wts), (np.concatenate(rows), np.concatenate(cols))), shape=(n, grid.n_cells)
    )
    return op, ~inside


def interpolate(volume: Tensor, grid: VolumeGrid, points: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Trilinear lookup of ``volume`` at world points; zero + flag outside the grid."""
    op, outside = trilinear_operator(grid, points)
    ch = volume.shape[-1]
    return sparse_matmul(op, volume.reshape(grid.n_cells, ch)), outside
