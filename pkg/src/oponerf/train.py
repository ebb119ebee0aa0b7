"""Objectives, Adam and the deterministic training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera, all_pixels, rays_for_pixels, training_indices
from .config import Config
from .model import OPONeRF, RigContext, encode, render_rays
from .scene import Image, Scene, render_gt_view
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("iteration", "L_pho", "L_appr", "L_rec", "L_div", "total")


class NonFiniteLoss(FloatingPointError):
    pass


class TrainingAborted(RuntimeError):
    """Raised when a step produces a non-finite loss; carries the last good state."""

    def __init__(self, message: str, model: OPONeRF, curve: list):
        super().__init__(message)
        self.model = model
        self.curve = curve


def photometric_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean over rays of the squared L2 colour error."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} vs target {target.shape}")
    return (pred - target).square().sum() * (1.0 / pred.shape[0])


def _derangement_like(rng: np.random.Generator, n: int) -> np.ndarray:
    # uniform permutation, redrawn while it is the identity
    perm = rng.permutation(n)
    while n > 1 and np.array_equal(perm, np.arange(n)):
        perm = rng.permutation(n)
    return perm


def diversity_loss(a: Tensor, seed, sort_means: bool = False) -> Tensor:
    """Negated mean distance between ray-wise / sample-wise means and shuffled copies.

    ``a`` has shape (R, N, L).  With ``sort_means`` the means are put in
    lexicographic order before shuffling, making the value independent of how
    rays (or samples) are labelled.
    """
    if a.ndim != 3 or a.shape[0] < 2 or a.shape[1] < 2:
        raise ValueError(f"diversity loss needs an (R>=2, N>=2, L) grid, got {a.shape}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    total = None
    for axis in (1, 0):
        means = a.mean(axis=axis)  # axis=1 -> per-ray, axis=0 -> per-sample
        if sort_means:
            order = np.lexsort(means.data.T[::-1])
            means = means[order]
        perm = _derangement_like(rng, means.shape[0])
        term = (means - means[perm]).norm(axis=-1).mean()
        total = term if total is None else total + term
    return -total


def total_loss(l_pho, l_appr, l_rec, l_div, gamma: float = 1.0, diversity_weight: float = 1e-5):
    """L_pho + L_appr + gamma * L_rec + diversity_weight * L_div."""
    for name, part in (("L_pho", l_pho), ("L_appr", l_appr), ("L_rec", l_rec), ("L_div", l_div)):
        value = part.data if isinstance(part, Tensor) else np.asarray(part)
        if not np.all(np.isfinite(value)):
            raise NonFiniteLoss(f"non-finite loss component {name} = {value}")
    if isinstance(l_pho, Tensor):
        return l_pho + l_appr + l_rec * gamma + l_div * diversity_weight
    return l_pho + l_appr + gamma * l_rec + diversity_weight * l_div


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def optimizer_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimState, lr: float,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> dict[str, Tensor]:
    """Adam with bias correction; updates ``params`` in place."""
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"grad for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


# ---------------------------------------------------------------------------
# Data and loop
# ---------------------------------------------------------------------------


def support_order(n_views: int, n_train: int) -> list[int]:
    """Training view indices with the middle one first (it anchors the cost volume)."""
    idx = training_indices(n_views, n_train)
    mid = idx[len(idx) // 2]
    return [mid] + [i for i in idx if i != mid]


@dataclass
class TrainData:
    scene: Scene
    cameras: list[Camera]
    images: list[Image]
    support: list[int]

    @property
    def support_cameras(self) -> list[Camera]:
        return [self.cameras[i] for i in self.support]

    @property
    def support_images(self) -> list[Image]:
        return [self.images[i] for i in self.support]


def make_train_data(cfg: Config, scene: Scene, cameras: list[Camera], images: list[Image] | None = None) -> TrainData:
    if images is None:
        images = [render_gt_view(scene, cam) for cam in cameras]
    return TrainData(scene, cameras, images, support_order(len(cameras), cfg.n_train_views))


@dataclass
class TrainResult:
    model: OPONeRF
    curve: list[tuple]
    ctx: RigContext
    rngs: dict = field(default_factory=dict)


def streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "rays", "depth", "eps", "shuffle")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


def train(cfg: Config, data: TrainData, iterations: int | None = None, callback=None) -> TrainResult:
    """Fit the model on the training views of one static frame."""
    if len(data.support) < 2:
        raise ValueError("need at least 2 training views")
    iterations = cfg.iterations if iterations is None else iterations
    rngs = streams(cfg.seed)
    model = OPONeRF(cfg, rngs["init"])
    ctx = RigContext.build(model, data.support_cameras)
    params = model.parameters()
    state = OptimState()

    origins, dirs, colors = [], [], []
    for i in data.support:
        cam = data.cameras[i]
        us, vs = all_pixels(cam)
        o, d = rays_for_pixels(cam, us, vs)
        origins.append(o)
        dirs.append(d)
        colors.append(data.images[i].data[vs, us])
    origins = np.concatenate(origins)
    dirs = np.concatenate(dirs)
    colors = np.concatenate(colors)
    near, far = data.cameras[0].near, data.cameras[0].far
    bg = data.scene.background

    curve: list[tuple] = []
    for it in range(iterations):
        pick = rngs["rays"].integers(len(origins), size=cfg.batch_rays)
        eps = rngs["eps"].standard_normal((cfg.batch_rays * cfg.samples, cfg.channels))
        with Tape() as tape:
            vols = encode(model, data.support_images, ctx)
            out = render_rays(model, vols, origins[pick], dirs[pick], near, far, bg, depth_rng=rngs["depth"], eps=eps)
            l_pho = photometric_loss(out.rgb, colors[pick])
            l_div = diversity_loss(out.a_grid, rngs["shuffle"])
            try:
                total = total_loss(l_pho, out.l_appr, out.l_rec, l_div, cfg.gamma, cfg.diversity_weight)
            except NonFiniteLoss as exc:
                raise TrainingAborted(f"iteration {it}: {exc}", model, curve) from exc
            if not math.isfinite(float(total.data)):
                raise TrainingAborted(f"iteration {it}: non-finite total loss", model, curve)
            tape.backward(total)
        grads = {}
        for name, p in params.items():
            grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.grad = None
        optimizer_step(params, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        row = (it, float(l_pho.data), float(out.l_appr.data), float(out.l_rec.data), float(l_div.data), float(total.data))
        if it % cfg.log_every == 0 or it == iterations - 1:
            curve.append(row)
            log.info("iter %d  pho %.5f  appr %.5f  rec %.5f  div %.4f  total %.5f", *row)
        if callback is not None:
            callback(it, row, model)
    return TrainResult(model, curve, ctx, rngs)
