"""End-to-end model: encoder -> candidate decoders -> point representation -> renderer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import pcd, prob
from .camera import Camera, all_pixels, rays_for_pixels, sample_depths
from .config import Config
from .encoder import EncoderConfig, GeometryEncoder, SceneVolumes, VolumeGrid, WarpCache, encode_scene, interpolate, make_grid
from .nn import Module
from .pcd import LayerBank, PCDConfig
from .prob import ProbConfig, ProbHeads
from .renderer import Personalized, RayTransformer, ray_transformer_forward, segment_lengths, volume_render
from .scene import Image
from .tensor import Tensor

N_TARGET_LAYERS = 4


class OPONeRF(Module):
    def __init__(self, cfg: Config, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.encoder = GeometryEncoder(
            rng,
            EncoderConfig(cfg.grid_x, cfg.grid_y, cfg.grid_z, cfg.channels, N_TARGET_LAYERS, cost_stats=cfg.cost_stats),
        )
        self.transformer = RayTransformer(rng, cfg.width, cfg.channels, cfg.pe_x, cfg.pe_d)
        self.bank = LayerBank(rng, PCDConfig(cfg.channels, cfg.rank), self.transformer.target_shapes)
        self.heads = ProbHeads(rng, ProbConfig(cfg.channels, cfg.latent, N_TARGET_LAYERS))


@dataclass
class RigContext:
    """Support cameras with their precomputed warps onto the reference grid."""

    cameras: list[Camera]
    grid: VolumeGrid
    cache: WarpCache

    @classmethod
    def build(cls, model: OPONeRF, cameras: list[Camera]) -> "RigContext":
        grid = make_grid(cameras[0], model.encoder.cfg)
        return cls(list(cameras), grid, WarpCache(cameras, grid))


def encode(model: OPONeRF, images, ctx: RigContext, feature_noise: float = 0.0, noise_seed=None) -> SceneVolumes:
    vols = encode_scene(images, ctx.cameras, model.encoder, ctx.grid, ctx.cache)
    if feature_noise > 0:
        rng = noise_seed if isinstance(noise_seed, np.random.Generator) else np.random.default_rng(noise_seed)
        vols = SceneVolumes(vols.F + rng.standard_normal(vols.F.shape) * feature_noise, vols.A, vols.grid)
    return vols


@dataclass
class RayBatchOutput:
    rgb: Tensor  # (R, 3)
    color: Tensor  # (R, N, 3)
    sigma: Tensor  # (R, N)
    weights: Tensor  # (R, N)
    residual: Tensor  # (R,)
    a_grid: Tensor  # (R, N, L) interpolated adaptiveness
    adapt: Tensor  # (R, N, L) fused factor actually applied
    l_appr: Tensor
    l_rec: Tensor


def layer_candidates(model: OPONeRF, vols: SceneVolumes, frozen_mask: bool = False) -> list[Tensor]:
    g = pcd.pool_scene(vols.F)
    return [pcd.candidate_params(model.bank, g, l, model.cfg.mask_mode, frozen_mask) for l in range(len(model.bank))]


def render_rays(
    model: OPONeRF,
    vols: SceneVolumes,
    origins: np.ndarray,
    dirs: np.ndarray,
    near: float,
    far: float,
    background,
    depth_rng: np.random.Generator | None = None,
    eps: np.ndarray | None = None,
    candidates: list[Tensor] | None = None,
    frozen_mask: bool = False,
) -> RayBatchOutput:
    """Full forward for a batch of rays.

    ``depth_rng`` enables stratified depth jitter (training); ``eps`` is the
    (R*N, C) reparameterization noise, zero when omitted (inference).
    """
    cfg = model.cfg
    R = len(origins)
    N = cfg.samples
    t = sample_depths(near, far, N, stratified=depth_rng is not None, seed=depth_rng, n_rays=R)
    x = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    d = np.broadcast_to(dirs[:, None, :], x.shape)
    pts = x.reshape(-1, 3)
    f_x, _ = interpolate(vols.F, vols.grid, pts)
    a_x, _ = interpolate(vols.A, vols.grid, pts)

    zero = Tensor(np.zeros(()))
    if cfg.probabilistic:
        f_inv = prob.invariant_head(model.heads, f_x) if cfg.use_invariance else None
        mu = model.heads.mu_head(f_x)
        log_sigma = model.heads.logsigma_head(f_x)
        sigma_v = log_sigma.exp()
        noise = np.zeros(mu.shape) if eps is None else eps
        f_var = mu + sigma_v * noise
        F_x = prob.fuse_point(f_x, f_inv, f_var, cfg.alpha, residual=cfg.residual)
        l_appr = prob.kl_loss_from_log(mu, log_sigma)
        l_rec = prob.rec_loss(model.heads, f_x, F_x)
    else:
        F_x, l_appr, l_rec = f_x, zero, zero

    P = R * N
    if cfg.adaptive_mode == "ones":
        adapt = Tensor(np.ones((P, N_TARGET_LAYERS)))
    elif cfg.adaptive_mode == "zeros":
        adapt = Tensor(np.zeros((P, N_TARGET_LAYERS)))
    else:
        adapt = prob.adaptiveness(model.heads, a_x, F_x, direct=cfg.adaptive_mode == "direct")

    if candidates is None:
        candidates = layer_candidates(model, vols, frozen_mask)
    weights = []
    for l, W_a in enumerate(candidates):
        personal = model.bank.layer(l).personal
        if cfg.adaptive_mode == "ones":
            weights.append(personal)
        elif cfg.adaptive_mode == "zeros":
            weights.append(W_a)
        else:
            weights.append(Personalized(W_a, personal, adapt[:, l]))

    color, sigma = ray_transformer_forward(model.transformer, x, d, F_x, weights)
    delta = segment_lengths(t, far)
    rgb, w, resid = volume_render(color, sigma, delta, background)
    L = N_TARGET_LAYERS
    return RayBatchOutput(rgb, color, sigma, w, resid, a_x.reshape(R, N, L), adapt.reshape(R, N, L), l_appr, l_rec)


def render_view(
    model: OPONeRF,
    images,
    ctx: RigContext,
    camera: Camera,
    background,
    chunk: int = 768,
    feature_noise: float = 0.0,
    noise_seed=None,
    vols: SceneVolumes | None = None,
) -> Image:
    """Inference render of a full view (posterior-mean features, bin-midpoint depths)."""
    if vols is None:
        vols = encode(model, images, ctx, feature_noise, noise_seed)
    candidates = layer_candidates(model, vols)
    us, vs = all_pixels(camera)
    o, d = rays_for_pixels(camera, us, vs)
    out = np.empty((len(us), 3))
    for s in range(0, len(us), chunk):
        res = render_rays(model, vols, o[s : s + chunk], d[s : s + chunk], camera.near, camera.far, background, candidates=candidates)
        out[s : s + chunk] = res.rgb.data
    return Image(out.reshape(camera.height, camera.width, 3))
