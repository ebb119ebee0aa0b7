"""Point-wise personalized ray transformer and volume rendering."""

from __future__ import annotations

import numpy as np

from .nn import Linear, Module
from .tensor import ShapeError, Tensor, concat, op_forward, register_op

TARGET_LAYERS = ("query", "key", "value", "feedforward")


def positional_encoding(x: np.ndarray, octaves: int) -> np.ndarray:
    """[x, sin(2^k pi x), cos(2^k pi x)] for k < octaves, along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    parts = [x]
    for k in range(octaves):
        parts.append(np.sin((2.0**k) * np.pi * x))
        parts.append(np.cos((2.0**k) * np.pi * x))
    return np.concatenate(parts, axis=-1)


class RayTransformer(Module):
    """Shared (non-personalized) layers of the renderer."""

    def __init__(self, rng: np.random.Generator, width: int, feat_dim: int, pe_x: int = 4, pe_d: int = 2):
        super().__init__()
        self.width, self.pe_x, self.pe_d = width, pe_x, pe_d
        in_dim = 3 * (1 + 2 * pe_x) + 3 * (1 + 2 * pe_d) + feat_dim
        self.embed = Linear(rng, in_dim, width)
        self.out_proj = Linear(rng, width, width, gain=1.0)
        self.color = Linear(rng, width, 3, gain=1.0)
        self.density = Linear(rng, width, 1, gain=1.0)

    @property
    def target_shapes(self) -> list[tuple[int, int]]:
        return [(self.width, self.width)] * len(TARGET_LAYERS)


def personalize_layer(W_a: Tensor, personal: Tensor, a_l) -> Tensor:
    """Per-point weights (1 - a) * W_a + a * personal.

    ``a_l`` is a scalar or a (P,) vector of adaptiveness values for one layer;
    the vector case returns a (P, c_in, c_out) stack.
    """
    if isinstance(a_l, Tensor):
        a = a_l.reshape(-1, 1, 1)
        return (1.0 - a) * W_a + a * personal
    a = np.asarray(a_l, dtype=np.float64)
    if np.any(a < 0) or np.any(a > 1):
        raise ValueError("adaptiveness must lie in [0, 1]")
    if a.ndim == 0:
        return W_a * (1.0 - float(a)) + personal * float(a)
    a = a.reshape(-1, 1, 1)
    return W_a * (1.0 - a) + personal * a


def apply_personalized(h: Tensor, W: Tensor) -> Tensor:
    """y_p = h_p @ W_p for every point p via one batched product.

    A 2-D ``W`` is shared by all points.
    """
    if W.ndim == 2:
        return h @ W
    if W.ndim != 3 or W.shape[0] != h.shape[0] or W.shape[1] != h.shape[-1]:
        raise ShapeError(f"apply_personalized: points {h.shape} vs weights {W.shape}")
    P, ci = h.shape
    return (h.reshape(P, 1, ci) @ W).reshape(P, W.shape[2])


@register_op("personalized_linear")
def _personalized_linear(h, a, W_a, Z):
    a = a.reshape(-1, 1)
    yA = h @ W_a
    yZ = h @ Z
    out = (1.0 - a) * yA + a * yZ

    def bwd(g):
        gA = (1.0 - a) * g
        gZ = a * g
        gh = gA @ W_a.T + gZ @ Z.T
        ga = (g * (yZ - yA)).sum(axis=1)
        return gh, ga, h.T @ gA, h.T @ gZ

    return out, bwd


def personalized_linear(h: Tensor, a: Tensor, W_a: Tensor, personal: Tensor) -> Tensor:
    """Same result as ``apply_personalized(h, personalize_layer(W_a, personal, a))``
    without materializing one weight matrix per point."""
    if h.ndim != 2 or a.shape != (h.shape[0],) or W_a.shape != personal.shape or W_a.shape[0] != h.shape[1]:
        raise ShapeError(f"personalized_linear: h {h.shape}, a {a.shape}, W {W_a.shape}, Z {personal.shape}")
    return op_forward("personalized_linear", (h, a, W_a, personal))


class Personalized:
    """Per-point layer given by candidate weights, personal code and per-point factor."""

    def __init__(self, W_a: Tensor, personal: Tensor, a: Tensor):
        self.W_a, self.personal, self.a = W_a, personal, a

    def __call__(self, h: Tensor) -> Tensor:
        return personalized_linear(h, self.a, self.W_a, self.personal)


def _apply(h: Tensor, W) -> Tensor:
    return W(h) if isinstance(W, Personalized) else apply_personalized(h, W)


def ray_transformer_forward(
    model: RayTransformer,
    x: np.ndarray,
    d: np.ndarray,
    feats: Tensor,
    weights: list[Tensor],
) -> tuple[Tensor, Tensor]:
    """Radiance (R, N, 3) in (0, 1) and density (R, N) >= 0 for every sample.

    ``x`` and ``d`` are (R, N, 3) sample positions and directions, ``feats``
    the (R*N, C) point features, and ``weights`` the personalized Q, K, V
    and feed-forward layers: shared 2-D matrices, per-point 3-D stacks, or
    :class:`Personalized` factors.
    """
    R, N, _ = x.shape
    if N < 2:
        raise ValueError("need at least two samples per ray")
    P = R * N
    pe = np.concatenate([positional_encoding(x, model.pe_x), positional_encoding(d, model.pe_d)], axis=-1)
    inp = concat([Tensor(pe.reshape(P, -1)), feats], axis=-1)
    h0 = model.embed(inp).relu()
    Wq, Wk, Wv, Wf = weights
    q = _apply(h0, Wq).reshape(R, N, -1)
    k = _apply(h0, Wk).reshape(R, N, -1)
    v = _apply(h0, Wv).reshape(R, N, -1)
    scores = (q @ k.transpose()) * (1.0 / np.sqrt(q.shape[-1]))
    attn = scores.softmax(axis=-1) @ v
    h1 = h0 + model.out_proj(attn.reshape(P, -1))
    h2 = h1 + _apply(h1, Wf).relu()
    color = model.color(h2).sigmoid().reshape(R, N, 3)
    sigma = model.density(h2).softplus().reshape(R, N)
    return color, sigma


def segment_lengths(t: np.ndarray, far: float) -> np.ndarray:
    return np.concatenate([np.diff(t, axis=-1), far - t[..., -1:]], axis=-1)


def _exclusive_cumsum_matrix(n: int) -> np.ndarray:
    return np.triu(np.ones((n, n)), k=1)


def volume_render(color: Tensor, sigma: Tensor, delta: np.ndarray, background) -> tuple[Tensor, Tensor, Tensor]:
    """Alpha-composite samples front to back over a background colour.

    Returns (pixel rgb (R, 3), sample weights (R, N), residual transmittance (R,)).
    """
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(sigma.data < 0) or np.any(delta <= 0):
        raise ValueError("need sigma >= 0 and delta > 0")
    N = delta.shape[-1]
    tau = sigma * delta  # optical depth per segment
    alpha = 1.0 - (-tau).exp()
    trans = (-(tau @ _exclusive_cumsum_matrix(N))).exp()
    weights = trans * alpha
    residual = (-tau.sum(axis=-1)).exp()
    rgb = (color * weights.reshape(*weights.shape, 1)).sum(axis=-2)
    bg = np.asarray(background, dtype=np.float64).reshape(1, 3)
    rgb = rgb + residual.reshape(-1, 1) * bg
    return rgb, weights, residual
