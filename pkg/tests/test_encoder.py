import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oponerf.camera import RigSpec, arc_rig, homography
from oponerf.encoder import (
    EncoderConfig,
    GeometryEncoder,
    VolumeGrid,
    cost_volume,
    encode_scene,
    extract_2d_features,
    image_patches,
    interpolate,
    make_grid,
    masked_variance,
    smoothing_operator,
    warp_features,
)
from oponerf.nn import MLP
from oponerf.scene import generate_scene, render_gt_view
from oponerf.tensor import Tape, Tensor, finite_difference_check


def naive_mlp(mlp, x):
    for i, layer in enumerate(mlp.layers):
        x = x @ layer.weight.data + layer.bias.data
        if i < len(mlp.layers) - 1:
            x = np.maximum(x, 0.0)
    return x


def naive_bilinear(F, x, y):
    """Sample F (H, W, C) at continuous pixel coords with centers at i + 0.5."""
    h, w, c = F.shape
    xi, yi = x - 0.5, y - 0.5
    if not (-1e-9 <= xi <= w - 1 + 1e-9 and -1e-9 <= yi <= h - 1 + 1e-9):
        return np.zeros(c), False
    x0, y0 = min(int(np.floor(xi)), w - 2), min(int(np.floor(yi)), h - 2)
    fx, fy = xi - x0, yi - y0
    out = (
        (1 - fx) * (1 - fy) * F[y0, x0]
        + fx * (1 - fy) * F[y0, x0 + 1]
        + (1 - fx) * fy * F[y0 + 1, x0]
        + fx * fy * F[y0 + 1, x0 + 1]
    )
    return out, True


# -- 2D features --------------------------------------------------------------


def test_constant_image_gives_constant_features():
    tnet = MLP(np.random.default_rng(0), [27, 8, 5])
    F = extract_2d_features(np.full((6, 7, 3), 0.3), tnet).data
    assert np.allclose(F, F[0, 0], rtol=0, atol=1e-15)


def test_feature_locality():
    rng = np.random.default_rng(1)
    tnet = MLP(rng, [27, 8, 5])
    img = rng.random((9, 9, 3))
    other = img.copy()
    other[4, 5] += 0.5
    diff = np.any(extract_2d_features(img, tnet).data != extract_2d_features(other, tnet).data, axis=-1)
    rows, cols = np.nonzero(diff)
    assert rows.min() >= 3 and rows.max() <= 5 and cols.min() >= 4 and cols.max() <= 6


def test_features_match_per_pixel_loop():
    rng = np.random.default_rng(2)
    tnet = MLP(rng, [27, 8, 4])
    for layer in tnet.layers:
        layer.bias.data = rng.standard_normal(layer.bias.shape)
    img = rng.random((5, 6, 3))
    F = extract_2d_features(img, tnet).data
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="reflect")
    for v in range(5):
        for u in range(6):
            patch = np.concatenate([padded[v + dy, u + dx] for dy in range(3) for dx in range(3)])
            assert np.allclose(F[v, u], naive_mlp(tnet, patch), rtol=0, atol=1e-13)


def test_patches_reject_nothing_but_features_need_3x3():
    assert image_patches(np.zeros((3, 3, 3))).shape == (9, 27)
    with pytest.raises(ValueError):
        extract_2d_features(np.zeros((2, 5, 3)), MLP(np.random.default_rng(0), [27, 4]))


# -- warping ------------------------------------------------------------------


def test_identity_warp():
    F = Tensor(np.random.default_rng(3).standard_normal((6, 5, 3)))
    out, valid = warp_features(F, np.eye(3))
    assert np.allclose(out.data, F.data, rtol=0, atol=1e-15)
    assert valid.all()


@pytest.mark.parametrize("dx, dy", [(2, 0), (0, -1), (1, 3), (-2, -2)])
def test_integer_translation_shifts_exactly(dx, dy):
    F = np.random.default_rng(4).standard_normal((8, 9, 2))
    H = np.array([[1.0, 0, dx], [0, 1.0, dy], [0, 0, 1.0]])
    out, valid = warp_features(Tensor(F), H)
    for v in range(8):
        for u in range(9):
            su, sv = u + dx, v + dy
            inside = 0 <= su < 9 and 0 <= sv < 8
            assert valid[v, u] == inside
            if inside:
                assert np.allclose(out.data[v, u], F[sv, su], rtol=0, atol=1e-15)
            else:
                assert np.all(out.data[v, u] == 0)


def test_all_out_of_frame():
    H = np.array([[1.0, 0, 100.0], [0, 1.0, 0], [0, 0, 1.0]])
    out, valid = warp_features(Tensor(np.ones((4, 4, 2))), H)
    assert not valid.any() and np.all(out.data == 0)


def test_warp_matches_naive_bilinear():
    rng = np.random.default_rng(5)
    F = rng.standard_normal((7, 8, 3))
    cams = arc_rig(RigSpec(width=8, height=7))
    H = homography(cams[12], cams[10], 4.0)
    out, valid = warp_features(Tensor(F), H)
    for v in range(7):
        for u in range(8):
            p = H @ np.array([u + 0.5, v + 0.5, 1.0])
            ref, ok = naive_bilinear(F, p[0] / p[2], p[1] / p[2])
            assert valid[v, u] == ok
            assert np.allclose(out.data[v, u], ref, rtol=0, atol=1e-12)


def test_singular_homography_rejected():
    with pytest.raises(ValueError):
        warp_features(Tensor(np.ones((3, 3, 1))), np.zeros((3, 3)))


# -- cost volume --------------------------------------------------------------


def test_identical_views_zero_variance():
    a = Tensor(np.random.default_rng(6).standard_normal((4, 4, 3)))
    ok = np.ones((4, 4), bool)
    assert np.all(cost_volume([a, a, a], [ok, ok, ok]).data == 0)


def test_two_sample_formula():
    rng = np.random.default_rng(7)
    a, b = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    ok = np.ones(5, bool)
    m = (a + b) / 2
    expected = ((a - m) ** 2 + (b - m) ** 2) / 2
    assert np.allclose(cost_volume([Tensor(a), Tensor(b)], [ok, ok]).data, expected, rtol=0, atol=1e-15)


def test_masking_drops_invalid_view():
    rng = np.random.default_rng(8)
    a, b, c = (rng.standard_normal((4, 2)) for _ in range(3))
    ok = np.ones(4, bool)
    bad = np.array([True, False, True, False])
    out = cost_volume([Tensor(a), Tensor(b), Tensor(c)], [ok, bad, ok]).data
    full = np.var(np.stack([a, b, c]), axis=0)
    pair = np.var(np.stack([a, c]), axis=0)
    assert np.allclose(out[[0, 2]], full[[0, 2]], atol=1e-15)
    assert np.allclose(out[[1, 3]], pair[[1, 3]], atol=1e-15)


def test_fewer_than_two_valid_is_zero_and_k_below_two_rejected():
    a = Tensor(np.ones((3, 2)))
    b = Tensor(np.full((3, 2), 5.0))
    assert np.all(cost_volume([a, b], [np.ones(3, bool), np.zeros(3, bool)]).data == 0)
    with pytest.raises(ValueError):
        cost_volume([a], [np.ones(3, bool)])


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**31 - 1))
def test_masked_variance_is_nonnegative_and_matches_numpy(k, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((k, 6, 2)) * 3
    masks = rng.random((k, 6)) > 0.3
    out = masked_variance(Tensor(x), masks, with_mean=True).data
    assert np.all(out[..., 2:] >= 0)
    for p in range(6):
        sel = x[masks[:, p], p]
        if len(sel) >= 2:
            assert np.allclose(out[p, 2:], sel.var(axis=0), atol=1e-12)
        else:
            assert np.all(out[p, 2:] == 0)
        if len(sel) >= 1:
            assert np.allclose(out[p, :2], sel.mean(axis=0), atol=1e-12)


# -- full encoder -------------------------------------------------------------


def toy_setup(cost_stats="var", seed=0):
    cfg = EncoderConfig(grid_x=4, grid_y=4, grid_z=2, channels=3, n_layers=2, hidden=5, cost_stats=cost_stats)
    rng = np.random.default_rng(seed)
    enc = GeometryEncoder(rng, cfg)
    for p in enc.parameters().values():
        if p.ndim == 1:
            p.data = rng.standard_normal(p.shape) * 0.3
    cams = arc_rig(RigSpec(n_views=7, width=8, height=8))
    support = [cams[3], cams[0], cams[6]]
    scene = generate_scene(3, seed)
    images = [render_gt_view(scene, c).data for c in support]
    return cfg, enc, support, images


@pytest.mark.parametrize("cost_stats", ["var", "mean_var"])
def test_toy_volume_matches_hand_rolled_composition(cost_stats):
    cfg, enc, cams, images = toy_setup(cost_stats)
    vols = encode_scene(images, cams, enc)
    grid = vols.grid
    feats = [extract_2d_features(im, enc.tnet).data for im in images]
    u, v = grid.node_pixels()
    cost = np.zeros((4, 4, 2, cfg.channels * (2 if cost_stats == "mean_var" else 1)))
    for i in range(4):
        for j in range(4):
            for k, z in enumerate(grid.depths):
                samples = []
                for cam, F in zip(cams, feats):
                    p = homography(cam, cams[0], z) @ np.array([u[i], v[j], 1.0])
                    val, ok = naive_bilinear(F, p[0] / p[2], p[1] / p[2])
                    if ok:
                        samples.append(val)
                s = np.array(samples)
                var = s.var(axis=0) if len(s) >= 2 else np.zeros(cfg.channels)
                if cost_stats == "mean_var":
                    mean = s.mean(axis=0) if len(s) else np.zeros(cfg.channels)
                    cost[i, j, k] = np.concatenate([mean, var])
                else:
                    cost[i, j, k] = var
    out = naive_mlp(enc.bnet, cost)
    C = cfg.channels
    F = np.zeros((4, 4, 2, C))
    for i in range(4):
        for j in range(4):
            for k in range(2):
                acc, n = out[i, j, k, :C].copy(), 1
                for di, dj, dk in [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]:
                    a, b, c = i + di, j + dj, k + dk
                    if 0 <= a < 4 and 0 <= b < 4 and 0 <= c < 2:
                        acc += out[a, b, c, :C]
                        n += 1
                F[i, j, k] = acc / n
    assert np.allclose(vols.F.data, F, rtol=0, atol=1e-12)
    assert np.allclose(vols.A.data, out[..., C:], rtol=0, atol=1e-12)
    assert vols.A.shape[-1] == cfg.n_layers


def test_identical_views_give_uniform_volumes():
    cfg, enc, cams, images = toy_setup()
    same = [cams[0]] * 3
    vols = encode_scene([images[0]] * 3, same, enc)
    assert np.allclose(vols.F.data, vols.F.data[0, 0, 0], rtol=0, atol=1e-14)
    assert np.allclose(vols.A.data, vols.A.data[0, 0, 0], rtol=0, atol=1e-14)


def test_encode_is_deterministic_and_rejects_mixed_sizes():
    cfg, enc, cams, images = toy_setup()
    a, b = encode_scene(images, cams, enc), encode_scene(images, cams, enc)
    assert np.array_equal(a.F.data, b.F.data) and np.array_equal(a.A.data, b.A.data)
    with pytest.raises(ValueError):
        encode_scene([images[0], images[1][:-1], images[2]], cams, enc)


def test_smoothing_rows_are_averages():
    S = smoothing_operator(3, 2, 2).toarray()
    assert np.allclose(S.sum(axis=1), 1.0)
    # corner cell of a 3x2x2 grid has 3 neighbours
    assert np.isclose(S[0, 0], 0.25)


def test_gradient_through_encoder():
    cfg, enc, cams, images = toy_setup("mean_var", seed=3)
    rng = np.random.default_rng(0)
    w = rng.standard_normal((4, 4, 2, cfg.channels))
    wa = rng.standard_normal((4, 4, 2, cfg.n_layers))
    for name in ["tnet.layers.0.weight", "bnet.layers.1.weight", "bnet.layers.0.bias"]:
        original = enc.parameters()[name]

        def f(t, name=name, original=original):
            enc.set_parameter(name, t)
            try:
                vols = encode_scene(images, cams, enc)
                return (vols.F * w).sum() + (vols.A * wa).sum()
            finally:
                enc.set_parameter(name, original)

        assert finite_difference_check(f, original.data.copy()) < 1e-4


# -- interpolation ------------------------------------------------------------


def ramp_grid():
    cam = arc_rig()[10]
    grid = VolumeGrid(cam, 5, 4, np.linspace(cam.near, cam.far, 3))
    gi, gj, gk = np.meshgrid(np.arange(5), np.arange(4), np.arange(3), indexing="ij")
    vol = np.stack([gi + 2 * gj + 3 * gk, gi * 0 + 1.0], axis=-1).astype(float)
    return grid, vol


def test_interpolate_at_node_returns_node_value():
    grid, vol = ramp_grid()
    pts = grid.grid_to_world(np.array([[2, 1, 1], [4, 3, 2], [0, 0, 0]]))
    out, outside = interpolate(Tensor(vol), grid, pts)
    assert not outside.any()
    assert np.allclose(out.data, [vol[2, 1, 1], vol[4, 3, 2], vol[0, 0, 0]], rtol=0, atol=1e-9)


def test_interpolate_at_cell_center_is_corner_mean():
    grid, vol = ramp_grid()
    out, _ = interpolate(Tensor(vol), grid, grid.grid_to_world(np.array([[1.5, 0.5, 0.5]])))
    corners = vol[1:3, 0:2, 0:2].reshape(-1, 2).mean(axis=0)
    assert np.allclose(out.data[0], corners, rtol=0, atol=1e-9)


def test_interpolate_far_outside_is_zero_and_flagged():
    grid, vol = ramp_grid()
    out, outside = interpolate(Tensor(vol), grid, np.array([[50.0, 50.0, 50.0], [0.0, 0.0, 100.0]]))
    assert outside.all() and np.all(out.data == 0)


def test_interpolate_gradient():
    grid, vol = ramp_grid()
    pts = grid.grid_to_world(np.random.default_rng(0).uniform([0, 0, 0], [4, 3, 2], size=(6, 3)))
    w = np.random.default_rng(1).standard_normal((6, 2))
    err = finite_difference_check(lambda t: (interpolate(t, grid, pts)[0] * w).sum(), vol)
    assert err < 1e-4


def test_grid_round_trip():
    cfg = EncoderConfig()
    grid = make_grid(arc_rig()[10], cfg)
    g = np.random.default_rng(2).uniform([0, 0, 0], [31, 31, 7], size=(20, 3))
    assert np.allclose(grid.world_to_grid(grid.grid_to_world(g)), g, atol=1e-9)
    assert grid.depths[0] == grid.camera.near and grid.depths[-1] == grid.camera.far
