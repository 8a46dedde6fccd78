import numpy as np
import pytest

from cellsplat.appearance import AppearanceConfig, AppearanceModel
from cellsplat.core import GaussianField, inverse_sigmoid
from cellsplat.render import RenderOptions, depth_to_normal, render
from cellsplat.train import (
    Adam,
    DensifyStats,
    LossWeights,
    TrainConfig,
    accumulate_view_gradient,
    backward,
    compute_loss,
    densify_and_prune,
    depth_distortion_loss,
    forward_pass,
    init_field_from_points,
    normal_consistency_loss,
)
from helpers import front_camera, random_field

GRADCHECK_OPTS = RenderOptions(contrib_threshold=0.0, transmittance_min=0.0,
                               capture_contribs=True)
SMALL_APP = AppearanceConfig(embed_dim=4, channels=6, n_downsample=2, kan_grid=5)


def pairwise_depth_reference(contribs, n_pixels):
    """Explicit double loop over contribution pairs."""
    total = 0.0
    for p in np.unique(contribs.pixel):
        seg = contribs.pixel == p
        w = contribs.omega[seg]
        t = contribs.t[seg]
        for i in range(len(w)):
            for j in range(i + 1, len(w)):
                total += w[i] * w[j] * abs(t[i] - t[j])
    return total / n_pixels


class TestDepthDistortion:
    def test_matches_pairwise_reference(self):
        rng = np.random.default_rng(0)
        field = random_field(rng, n=15)
        cam = front_camera()
        out = render(field, cam, GRADCHECK_OPTS)
        value, _, _ = depth_distortion_loss(out.contribs, cam.width * cam.height)
        ref = pairwise_depth_reference(out.contribs, cam.width * cam.height)
        assert value == pytest.approx(ref, rel=1e-10)

    def test_zero_for_single_contribution_pixels(self):
        rng = np.random.default_rng(1)
        field = random_field(rng, n=1)
        cam = front_camera()
        out = render(field, cam, GRADCHECK_OPTS)
        value, _, _ = depth_distortion_loss(out.contribs, cam.width * cam.height)
        assert value == 0.0

    def test_zero_iff_equal_depths(self):
        from cellsplat.render import PixelContribs
        # two contributions at the same depth in one pixel
        c = PixelContribs(
            pixel=np.array([0, 0]), splat=np.array([0, 1]),
            t=np.array([2.0, 2.0]), psi=np.ones(2), a=np.full(2, 0.5),
            omega=np.array([0.5, 0.25]), trans=np.array([1.0, 0.5]),
            offsets=np.array([0, 2]), t_bg=np.array([0.25]),
        )
        value, _, _ = depth_distortion_loss(c, 1)
        assert value == 0.0
        c.t = np.array([2.0, 3.0])
        value, _, _ = depth_distortion_loss(c, 1)
        assert value > 0.0

    def test_gradients_match_fd(self):
        rng = np.random.default_rng(2)
        field = random_field(rng, n=10)
        cam = front_camera()
        out = render(field, cam, GRADCHECK_OPTS)
        c = out.contribs
        n_pix = cam.width * cam.height
        _, g_omega, g_t = depth_distortion_loss(c, n_pix)
        eps = 1e-6
        for i in rng.choice(c.omega.size, size=min(20, c.omega.size), replace=False):
            for arr, g in ((c.omega, g_omega), (c.t, g_t)):
                orig = arr[i]
                arr[i] = orig + eps
                up, _, _ = depth_distortion_loss(c, n_pix)
                arr[i] = orig - eps
                dn, _, _ = depth_distortion_loss(c, n_pix)
                arr[i] = orig
                num = (up - dn) / (2 * eps)
                assert abs(g[i] - num) < 1e-7 + 1e-5 * abs(num)

    def test_order_invariance(self):
        rng = np.random.default_rng(3)
        field = random_field(rng, n=12)
        cam = front_camera()
        out = render(field, cam, GRADCHECK_OPTS)
        c = out.contribs
        n_pix = cam.width * cam.height
        base, _, _ = depth_distortion_loss(c, n_pix)
        # shuffle within a pixel segment; the pairwise sum must not change
        p = np.argmax(np.diff(c.offsets))  # pixel with most contributions
        seg = slice(c.offsets[p], c.offsets[p + 1])
        idx = np.arange(c.omega.size)
        idx[seg] = rng.permutation(idx[seg])
        from cellsplat.render import PixelContribs
        shuffled = PixelContribs(
            pixel=c.pixel, splat=c.splat[idx], t=c.t[idx], psi=c.psi[idx],
            a=c.a[idx], omega=c.omega[idx], trans=c.trans[idx],
            offsets=c.offsets, t_bg=c.t_bg)
        value, _, _ = depth_distortion_loss(shuffled, n_pix)
        assert value == pytest.approx(base, rel=1e-12)


class TestNormalConsistency:
    def test_zero_when_aligned(self):
        rng = np.random.default_rng(4)
        field = random_field(rng, n=5)
        cam = front_camera()
        out = render(field, cam, GRADCHECK_OPTS)
        n_pix = cam.width * cam.height
        # construct N_D equal to each contribution's splat normal: only
        # possible when each pixel has one contribution, so fake it by
        # feeding the per-splat normals through a map equal to the first
        # contribution's normal in each pixel
        n_cam = out.view.n_cam
        n_d = np.zeros((n_pix, 3))
        c = out.contribs
        firsts = np.unique(c.pixel, return_index=True)[1]
        # keep only first contribution of each pixel for this check
        from cellsplat.render import PixelContribs
        cc = PixelContribs(
            pixel=c.pixel[firsts], splat=c.splat[firsts], t=c.t[firsts],
            psi=c.psi[firsts], a=c.a[firsts], omega=c.omega[firsts],
            trans=c.trans[firsts], offsets=c.offsets, t_bg=c.t_bg)
        n_d[cc.pixel] = n_cam[cc.splat]
        value, _, _ = normal_consistency_loss(cc, n_cam, n_d.reshape(-1, 3), n_pix, field.n)
        assert value == pytest.approx(0.0, abs=1e-12)

    def test_matches_loop_reference(self):
        rng = np.random.default_rng(5)
        field = random_field(rng, n=8)
        cam = front_camera()
        out = render(field, cam, GRADCHECK_OPTS)
        n_pix = cam.width * cam.height
        n_d = depth_to_normal(out.depth, (cam.fx, cam.fy, cam.cx, cam.cy))
        value, _, _ = normal_consistency_loss(out.contribs, out.view.n_cam,
                                              n_d, n_pix, field.n)
        c = out.contribs
        nd_flat = n_d.reshape(-1, 3)
        ref = sum(c.omega[i] * (1.0 - float(out.view.n_cam[c.splat[i]] @ nd_flat[c.pixel[i]]))
                  for i in range(c.omega.size)) / n_pix
        assert value == pytest.approx(ref, rel=1e-12)


class TestComputeLoss:
    def test_perfect_reconstruction_color_zero(self):
        rng = np.random.default_rng(6)
        field = random_field(rng, n=6)
        cam = front_camera()
        out = render(field, cam, GRADCHECK_OPTS)
        weights = LossWeights(depth_distortion=2.0, normal_consistency=0.1, dssim=0.2)
        b = compute_loss(out, (out.color, out.color), out.color, weights,
                         intrinsics=(cam.fx, cam.fy, cam.cx, cam.cy))
        assert b.color == 0.0
        assert b.total == pytest.approx(2.0 * b.depth + 0.1 * b.normal, rel=1e-12)

    def test_breakdown_identity(self):
        rng = np.random.default_rng(7)
        field = random_field(rng, n=10)
        cam = front_camera()
        out = render(field, cam, GRADCHECK_OPTS)
        gt = rng.uniform(size=out.color.shape)
        weights = LossWeights(depth_distortion=3.0, normal_consistency=0.5, dssim=0.2)
        b = compute_loss(out, (out.color, out.color), gt, weights,
                         intrinsics=(cam.fx, cam.fy, cam.cx, cam.cy))
        assert b.total == pytest.approx(b.color + 3.0 * b.depth + 0.5 * b.normal, rel=1e-12)
        assert b.color == pytest.approx(b.l1 + 0.2 * b.dssim, rel=1e-12)
        assert min(b.color, b.depth, b.normal, b.l1, b.dssim) >= 0.0

    def test_shape_mismatch(self):
        rng = np.random.default_rng(8)
        field = random_field(rng, n=3)
        cam = front_camera()
        out = render(field, cam, GRADCHECK_OPTS)
        with pytest.raises(Exception):
            compute_loss(out, (out.color, out.color), np.zeros((4, 4, 3)), LossWeights())


class TestFullGradients:
    """Master property: analytic gradients match central finite differences."""

    def run_scene(self, seed, with_appearance=True, weights=None, n_splats=6):
        rng = np.random.default_rng(seed)
        field = random_field(rng, n=n_splats, sh_degree=2)
        cam = front_camera(width=16, height=16, fx=12.0)
        gt = rng.uniform(0.1, 0.45, size=(16, 16, 3))
        weights = weights or LossWeights(depth_distortion=1.0, normal_consistency=0.05, dssim=0.2)
        appearance = None
        if with_appearance:
            appearance = AppearanceModel([0], SMALL_APP, rng=rng)
            appearance.randomize(rng, scale=0.05)

        base = forward_pass(field, cam, gt, weights, opts=GRADCHECK_OPTS,
                            appearance=appearance, image_id=0)
        n_d = base.n_d
        splat_grads, app_grads, _ = backward(base)

        def loss_of(f2):
            g = forward_pass(f2, cam, gt, weights, opts=GRADCHECK_OPTS,
                             appearance=appearance, image_id=0, fixed_n_d=n_d)
            return g.breakdown.total

        return field, loss_of, splat_grads, app_grads, appearance, cam, gt, weights, n_d

    @pytest.mark.parametrize("seed", [0, 1])
    def test_splat_gradients(self, seed):
        field, loss_of, splat_grads, _, _, _, _, _, _ = self.run_scene(seed)
        eps = 1e-5
        rng = np.random.default_rng(100 + seed)
        for key in ("centers", "log_scales", "quats", "opacity_logits", "sh"):
            arr = getattr(field, key)
            idx = rng.choice(arr.size, size=min(25, arr.size), replace=False)
            for i in idx:
                f2 = field.copy()
                getattr(f2, key).flat[i] += eps
                up = loss_of(f2)
                f2 = field.copy()
                getattr(f2, key).flat[i] -= eps
                dn = loss_of(f2)
                num = (up - dn) / (2 * eps)
                ana = splat_grads[key].flat[i]
                tol = 1e-3 * max(abs(num), abs(ana), 1e-7)
                assert abs(ana - num) <= tol, (key, i, ana, num)

    def test_appearance_gradients(self):
        field, _, _, app_grads, appearance, cam, gt, weights, n_d = self.run_scene(3)
        eps = 1e-5
        rng = np.random.default_rng(200)

        def loss_now():
            g = forward_pass(field, cam, gt, weights, opts=GRADCHECK_OPTS,
                             appearance=appearance, image_id=0, fixed_n_d=n_d)
            return g.breakdown.total

        for key in ("embed.0", "conv0.weight", "kan.spline"):
            arr = appearance.params[key]
            idx = rng.choice(arr.size, size=min(10, arr.size), replace=False)
            for i in idx:
                orig = arr.copy()
                appearance.params[key] = orig.copy()
                appearance.params[key].flat[i] += eps
                up = loss_now()
                appearance.params[key] = orig.copy()
                appearance.params[key].flat[i] -= eps
                dn = loss_now()
                appearance.params[key] = orig
                num = (up - dn) / (2 * eps)
                ana = app_grads.get(key, np.zeros_like(arr)).flat[i]
                assert abs(ana - num) <= 1e-3 * max(abs(num), abs(ana), 1e-7), key

    def test_dssim_does_not_reach_appearance(self):
        """D-SSIM is computed on the raw render, so appearance parameters
        must receive gradient only from the L1 term."""
        rng = np.random.default_rng(9)
        field = random_field(rng, n=5)
        cam = front_camera(width=16, height=16, fx=12.0)
        gt = rng.uniform(0.1, 0.45, size=(16, 16, 3))
        appearance = AppearanceModel([0], SMALL_APP, rng=rng)
        appearance.randomize(rng, scale=0.05)
        w_only_dssim = LossWeights(depth_distortion=0.0, normal_consistency=0.0, dssim=0.2)
        graph = forward_pass(field, cam, gt, w_only_dssim, opts=GRADCHECK_OPTS,
                             appearance=appearance, image_id=0)
        # remove the L1 seed by making I_a equal to gt
        graph.i_a = gt.copy()
        _, app_grads, _ = backward(graph)
        for key, g in app_grads.items():
            assert np.allclose(g, 0.0), key

    def test_zero_weight_pixels_no_gradient(self):
        rng = np.random.default_rng(10)
        field = random_field(rng, n=1, center_box=((-0.1, -0.1, 4.0), (0.1, 0.1, 4.5)))
        cam = front_camera(width=16, height=16, fx=30.0)
        gt = np.zeros((16, 16, 3))
        graph = forward_pass(field, cam, gt, LossWeights(0, 0, 0), opts=GRADCHECK_OPTS)
        splat_grads, _, _ = backward(graph)
        assert np.all(np.isfinite(splat_grads["centers"]))


class TestAccumulateViewGradient:
    def test_single_pixel_norm(self):
        stats = DensifyStats.zeros(2)
        g = np.array([[0.3, -0.4]])
        jac = np.zeros((2, 2, 3))
        jac[1] = np.array([[1.0, 0, 0], [0, 1.0, 0]])
        accumulate_view_gradient(stats, np.array([1]), g, jac)
        assert stats.grad_mag[1] == pytest.approx(np.linalg.norm(g @ jac[1]))
        assert stats.count[1] == 1.0
        assert stats.grad_mag[0] == 0.0

    def test_opposing_pixels_do_not_cancel(self):
        stats = DensifyStats.zeros(1)
        jac = np.array([[[2.0, 0, 0], [0, 1.0, 0]]])
        z = np.array([0.5, -0.2])
        accumulate_view_gradient(stats, np.array([0, 0]), np.stack([z, -z]), jac)
        expected = 2 * np.linalg.norm(z @ jac[0])
        assert stats.grad_mag[0] == pytest.approx(expected)
        # the sum-then-norm baseline collapses to zero
        summed = z @ jac[0] + (-z) @ jac[0]
        assert np.linalg.norm(summed) == pytest.approx(0.0)

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(11)
        n = 5
        stats = DensifyStats.zeros(n)
        m = 40
        splat_idx = rng.integers(0, n, size=m)
        g = rng.normal(size=(m, 2))
        jac = rng.normal(size=(n, 2, 3))
        accumulate_view_gradient(stats, splat_idx, g, jac)
        ref = np.zeros(n)
        for i in range(m):
            ref[splat_idx[i]] += np.linalg.norm(g[i] @ jac[splat_idx[i]])
        assert np.allclose(stats.grad_mag, ref)
        assert stats.grad_mag.sum() >= np.linalg.norm(stats.grad_dir.sum(axis=0)) - 1e-12


class TestDensifyAndPrune:
    def base_field(self, rng, n=4, scale=0.01):
        f = random_field(rng, n=n, scale_range=(scale, scale * 1.01),
                         opacity_range=(0.5, 0.9))
        f.scene_extent = 4.0
        return f

    def test_no_trigger_keeps_field(self):
        rng = np.random.default_rng(12)
        field = self.base_field(rng)
        stats = DensifyStats.zeros(field.n)
        config = TrainConfig()
        out, stats2 = densify_and_prune(field, stats, config, 600, rng)
        assert out.n == field.n
        assert stats2.grad_mag.size == out.n

    def test_clone_small_splat(self):
        rng = np.random.default_rng(13)
        field = self.base_field(rng, n=3, scale=0.01)  # well under cutoff 0.04
        stats = DensifyStats.zeros(3)
        stats.grad_mag[1] = 1.0
        stats.grad_dir[1] = np.array([1.0, 0, 0])
        stats.count[1] = 1.0
        config = TrainConfig()
        out, _ = densify_and_prune(field, stats, config, 600, rng)
        assert out.n == 4

    def test_split_large_splat(self):
        rng = np.random.default_rng(14)
        field = self.base_field(rng, n=3, scale=0.2)  # above cutoff 0.04
        stats = DensifyStats.zeros(3)
        stats.grad_mag[2] = 1.0
        stats.count[2] = 1.0
        config = TrainConfig()
        out, _ = densify_and_prune(field, stats, config, 600, rng)
        assert out.n == 4  # parent removed, two children added
        children = out.log_scales[-2:]
        assert np.allclose(np.exp(children), 0.2 / 1.6, rtol=0.05)

    def test_prune_transparent(self):
        rng = np.random.default_rng(15)
        field = self.base_field(rng, n=4)
        field.opacity_logits[0] = inverse_sigmoid(0.001)
        stats = DensifyStats.zeros(4)
        out, _ = densify_and_prune(field, stats, TrainConfig(), 600, rng)
        assert out.n == 3

    def test_opacity_reset(self):
        rng = np.random.default_rng(16)
        field = self.base_field(rng, n=4)
        stats = DensifyStats.zeros(4)
        out, _ = densify_and_prune(field, stats, TrainConfig(), 3000, rng)
        assert np.all(sigmoid := 1 / (1 + np.exp(-out.opacity_logits)) <= 0.01 + 1e-9)


class TestAdam:
    def test_quadratic_descent(self):
        params = {"x": np.array([5.0, -3.0])}
        opt = Adam()
        for _ in range(400):
            grads = {"x": 2 * params["x"]}
            opt.step(params, grads, {"x": 0.05})
        assert np.abs(params["x"]).max() < 1e-2


class TestInitFromPoints:
    def test_nearest_neighbor_scales(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0], [1.0, 1, 0]])
        colors = np.full((4, 3), 0.5)
        f = init_field_from_points(pts, colors, sh_degree=1, scene_extent=2.0)
        assert f.n == 4
        # 3 NN of each corner of the unit square: distances 1, 1, sqrt(2)
        expected = (1 + 1 + np.sqrt(2)) / 3
        assert np.allclose(np.exp(f.log_scales), expected, rtol=1e-6)
        assert np.allclose(1 / (1 + np.exp(-f.opacity_logits)), 0.1)
