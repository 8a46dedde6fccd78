import numpy as np
import pytest

from cellsplat.core import (
    GaussianSplat,
    InvalidParameterError,
    Ray,
    build_covariance,
    eval_sh_color,
    quat_to_rot,
    quat_to_rot_with_jacobian,
    ray_gaussian_peak,
    sh_basis,
    sh_basis_grad,
)
from helpers import finite_difference, rel_err
from reference import (
    covariance_reference,
    eval_sh_color_reference,
    ray_peak_dense_oracle,
    sh_basis_reference,
)


def random_unit(rng, n=4):
    v = rng.normal(size=n)
    return v / np.linalg.norm(v)


class TestBuildCovariance:
    def test_identity(self):
        cov = build_covariance(np.zeros(3), np.array([1.0, 0, 0, 0]))
        assert np.allclose(cov, np.eye(3), atol=1e-15)

    def test_axis_aligned_scaling(self):
        cov = build_covariance(np.array([np.log(2.0), 0, 0]), np.array([1.0, 0, 0, 0]))
        assert np.allclose(cov, np.diag([4.0, 1.0, 1.0]), atol=1e-12)

    def test_matches_reference_composition(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            ls = rng.uniform(-1.5, 1.0, size=3)
            q = random_unit(rng)
            assert np.allclose(build_covariance(ls, q), covariance_reference(ls, q), atol=1e-12)

    def test_symmetry_and_eigenvalues(self):
        rng = np.random.default_rng(3)
        ls = rng.uniform(-1, 1, size=3)
        q = random_unit(rng)
        cov = build_covariance(ls, q)
        assert np.abs(cov - cov.T).max() < 1e-12
        eig = np.sort(np.linalg.eigvalsh(cov))
        assert np.allclose(eig, np.sort(np.exp(2 * ls)), rtol=1e-10)

    def test_quaternion_sign_flip(self):
        rng = np.random.default_rng(11)
        ls = rng.uniform(-1, 1, size=3)
        q = random_unit(rng)
        assert np.allclose(build_covariance(ls, q), build_covariance(ls, -q), atol=1e-15)

    def test_zero_quaternion_rejected(self):
        with pytest.raises(InvalidParameterError):
            build_covariance(np.zeros(3), np.zeros(4))


class TestSphericalHarmonics:
    def test_zero_coeffs_give_gray(self):
        rgb = eval_sh_color(np.zeros((9, 3)), np.array([0.0, 0, 1]))
        assert np.allclose(rgb, [0.5, 0.5, 0.5])

    def test_dc_only(self):
        coeffs = np.zeros((1, 3))
        coeffs[0, 0] = 1.0
        rgb = eval_sh_color(coeffs, np.array([0.3, -0.5, 0.81]) / np.linalg.norm([0.3, -0.5, 0.81]))
        assert np.allclose(rgb, [0.7820948, 0.5, 0.5], atol=1e-6)

    def test_degree0_view_independent(self):
        rng = np.random.default_rng(0)
        coeffs = rng.normal(size=(1, 3))
        vals = [eval_sh_color(coeffs, random_unit(rng, 3)) for _ in range(10)]
        assert np.ptp(np.array(vals), axis=0).max() < 1e-15

    @pytest.mark.parametrize("degree", [1, 2, 3])
    def test_matches_scipy_reference(self, degree):
        rng = np.random.default_rng(degree)
        k = (degree + 1) ** 2
        coeffs = rng.normal(scale=0.3, size=(k, 3))
        for _ in range(100):
            d = random_unit(rng, 3)
            ours = eval_sh_color(coeffs, d)
            ref = eval_sh_color_reference(coeffs, d)
            assert np.allclose(ours, ref, atol=1e-10), (d, ours, ref)

    @pytest.mark.parametrize("degree", [1, 2, 3])
    def test_basis_gradient_finite_difference(self, degree):
        rng = np.random.default_rng(degree + 10)
        d = random_unit(rng, 3)
        grad = sh_basis_grad(d, degree)[0]
        k = (degree + 1) ** 2
        num = np.zeros((k, 3))
        eps = 1e-6
        for comp in range(3):
            dp = d.copy()
            dp[comp] += eps
            dm = d.copy()
            dm[comp] -= eps
            num[:, comp] = (sh_basis(dp[None], degree)[0] - sh_basis(dm[None], degree)[0]) / (2 * eps)
        assert rel_err(grad, num) < 1e-6


class TestQuaternionJacobian:
    def test_matches_finite_difference(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            q = rng.normal(size=4) * rng.uniform(0.5, 2.0)
            _, jac = quat_to_rot_with_jacobian(q[None])
            num = np.zeros((3, 3, 4))
            eps = 1e-6
            for comp in range(4):
                qp = q.copy()
                qp[comp] += eps
                qm = q.copy()
                qm[comp] -= eps
                num[:, :, comp] = (quat_to_rot(qp) - quat_to_rot(qm)) / (2 * eps)
            assert rel_err(jac[0], num) < 1e-5


class TestRayGaussianPeak:
    def unit_splat(self):
        return GaussianSplat(np.zeros(3), np.zeros(3), np.array([1.0, 0, 0, 0]), 0.0, np.zeros((1, 3)))

    def test_through_center(self):
        hit = ray_gaussian_peak(self.unit_splat(), Ray(np.array([0.0, 0, -5]), np.array([0.0, 0, 1])))
        assert hit.psi == pytest.approx(1.0, abs=1e-12)
        assert hit.t_star == pytest.approx(5.0, abs=1e-12)

    def test_offset_ray_matches_dense_oracle(self):
        splat = self.unit_splat()
        origin = np.array([1.0, 0, -5])
        direction = np.array([0.0, 0, 1])
        hit = ray_gaussian_peak(splat, Ray(origin, direction))
        psi_ref, t_ref = ray_peak_dense_oracle(splat.center, splat.log_scale, splat.quat, origin, direction)
        assert hit.psi == pytest.approx(np.exp(-0.5), abs=1e-9)
        assert hit.psi == pytest.approx(psi_ref, abs=1e-6)
        assert hit.t_star == pytest.approx(t_ref, abs=1e-6)

    def test_anisotropic_random_vs_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            splat = GaussianSplat(
                center=rng.uniform(-0.5, 0.5, 3) + np.array([0, 0, 5.0]),
                log_scale=np.array([np.log(2.0), 0, 0]) + rng.uniform(-0.3, 0.3, 3),
                quat=random_unit(rng),
                opacity_logit=0.0,
                sh=np.zeros((1, 3)),
            )
            origin = rng.uniform(-0.3, 0.3, 3)
            direction = splat.center - origin + rng.uniform(-0.4, 0.4, 3)
            direction /= np.linalg.norm(direction)
            hit = ray_gaussian_peak(splat, Ray(origin, direction))
            psi_ref, t_ref = ray_peak_dense_oracle(splat.center, splat.log_scale, splat.quat, origin, direction)
            assert hit.psi == pytest.approx(psi_ref, abs=1e-6)
            assert hit.t_star == pytest.approx(t_ref, abs=1e-6)

    def test_maximality_along_ray(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            splat = GaussianSplat(
                center=np.array([0, 0, 4.0]) + rng.uniform(-1, 1, 3),
                log_scale=rng.uniform(-0.8, 0.5, 3),
                quat=random_unit(rng),
                opacity_logit=0.0,
                sh=np.zeros((1, 3)),
            )
            origin = rng.uniform(-0.2, 0.2, 3)
            direction = random_unit(rng, 3)
            if direction[2] < 0.3:
                direction = np.array([0.1, 0.1, 1.0]) / np.linalg.norm([0.1, 0.1, 1.0])
            hit = ray_gaussian_peak(splat, Ray(origin, direction))
            cov_inv = np.linalg.inv(covariance_reference(splat.log_scale, splat.quat))
            ts = np.linspace(0, 12, 4001)
            pts = origin[None] + ts[:, None] * direction[None]
            d = pts - splat.center[None]
            vals = np.exp(-0.5 * np.einsum("ni,ij,nj->n", d, cov_inv, d))
            assert hit.psi >= vals.max() - 1e-9

    def test_scale_consistency(self):
        rng = np.random.default_rng(4)
        splat = GaussianSplat(
            center=np.array([0.3, -0.2, 5.0]),
            log_scale=rng.uniform(-0.5, 0.5, 3),
            quat=random_unit(rng),
            opacity_logit=0.0,
            sh=np.zeros((1, 3)),
        )
        origin = np.array([0.1, 0.0, 0.0])
        direction = random_unit(rng, 3)
        direction[2] = abs(direction[2]) + 0.5
        direction /= np.linalg.norm(direction)
        hit = ray_gaussian_peak(splat, Ray(origin, direction))
        k = 3.7
        scaled = GaussianSplat(splat.center * k, splat.log_scale + np.log(k), splat.quat, 0.0, splat.sh)
        hit2 = ray_gaussian_peak(scaled, Ray(origin * k, direction))
        assert hit2.psi == pytest.approx(hit.psi, rel=1e-12)
        assert hit2.t_star == pytest.approx(hit.t_star * k, rel=1e-12)

    def test_peak_behind_origin_clamps(self):
        splat = self.unit_splat()
        hit = ray_gaussian_peak(splat, Ray(np.array([0.0, 0, 2.0]), np.array([0.0, 0, 1])))
        assert hit.t_star == 0.0
        assert hit.psi == pytest.approx(np.exp(-2.0), rel=1e-12)
