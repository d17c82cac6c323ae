import numpy as np
import pytest
from scipy.integrate import quad

from oracles import radau_nodes_weights
from dgflow.mesh import build_structured_mesh
from dgflow.space import BrokenSpace
from dgflow.time_dg import (RadauRule, SlabPolynomial, TimeGrid,
                            dg_ode_slab_step, discrete_time_integral,
                            exponential_interpolant,
                            exponential_interpolant_matrix, gauss_radau,
                            interpolant_stability_report,
                            radau_equivalence_check, radau_iia_linear_step,
                            radau_iia_ode_step, radau_iia_tableau,
                            radau_measure_inverse_constant,
                            random_slab_polynomial, time_inverse_constant)


class TestTimeGrid:
    def test_uniform(self):
        g = TimeGrid.uniform(2.0, 4)
        assert g.tau == pytest.approx(0.5)
        assert g.theta == pytest.approx(1.0)
        assert g.n_slabs == 4

    def test_quasi_uniform_ratio(self):
        g = TimeGrid([0.0, 0.5, 0.75, 1.25, 1.5])
        assert g.theta == pytest.approx(0.5)
        assert 0 < g.theta <= 1.0

    def test_validation(self):
        with pytest.raises(ValueError):
            TimeGrid([0.0, 1.0, 1.0])
        with pytest.raises(ValueError):
            TimeGrid([0.5, 1.0])


class TestGaussRadau:
    def test_hardcoded_rationals(self):
        r0 = gauss_radau(0)
        assert np.allclose(r0.nodes, [1.0], atol=1e-15)
        assert np.allclose(r0.weights, [2.0], atol=1e-15)
        r1 = gauss_radau(1)
        assert np.max(np.abs(r1.nodes - [-1.0 / 3.0, 1.0])) <= 1e-14
        assert np.max(np.abs(r1.weights - [1.5, 0.5])) <= 1e-14

    @pytest.mark.parametrize("k_t", range(6))
    def test_moment_exactness(self, k_t):
        r = gauss_radau(k_t)
        assert r.nodes[-1] == 1.0
        assert np.all(r.weights > 0)
        for m in range(2 * k_t + 1):
            exact = 2.0 / (m + 1) if m % 2 == 0 else 0.0
            assert float(np.sum(r.weights * r.nodes ** m)) == \
                pytest.approx(exact, abs=1e-13)

    @pytest.mark.parametrize("k_t", range(4))
    def test_against_jacobi_oracle(self, k_t):
        nodes, weights = radau_nodes_weights(k_t)
        r = gauss_radau(k_t)
        assert np.max(np.abs(nodes - r.nodes)) <= 1e-13
        assert np.max(np.abs(weights - r.weights)) <= 1e-13

    def test_quartic_with_kt2(self):
        r = gauss_radau(2)
        assert float(np.sum(r.weights * r.nodes ** 4)) == \
            pytest.approx(2.0 / 5.0, abs=1e-13)

    def test_cap(self):
        with pytest.raises(ValueError):
            gauss_radau(6)


class TestDiscreteTimeIntegral:
    def test_constant(self):
        g = TimeGrid.uniform(3.0, 7)
        assert discrete_time_integral(lambda t: 1.0, g, gauss_radau(1)) == \
            pytest.approx(3.0, rel=1e-14)

    def test_quadratic_exact_with_dg1(self):
        g = TimeGrid.uniform(1.0, 3)
        val = discrete_time_integral(lambda t: t * t, g, gauss_radau(1))
        assert val == pytest.approx(1.0 / 3.0, rel=1e-12)

    @pytest.mark.parametrize("k_t", [0, 1, 2, 3])
    def test_per_slab_polynomial_exactness(self, k_t):
        g = TimeGrid([0.0, 0.4, 1.0])
        rule = gauss_radau(k_t)
        deg = 2 * k_t
        exact = (1.0 ** (deg + 1)) / (deg + 1)
        val = discrete_time_integral(lambda t: t ** deg, g, rule)
        assert val == pytest.approx(exact, rel=1e-12)

    def test_overdegree_error_has_radau_sign(self):
        # one slab, f = t^{2k_t+1}: the Radau remainder is positive for the
        # right rule applied to this monomial (recorded, not asserted to a value)
        rule = gauss_radau(1)
        g = TimeGrid.uniform(1.0, 1)
        val = discrete_time_integral(lambda t: t ** 3, g, rule)
        assert val != pytest.approx(0.25, abs=1e-6)


def scalar_slab(mesh, coeff_list, t0=0.0, t1=1.0):
    space = BrokenSpace(mesh, 0)
    k_t = len(coeff_list) - 1
    coeffs = np.zeros((k_t + 1, mesh.n_elements, 1, 1))
    for i, c in enumerate(coeff_list):
        coeffs[i] = c
    return SlabPolynomial(space, t0, t1, coeffs)


class TestExponentialInterpolant:
    def test_lambda_zero_is_identity(self, rng):
        for k_t in (1, 2, 3):
            E = exponential_interpolant_matrix(k_t, 0.0)
            assert np.max(np.abs(E - np.eye(k_t + 1))) <= 1e-12

    def test_kt0_is_identity_for_any_lambda(self, mesh11, rng):
        space = BrokenSpace(mesh11, 1)
        v = random_slab_polynomial(space, 0.0, 0.7, 0, rng)
        vb = exponential_interpolant(v, 13.0)
        assert np.max(np.abs(vb.coeffs - v.coeffs)) == 0.0

    def test_closed_form_slope(self, mesh11):
        # r(t) = t on (0, 1] with lambda = 1 maps to (2 - 4/e) t
        v = scalar_slab(mesh11, [0.5, 0.5])
        vb = exponential_interpolant(v, 1.0)
        a = 2.0 - 4.0 / np.e
        assert np.max(np.abs(vb.coeffs[0] - a / 2.0)) <= 1e-10
        assert np.max(np.abs(vb.coeffs[1] - a / 2.0)) <= 1e-10

    @pytest.mark.parametrize("k_t", [1, 2, 3])
    @pytest.mark.parametrize("lam", [0.3, 2.0, 17.0])
    def test_defining_conditions_against_quad(self, mesh11, rng, k_t, lam):
        """Both defining conditions verified with adaptive quadrature."""
        space = BrokenSpace(mesh11, 0)
        t0, t1 = 0.2, 1.1
        v = random_slab_polynomial(space, t0, t1, k_t, rng)
        vb = exponential_interpolant(v, lam)
        worst = np.max(np.abs(vb.start_limit().coefficients
                              - v.start_limit().coefficients))
        for m in range(k_t):
            lhs = quad(lambda t: vb.value_at(t).coefficients[0, 0, 0]
                       * (t - t0) ** m, t0, t1, epsabs=1e-14, epsrel=1e-14)[0]
            rhs = quad(lambda t: v.value_at(t).coefficients[0, 0, 0]
                       * (t - t0) ** m * np.exp(-lam * (t - t0)),
                       t0, t1, epsabs=1e-14, epsrel=1e-14)[0]
            worst = max(worst, abs(lhs - rhs))
        assert worst <= 1e-11

    def test_linearity(self, mesh22, rng):
        space = BrokenSpace(mesh22, 1, components=2)
        v = random_slab_polynomial(space, 0.0, 0.5, 2, rng)
        w = random_slab_polynomial(space, 0.0, 0.5, 2, rng)
        lam = 3.0
        lhs = exponential_interpolant(
            SlabPolynomial(space, 0.0, 0.5, 2.0 * v.coeffs - 0.5 * w.coeffs), lam)
        rhs = 2.0 * exponential_interpolant(v, lam).coeffs \
            - 0.5 * exponential_interpolant(w, lam).coeffs
        assert np.max(np.abs(lhs.coeffs - rhs)) <= 1e-12

    def test_negative_lambda_rejected(self, mesh11, rng):
        v = random_slab_polynomial(BrokenSpace(mesh11, 0), 0.0, 1.0, 1, rng)
        with pytest.raises(ValueError):
            exponential_interpolant(v, -1.0)


class TestInterpolantStability:
    def test_kt0_ratios_are_one(self, mesh11):
        space = BrokenSpace(mesh11, 1, components=2)
        rep = interpolant_stability_report(space, TimeGrid.uniform(1.0, 2),
                                           k_t=0, p=2.0, n_samples=3)
        assert rep.ratio_l2_radau == pytest.approx(1.0, abs=1e-13)
        assert rep.ratio_dg_dt == pytest.approx(1.0, abs=1e-13)
        assert rep.ratio_dg_radau == pytest.approx(1.0, abs=1e-13)
        assert rep.ratio_max_l2 == pytest.approx(1.0, abs=1e-13)

    def test_default_lambda_is_inverse_step(self, mesh11):
        space = BrokenSpace(mesh11, 1, components=2)
        rep = interpolant_stability_report(space, TimeGrid.uniform(1.0, 4),
                                           k_t=1, p=2.0, n_samples=2)
        assert rep.lam == pytest.approx(4.0)

    def test_ratios_bounded_across_tau(self, mesh11):
        space = BrokenSpace(mesh11, 1, components=2)
        for p in (2.0, 3.0):
            vals = []
            for n in (4, 8, 16):
                rep = interpolant_stability_report(
                    space, TimeGrid.uniform(1.0, n), k_t=1, p=p, n_samples=10)
                vals.append(max(rep.ratio_l2_radau, rep.ratio_dg_dt,
                                rep.ratio_dg_radau, rep.ratio_max_l2))
            assert max(vals) <= 1.2 * min(vals)


class TestTimeInverse:
    def test_kt0_is_one(self, mesh11):
        space = BrokenSpace(mesh11, 0)
        val = time_inverse_constant(space, TimeGrid.uniform(1.0, 2), 0, 5)
        assert val == pytest.approx(1.0, rel=1e-12)

    def test_linear_in_time_reference(self, mesh11):
        """r(t) = t on (0, 1]: sup = 1, integral = 1/3, so the ratio is 3."""
        from dgflow.time_dg import legendre_mass_diag, legendre_values, _dense_xis
        v = scalar_slab(mesh11, [0.5, 0.5])
        mass = legendre_mass_diag(1)
        flat = v.coeffs.reshape(2, -1)
        integral = 0.5 * float(np.sum(mass * np.sum(flat ** 2, axis=1)))
        xis = np.concatenate([[-1.0], _dense_xis()])
        vals = legendre_values(1, xis).T @ flat
        ratio = np.max(np.sum(vals ** 2, axis=1)) / integral
        assert ratio == pytest.approx(3.0, abs=1e-3)

    def test_kt2_bounded_across_tau(self, mesh11):
        space = BrokenSpace(mesh11, 0)
        vals = [time_inverse_constant(space, TimeGrid.uniform(1.0, n), 2, 20)
                for n in (2, 4, 8)]
        assert max(vals) <= 1.3 * min(vals)


class TestRadauMeasureInverse:
    @pytest.mark.parametrize("r,s", [(2.0, 3.0), (3.0, 2.0), (4.0, 2.0)])
    def test_constant_stable_under_refinement(self, r, s):
        consts = radau_measure_inverse_constant(2, r, s, [0.25, 0.125, 0.0625],
                                                n_samples=100)
        assert max(consts) <= 1.3 * min(consts)


class TestRadauEquivalence:
    def test_dg0_is_implicit_euler(self):
        rep = radau_equivalence_check(0, tau=0.1)
        assert rep.euler_err <= 1e-12
        assert rep.linear_max_err <= 1e-12
        assert rep.nonlinear_stage_gap <= 1e-12

    def test_dg1_matches_stability_function(self):
        zs = list(np.arange(-10.0, 0.0, 0.9)) + [-0.1, 0.1, 0.5, 1.0, 1.5, 2.0]
        for z in zs:
            _, u_end = dg_ode_slab_step(1, lambda t, u, z=z: z * u,
                                        lambda t, u, z=z: z, 1.0, 0.0, 1.0)
            expected = (1.0 + z / 3.0) / (1.0 - 2.0 * z / 3.0 + z * z / 6.0)
            assert abs(u_end - expected) <= 1e-10

    def test_dg1_hand_value(self):
        _, u_end = dg_ode_slab_step(1, lambda t, u: -u, lambda t, u: -1.0,
                                    1.0, 0.0, 1.0)
        assert u_end == pytest.approx(4.0 / 11.0, abs=1e-12)
        assert radau_iia_linear_step(1, -1.0) == pytest.approx(4.0 / 11.0,
                                                               abs=1e-13)

    def test_step_factor_at_zero(self):
        for k_t in (0, 1, 2):
            assert radau_iia_linear_step(k_t, 1e-14) == pytest.approx(1.0,
                                                                      abs=1e-12)

    def test_known_2stage_tableau(self):
        A, b, c = radau_iia_tableau(1)
        assert np.max(np.abs(c - [1.0 / 3.0, 1.0])) <= 1e-13
        assert np.max(np.abs(A - [[5.0 / 12.0, -1.0 / 12.0],
                                  [0.75, 0.25]])) <= 1e-13
        assert np.max(np.abs(b - [0.75, 0.25])) <= 1e-13

    @pytest.mark.parametrize("k_t", [0, 1, 2])
    def test_nonlinear_stage_equivalence(self, k_t):
        rep = radau_equivalence_check(k_t, tau=0.2)
        assert rep.nonlinear_stage_gap <= 1e-10
        assert rep.linear_max_err <= 1e-10

    def test_nonlinear_accuracy_improves_with_degree(self):
        errs = [radau_equivalence_check(k, tau=0.2).nonlinear_reference_err
                for k in (0, 1, 2)]
        assert errs[1] < errs[0] and errs[2] < errs[1]
