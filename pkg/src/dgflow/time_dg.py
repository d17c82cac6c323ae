"""Time machinery: quasi-uniform grids, right-sided Gauss-Radau rules and the
induced discrete time measure, slab polynomials over a broken space, the
exponential time interpolant, and the equivalence check against RadauIIA
Runge-Kutta steps.

Temporal polynomials use the Legendre modal basis on the reference interval
(-1, 1], mapped affinely to each slab (t_{j-1}, t_j]; slab functions are
left-continuous with a well-defined right limit at the slab start.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb, factorial

import numpy as np

from .space import BrokenSpace, DGField, dg_norm

MAX_TIME_DEGREE = 5


# -- grids and rules -----------------------------------------------------------

class TimeGrid:
    """Partition 0 = t_0 < ... < t_N = T with quasi-uniformity ratio theta."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 1 or len(pts) < 2:
            raise ValueError("need at least two partition points")
        steps = np.diff(pts)
        if np.any(steps <= 0):
            raise ValueError("partition points must strictly increase")
        if pts[0] != 0.0:
            raise ValueError("partition must start at t = 0")
        self.points = pts
        self.points.setflags(write=False)
        self.n_slabs = len(pts) - 1
        self.tau = float(steps.max())
        self.theta = float(steps.min() / steps.max())

    @classmethod
    def uniform(cls, T: float, n: int) -> "TimeGrid":
        return cls(np.linspace(0.0, T, n + 1))

    @property
    def final_time(self) -> float:
        return float(self.points[-1])

    def slab(self, j: int) -> tuple[float, float]:
        return float(self.points[j]), float(self.points[j + 1])


@dataclass(frozen=True)
class RadauRule:
    """Right-sided Gauss-Radau rule on (-1, 1], exact to degree 2*k_t."""

    k_t: int
    nodes: np.ndarray     # increasing, last node exactly 1
    weights: np.ndarray   # positive, sum 2

    def __post_init__(self):
        self.nodes.setflags(write=False)
        self.weights.setflags(write=False)

    def mapped(self, t0: float, t1: float):
        """Nodes/weights transported to the slab (t0, t1]."""
        mid, half = 0.5 * (t0 + t1), 0.5 * (t1 - t0)
        return mid + half * self.nodes, half * self.weights


def gauss_radau(k_t: int) -> RadauRule:
    """Nodes from the Legendre combination P_{k_t} - P_{k_t+1} (whose interior
    roots are the Radau abscissae), Newton-refined; weights from the moment
    system."""
    if k_t < 0:
        raise ValueError("time degree must be nonnegative")
    if k_t > MAX_TIME_DEGREE:
        raise ValueError(f"time degree capped at {MAX_TIME_DEGREE}")
    if k_t == 0:
        return RadauRule(0, np.array([1.0]), np.array([2.0]))
    coeffs = np.zeros(k_t + 2)
    coeffs[k_t] = 1.0
    coeffs[k_t + 1] = -1.0
    roots = np.polynomial.legendre.legroots(coeffs)
    roots = np.real(roots[np.abs(np.imag(roots)) < 1e-10]) \
        if np.iscomplexobj(roots) else roots
    interior = np.sort(roots[np.abs(roots - 1.0) > 1e-8])
    dcoeffs = np.polynomial.legendre.legder(coeffs)
    for _ in range(60):
        f = np.polynomial.legendre.legval(interior, coeffs)
        df = np.polynomial.legendre.legval(interior, dcoeffs)
        step = f / df
        interior = interior - step
        if np.max(np.abs(step)) < 1e-15:
            break
    nodes = np.concatenate([interior, [1.0]])
    vander = nodes[None, :] ** np.arange(k_t + 1)[:, None]
    moments = np.array([2.0 / (m + 1) if m % 2 == 0 else 0.0
                        for m in range(k_t + 1)])
    weights = np.linalg.solve(vander, moments)
    return RadauRule(k_t, nodes, weights)


def discrete_time_integral(f, grid: TimeGrid, rule: RadauRule) -> float:
    """Integral of f against the Gauss-Radau measure over the whole interval."""
    total = 0.0
    for j in range(grid.n_slabs):
        t0, t1 = grid.slab(j)
        nodes, weights = rule.mapped(t0, t1)
        total += float(sum(w * f(t) for t, w in zip(nodes, weights)))
    return total


# -- Legendre modal helpers ------------------------------------------------------

def legendre_values(k_t: int, xi: np.ndarray) -> np.ndarray:
    """Matrix L[i, q] = L_i(xi_q) for i = 0..k_t."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    out = np.empty((k_t + 1, len(xi)))
    for i in range(k_t + 1):
        e = np.zeros(i + 1)
        e[i] = 1.0
        out[i] = np.polynomial.legendre.legval(xi, e)
    return out


def legendre_stiffness(k_t: int) -> np.ndarray:
    """D[i, m] = integral over (-1,1) of L_i' L_m (exact integers)."""
    D = np.zeros((k_t + 1, k_t + 1))
    for i in range(k_t + 1):
        for m in range(i):
            if (i - m) % 2 == 1:
                D[i, m] = 2.0
    return D


def legendre_mass_diag(k_t: int) -> np.ndarray:
    return np.array([2.0 / (2 * i + 1) for i in range(k_t + 1)])


# -- slab polynomials -------------------------------------------------------------

class SlabPolynomial:
    """Degree-k_t temporal polynomial on a slab with DGField coefficients."""

    def __init__(self, space: BrokenSpace, t0: float, t1: float,
                 coeffs: np.ndarray, slab_index: int = 0):
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.ndim != 4 or coeffs.shape[1:] != (
                space.mesh.n_elements, space.components, space.n_scalar_basis):
            raise ValueError("coeffs must have shape (k_t+1, nE, m, nb)")
        if not t1 > t0:
            raise ValueError("empty slab")
        self.space = space
        self.t0 = float(t0)
        self.t1 = float(t1)
        self.coeffs = coeffs
        self.slab_index = slab_index

    @property
    def k_t(self) -> int:
        return self.coeffs.shape[0] - 1

    def xi(self, t: float) -> float:
        return (2.0 * t - self.t0 - self.t1) / (self.t1 - self.t0)

    def at_xi(self, xi: float) -> DGField:
        L = legendre_values(self.k_t, np.array([xi]))[:, 0]
        return DGField(self.space, np.tensordot(L, self.coeffs, axes=(0, 0)))

    def value_at(self, t: float) -> DGField:
        return self.at_xi(self.xi(t))

    def start_limit(self) -> DGField:
        """Right limit at the slab start t_{j-1}^+."""
        return self.at_xi(-1.0)

    def end_value(self) -> DGField:
        return self.at_xi(1.0)

    def modes(self) -> list[DGField]:
        return [DGField(self.space, c) for c in self.coeffs]


def random_slab_polynomial(space: BrokenSpace, t0: float, t1: float, k_t: int,
                           rng: np.random.Generator) -> SlabPolynomial:
    shape = (k_t + 1, space.mesh.n_elements, space.components, space.n_scalar_basis)
    return SlabPolynomial(space, t0, t1, rng.standard_normal(shape))


# -- exponential time interpolant ---------------------------------------------------

def _exp_monomial_moments(mu: float, n_max: int) -> np.ndarray:
    """I_n = integral over (-1,1) of x^n e^{-mu (x+1)} dx for n = 0..n_max.

    Series expansion for small mu, stable upward recurrence for larger mu.
    """
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    out = np.empty(n_max + 1)
    if mu <= 5.0:
        # e^{-mu(x+1)} = sum_m (-mu)^m (x+1)^m / m!
        n_terms = 60
        for n in range(n_max + 1):
            acc = 0.0
            for m in range(n_terms):
                # J = int x^n (x+1)^m dx over (-1, 1)
                J = sum(comb(m, k2) * (2.0 / (n + k2 + 1))
                        for k2 in range(m + 1) if (n + k2) % 2 == 0)
                acc += (-mu) ** m / factorial(m) * J
            out[n] = acc
        return out
    em = np.exp(-2.0 * mu)
    out[0] = (1.0 - em) / mu
    for n in range(1, n_max + 1):
        out[n] = ((-1.0) ** n - em) / mu + n / mu * out[n - 1]
    return out


def exponential_interpolant_matrix(k_t: int, mu: float) -> np.ndarray:
    """Legendre-coefficient matrix of the interpolant on the reference slab.

    The interpolant rbar of r matches r's right limit at the slab start and
    the moments of r e^{-mu (xi+1)} against polynomials of degree < k_t;
    ``mu`` is lambda times half the slab length.
    """
    n = k_t + 1
    A = np.zeros((n, n))
    B = np.zeros((n, n))
    signs = np.array([(-1.0) ** i for i in range(n)])
    A[0] = signs
    B[0] = signs
    if k_t == 0:
        return np.eye(1)
    moments = _exp_monomial_moments(mu, 2 * k_t)
    mass = legendre_mass_diag(k_t)
    for j in range(k_t):           # test function L_j
        A[j + 1, j] = mass[j]
        ej = np.zeros(j + 1)
        ej[j] = 1.0
        for m in range(n):
            em = np.zeros(m + 1)
            em[m] = 1.0
            prod = np.polynomial.legendre.legmul(ej, em)
            poly = np.polynomial.legendre.leg2poly(prod)
            B[j + 1, m] = float(np.dot(poly, moments[:len(poly)]))
    return np.linalg.solve(A, B)


def exponential_interpolant(v: SlabPolynomial, lam: float) -> SlabPolynomial:
    """Apply the interpolant coefficient-wise over the spatial basis."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    mu = 0.5 * lam * (v.t1 - v.t0)
    E = exponential_interpolant_matrix(v.k_t, mu)
    coeffs = np.tensordot(E, v.coeffs, axes=(1, 0))
    return SlabPolynomial(v.space, v.t0, v.t1, coeffs, v.slab_index)


# -- stability measurements -----------------------------------------------------------

@dataclass(frozen=True)
class InterpolantStabilityReport:
    p: float
    k_t: int
    lam: float
    tau: float
    n_samples: int
    seed: int | None
    ratio_l2_radau: float    # L2-in-space seminorm under the Radau measure
    ratio_dg_dt: float       # broken-norm integral under dt
    ratio_dg_radau: float    # broken-norm integral under the Radau measure
    ratio_max_l2: float      # max-in-time L2 ratio


def _dense_xis(n_inner: int = 64) -> np.ndarray:
    return np.concatenate([-1.0 + 2.0 * np.arange(1, n_inner + 1) / n_inner, [1.0]])


def interpolant_stability_report(space: BrokenSpace, grid: TimeGrid, k_t: int,
                                 p: float, lam: float | None = None,
                                 n_samples: int = 40,
                                 seed: int | None = 0) -> InterpolantStabilityReport:
    """Max measured left/right ratios of the interpolant stability bounds.

    ``lam`` defaults to the inverse maximal time step, the choice made in the
    stability argument.
    """
    if p <= 1.0:
        raise ValueError("p must exceed 1")
    rule = gauss_radau(k_t)
    lam_eff = (1.0 / grid.tau) if lam is None else lam
    rng = np.random.default_rng(seed)
    gauss = np.polynomial.legendre.leggauss(k_t + 6)
    dense = _dense_xis()
    flavor = "sym" if space.components == 2 else "gradient"
    r1 = r2 = r3 = r4 = 0.0
    for j in range(grid.n_slabs):
        t0, t1 = grid.slab(j)
        for _ in range(n_samples):
            v = random_slab_polynomial(space, t0, t1, k_t, rng)
            vb = exponential_interpolant(v, lam_eff)

            def l2s(sp, xis):
                return np.array([sp.at_xi(x).l2_norm() for x in xis])

            def dgs(sp, xis):
                return np.array([dg_norm(sp.at_xi(x), p, flavor) for x in xis])

            w_r = rule.weights
            r1 = max(r1, (np.sum(w_r * l2s(vb, rule.nodes) ** p)
                          / np.sum(w_r * l2s(v, rule.nodes) ** p)) ** (1 / p))
            w_g = gauss[1]
            r2 = max(r2, (np.sum(w_g * dgs(vb, gauss[0]) ** p)
                          / np.sum(w_g * dgs(v, gauss[0]) ** p)) ** (1 / p))
            r3 = max(r3, (np.sum(w_r * dgs(vb, rule.nodes) ** p)
                          / np.sum(w_r * dgs(v, rule.nodes) ** p)) ** (1 / p))
            r4 = max(r4, np.max(l2s(vb, dense)) / np.max(l2s(v, dense)))
    return InterpolantStabilityReport(p=p, k_t=k_t, lam=lam_eff, tau=grid.tau,
                                      n_samples=n_samples, seed=seed,
                                      ratio_l2_radau=r1, ratio_dg_dt=r2,
                                      ratio_dg_radau=r3, ratio_max_l2=r4)


def time_inverse_constant(space: BrokenSpace, grid: TimeGrid, k_t: int,
                          n_samples: int = 50, seed: int | None = 0) -> float:
    """Max of tau * sup_t ||v||_L2^2 / integral ||v||_L2^2 dt over samples.

    The time integral is exact (Legendre mass); the sup is a dense sample
    over 64 interior points plus the endpoints.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    mass = legendre_mass_diag(k_t)
    dense = np.concatenate([[-1.0], _dense_xis()])
    L = legendre_values(k_t, dense)
    worst = 0.0
    for j in range(grid.n_slabs):
        t0, t1 = grid.slab(j)
        half = 0.5 * (t1 - t0)
        for _ in range(n_samples):
            v = random_slab_polynomial(space, t0, t1, k_t, rng)
            flat = v.coeffs.reshape(k_t + 1, -1)
            integral = half * float(np.sum(mass * np.sum(flat ** 2, axis=1)))
            vals = L.T @ flat
            sup2 = float(np.max(np.sum(vals ** 2, axis=1)))
            worst = max(worst, grid.tau * sup2 / integral)
    return worst


def radau_measure_inverse_constant(k_t: int, r: float, s: float, taus,
                                   n_samples: int = 200,
                                   seed: int | None = 0) -> list[float]:
    """Measured constants of the Radau-measure norm comparison
    (int |g|^r)^{1/r} <= C tau^{(s-r)/(rs)} (int |g|^s)^{1/s}, one per tau.

    The exponent (s-r)/(rs) is the one produced by the Hoelder step of the
    comparison argument; with it the measured constant is tau-independent.
    """
    rng = np.random.default_rng(seed)
    rule = gauss_radau(k_t)
    out = []
    for tau in taus:
        half = 0.5 * tau
        w = half * rule.weights
        L = legendre_values(k_t, rule.nodes)
        worst = 0.0
        for _ in range(n_samples):
            c = rng.standard_normal(k_t + 1)
            g = np.abs(c @ L)
            lhs = float(np.sum(w * g ** r) ** (1 / r))
            rhs = float(np.sum(w * g ** s) ** (1 / s))
            worst = max(worst, lhs / (tau ** ((s - r) / (r * s)) * rhs))
        out.append(worst)
    return out


# -- RadauIIA equivalence ---------------------------------------------------------------

def radau_iia_tableau(k_t: int):
    """Collocation tableau at the Radau nodes: A_ij = int_0^{c_i} ell_j."""
    rule = gauss_radau(k_t)
    c = 0.5 * (rule.nodes + 1.0)
    n = k_t + 1
    A = np.zeros((n, n))
    for jj in range(n):
        pts = np.delete(np.arange(n), jj)
        num = np.poly1d([1.0])
        den = 1.0
        for m in pts:
            num *= np.poly1d([1.0, -c[m]])
            den *= c[jj] - c[m]
        ell = num / den
        anti = np.polyint(ell)
        for ii in range(n):
            A[ii, jj] = anti(c[ii]) - anti(0.0)
    b = A[-1].copy()  # stiffly accurate: c_last = 1
    return A, b, c


def radau_iia_linear_step(k_t: int, z: complex) -> complex:
    """Stability function R(z) = 1 + z b^T (I - z A)^{-1} 1."""
    A, b, _ = radau_iia_tableau(k_t)
    n = len(b)
    y = np.linalg.solve(np.eye(n) - z * A, np.ones(n))
    return 1.0 + z * float(b @ y) if np.isrealobj(np.asarray(z)) else 1.0 + z * (b @ y)


def dg_ode_slab_step(k_t: int, f, dfdu, u_prev: float, t0: float, t1: float,
                     newton_tol: float = 1e-14, max_iter: int = 60):
    """One slab of the dG(k_t) method with Radau quadrature for u' = f(t, u).

    Returns (stage values at the transported Radau nodes, end value).
    """
    rule = gauss_radau(k_t)
    nodes, weights = rule.mapped(t0, t1)
    D = legendre_stiffness(k_t)
    L_nodes = legendre_values(k_t, rule.nodes)
    signs = np.array([(-1.0) ** i for i in range(k_t + 1)])
    c = np.zeros(k_t + 1)
    c[0] = u_prev

    def residual(cv):
        u_nodes = cv @ L_nodes
        res = D.T @ cv + signs * (float(cv @ signs) - u_prev)
        res -= L_nodes @ (weights * np.array([f(t, u) for t, u in
                                              zip(nodes, u_nodes)]))
        return res, u_nodes

    for _ in range(max_iter):
        res, u_nodes = residual(c)
        if np.max(np.abs(res)) < newton_tol * (1.0 + abs(u_prev)):
            break
        J = D.T + np.outer(signs, signs)
        dfu = np.array([dfdu(t, u) for t, u in zip(nodes, u_nodes)])
        J = J - L_nodes @ (np.diag(weights * dfu) @ L_nodes.T)
        c = c - np.linalg.solve(J, res)
    res, u_nodes = residual(c)
    return u_nodes, float(c @ legendre_values(k_t, np.array([1.0]))[:, 0])


def radau_iia_ode_step(k_t: int, f, dfdu, u_prev: float, t0: float, t1: float,
                       newton_tol: float = 1e-14, max_iter: int = 60):
    """One RadauIIA Runge-Kutta step (collocation oracle path)."""
    A, b, cnodes = radau_iia_tableau(k_t)
    h = t1 - t0
    n = len(b)
    U = np.full(n, u_prev)
    for _ in range(max_iter):
        F = np.array([f(t0 + cnodes[i] * h, U[i]) for i in range(n)])
        res = U - u_prev - h * A @ F
        if np.max(np.abs(res)) < newton_tol * (1.0 + abs(u_prev)):
            break
        dF = np.array([dfdu(t0 + cnodes[i] * h, U[i]) for i in range(n)])
        J = np.eye(n) - h * A @ np.diag(dF)
        U = U - np.linalg.solve(J, res)
    F = np.array([f(t0 + cnodes[i] * h, U[i]) for i in range(n)])
    return U, float(u_prev + h * b @ F)


@dataclass(frozen=True)
class RadauEquivalenceReport:
    k_t: int
    z_values: tuple
    linear_max_err: float          # dG step factor vs stability function
    euler_err: float | None        # k_t = 0 vs implicit Euler closed form
    nonlinear_stage_gap: float     # dG vs RadauIIA stages, u' = -u^2
    nonlinear_reference_err: float  # dG end value vs exact 1/(1+t)


def radau_equivalence_check(k_t: int, z_values=None,
                            tau: float = 0.1) -> RadauEquivalenceReport:
    if z_values is None:
        z_values = (-10.0, -8.0, -6.0, -4.0, -2.0, -1.0, -0.5, -0.1,
                    0.1, 0.5, 1.0, 1.5, 2.0)
    lin_err = 0.0
    for z in z_values:
        lam = z  # step of size 1
        try:
            Rz = radau_iia_linear_step(k_t, z)
            _, u_end = dg_ode_slab_step(k_t, lambda t, u: lam * u,
                                        lambda t, u: lam, 1.0, 0.0, 1.0)
        except np.linalg.LinAlgError:
            continue  # z at a pole of the stability function
        lin_err = max(lin_err, abs(u_end - Rz))
    euler_err = None
    if k_t == 0:
        _, u_end = dg_ode_slab_step(0, lambda t, u: -u, lambda t, u: -1.0,
                                    1.0, 0.0, tau)
        euler_err = abs(u_end - 1.0 / (1.0 + tau))
    f = (lambda t, u: -u * u)
    df = (lambda t, u: -2.0 * u)
    stages_dg, end_dg = dg_ode_slab_step(k_t, f, df, 1.0, 0.0, tau)
    stages_rk, end_rk = radau_iia_ode_step(k_t, f, df, 1.0, 0.0, tau)
    gap = max(float(np.max(np.abs(stages_dg - stages_rk))), abs(end_dg - end_rk))
    ref = abs(end_dg - 1.0 / (1.0 + tau))
    return RadauEquivalenceReport(k_t=k_t, z_values=tuple(z_values),
                                  linear_max_err=lin_err, euler_err=euler_err,
                                  nonlinear_stage_gap=gap,
                                  nonlinear_reference_err=ref)
