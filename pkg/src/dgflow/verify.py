"""Measurement harness: a-priori and max-in-time stability reports for
trajectories, inf-sup estimation, and the inequality-constant sweeps
(Poincare, Korn, Gagliardo-Nirenberg, discrete-gradient and interpolant
stability, parabolic interpolation) across refinement ladders.

Constants are measured, never assumed: each sweep records the seed, sample
count and refinement ladder, and reports the max ratio per level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .assembly import ProblemConfig, SpatialOperators, Trajectory, \
    SlabSystem, run_simulation, _grad_sym_eval_matrix
from .calculus import check_gn_admissible, gn_ratio, quasi_interpolate, embed
from .mesh import Mesh, build_structured_mesh
from .space import BrokenSpace, DGField, dg_norm, lebesgue_norm, project_l2
from .time_dg import (TimeGrid, SlabPolynomial, gauss_radau, legendre_values,
                      random_slab_polynomial)

SPACE_DIM = 2


# -- trajectory reports ------------------------------------------------------------

@dataclass(frozen=True)
class StabilityReport:
    """Measured left-hand quantities of the discrete energy estimate plus
    the data norms on its right-hand side."""

    h: float
    tau: float
    p: float
    max_partition_l2_sq: float
    jump_sum_sq: float
    pressure_stab_integral: float
    stress_norm_integral: float
    dg_norm_integral: float
    linf_l2_sampled: float
    initial_l2: float
    forcing_c0_lpprime: float

    def quantities(self) -> dict:
        return {
            "max_partition_l2_sq": self.max_partition_l2_sq,
            "jump_sum_sq": self.jump_sum_sq,
            "pressure_stab_integral": self.pressure_stab_integral,
            "stress_norm_integral": self.stress_norm_integral,
            "dg_norm_integral": self.dg_norm_integral,
            "linf_l2_sampled": self.linf_l2_sampled,
        }


def _slab_nodes(traj: Trajectory, j: int):
    s = traj.slabs[j]
    sys = SlabSystem(traj.ops, s.t0, s.t1, np.zeros(traj.ops.NV), j)
    return sys


def apriori_report(traj: Trajectory, samples_per_slab: int = 64) -> StabilityReport:
    """Evaluate every energy-estimate quantity with the measures used by the
    discretisation (the Radau measure in quadrature mode)."""
    ops = traj.ops
    cfg = traj.config
    p = cfg.p
    ends = traj.end_values()
    max_l2_sq = float(max((e @ e for e in ends), default=0.0))
    jumps = traj.jumps()
    jump_sq = float(sum(jv @ jv for jv in jumps))
    pstab = stress = dgint = 0.0
    for j, s in enumerate(traj.slabs):
        sys = _slab_nodes(traj, j)
        for l, w in enumerate(sys.w_nodes):
            Ul = sys.L_nodes[:, l] @ s.U
            dgl = dg_norm(DGField.from_flat(ops.V, Ul), p, "sym", cfg.quad_bump)
            dgint += w * dgl ** p
            stress += w * ops.stress_norm_power(Ul)
            if s.P is not None:
                Pl = sys.L_nodes[:, l] @ s.P
                pstab += w * ops.pressure_stab_form(Pl, Pl)
    linf = linfty_l2_report(traj, samples_per_slab).sampled_sup
    u0_l2 = lebesgue_norm(project_l2(ops.V, cfg.initial,
                                     ops.ex_vol + 4), 2.0)
    pprime = cfg.law.p_prime
    tgrid = np.linspace(0.0, traj.grid.final_time, 4 * traj.grid.n_slabs + 1)
    fnorm = 0.0
    fspace = BrokenSpace(ops.mesh, cfg.k_u + 1, components=2)
    for t in tgrid:
        ffield = project_l2(fspace, lambda pts: cfg.forcing(t, pts))
        fnorm = max(fnorm, lebesgue_norm(ffield, pprime))
    return StabilityReport(
        h=ops.mesh.max_mesh_size, tau=traj.grid.tau, p=p,
        max_partition_l2_sq=max_l2_sq, jump_sum_sq=jump_sq,
        pressure_stab_integral=pstab, stress_norm_integral=stress,
        dg_norm_integral=dgint, linf_l2_sampled=linf,
        initial_l2=u0_l2, forcing_c0_lpprime=fnorm)


@dataclass(frozen=True)
class LinfL2Report:
    sampled_sup: float
    partition_max: float
    slab_profile: tuple
    interior_exceeds: bool
    theorem_applies: bool


def linfty_l2_report(traj: Trajectory, samples_per_slab: int = 64) -> LinfL2Report:
    """Densely sampled sup_t of the spatial L2 norm over (0, T].

    Sampling covers equispaced interior points, the Radau nodes and the slab
    endpoint of each slab; flags whether the interior of any slab exceeds the
    partition-point maximum (the effect the stability theorem controls).
    """
    cfg = traj.config
    k_t = cfg.k_t
    rule = gauss_radau(k_t)
    xis = np.unique(np.concatenate([
        -1.0 + 2.0 * np.arange(1, samples_per_slab + 1) / samples_per_slab,
        rule.nodes]))
    L = legendre_values(k_t, xis)
    profile = []
    for s in traj.slabs:
        vals = L.T @ s.U
        profile.append(float(np.max(np.linalg.norm(vals, axis=1))))
    ends = traj.end_values()
    partition_max = float(max((np.linalg.norm(e) for e in ends), default=0.0))
    sup = max(profile, default=0.0)
    applies = cfg.p >= (3 * SPACE_DIM + 2) / (SPACE_DIM + 2) or k_t == 0
    return LinfL2Report(sampled_sup=float(sup), partition_max=partition_max,
                        slab_profile=tuple(profile),
                        interior_exceeds=bool(sup > partition_max * (1 + 1e-12)),
                        theorem_applies=applies)


def energy_balance_defect(traj: Trajectory) -> float:
    """Max relative defect of the per-slab energy identity
    (time + jump + viscous + pressure-stab = forcing)."""
    ops = traj.ops
    worst = 0.0
    uprev = traj.u0
    for j, s in enumerate(traj.slabs):
        sys = _slab_nodes(traj, j)
        u_start = sys.signs @ s.U
        u_end = s.U.sum(axis=0)
        e_time = 0.5 * (u_end @ u_end - u_start @ u_start)
        e_jump = (u_start - uprev) @ u_start
        e_visc = e_pstab = e_force = 0.0
        for l, (w, t) in enumerate(zip(sys.w_nodes, sys.t_nodes)):
            Ul = sys.L_nodes[:, l] @ s.U
            e_visc += w * ops.viscous_form(Ul, Ul)
            e_force += w * (ops.forcing_vector(t) @ Ul)
            if s.P is not None:
                Pl = sys.L_nodes[:, l] @ s.P
                e_pstab += w * ops.pressure_stab_form(Pl, Pl)
        scale = max(abs(e_time), abs(e_jump), abs(e_visc), abs(e_force), 1e-30)
        worst = max(worst, abs(e_time + e_jump + e_visc + e_pstab - e_force) / scale)
        uprev = u_end
    return worst


# -- refinement studies ---------------------------------------------------------------

@dataclass(frozen=True)
class LadderLevel:
    level: int
    h: float
    tau: float
    report: StabilityReport
    linf: LinfL2Report


def run_refinement_study(config: ProblemConfig, levels: int = 3,
                         base_n: int = 2, base_slabs: int = 4,
                         pattern: str = "right-diagonal") -> list[LadderLevel]:
    """Solve the same problem on nested (h, tau) refinements."""
    out = []
    for lvl in range(levels):
        n = base_n * 2 ** lvl
        mesh = build_structured_mesh(n, n, pattern)
        grid = TimeGrid.uniform(config.final_time, base_slabs * 2 ** lvl)
        traj = run_simulation(mesh, grid, config)
        rep = apriori_report(traj)
        linf = linfty_l2_report(traj)
        out.append(LadderLevel(lvl, mesh.max_mesh_size, grid.tau, rep, linf))
    return out


# -- constant sweeps ---------------------------------------------------------------------

@dataclass(frozen=True)
class SweepLevel:
    level: int
    h: float
    tau: float
    max_ratio: float


@dataclass(frozen=True)
class ConstantSweep:
    inequality: str
    p: float | None
    q: float | None
    s: float | None
    gamma: float | None
    alpha: float | None
    levels: tuple
    samples: int
    seed: int

    def ratios(self) -> list[float]:
        return [lv.max_ratio for lv in self.levels]

    def drift(self) -> float:
        r = self.ratios()
        return max(r) / min(r) if min(r) > 0 else float("inf")


def _ladder_meshes(levels: int, base_n: int = 2,
                   pattern: str = "right-diagonal") -> list[Mesh]:
    return [build_structured_mesh(base_n * 2 ** lv, base_n * 2 ** lv, pattern)
            for lv in range(levels)]


def _sweep(name, meshes, per_level, samples, seed, taus=None, **params):
    levels = []
    for lv, mesh in enumerate(meshes):
        tau = taus[lv] if taus is not None else 0.0
        levels.append(SweepLevel(lv, mesh.max_mesh_size if mesh is not None
                                 else 0.0, tau, per_level(lv, mesh)))
    return ConstantSweep(inequality=name, p=params.get("p"), q=params.get("q"),
                         s=params.get("s"), gamma=params.get("gamma"),
                         alpha=params.get("alpha"), levels=tuple(levels),
                         samples=samples, seed=seed)


def poincare_sweep(degree: int, p: float, levels: int = 3, samples: int = 100,
                   seed: int = 1234, base_n: int = 2) -> ConstantSweep:
    meshes = _ladder_meshes(levels, base_n)

    def measure(lv, mesh):
        space = BrokenSpace(mesh, degree)
        rng = np.random.default_rng(seed + lv)
        return max(lebesgue_norm(v, p) / dg_norm(v, p)
                   for v in (space.random_field(rng) for _ in range(samples)))

    return _sweep("poincare", meshes, measure, samples, seed, p=p)


def broken_gradient_norm(v: DGField, p: float) -> float:
    tab = v.space.volume_tables(2 * v.space.degree + 3)
    grads = np.einsum("ecb,eqbd->eqcd", v.coefficients, tab.grads)
    mag = np.sqrt(np.sum(grads ** 2, axis=(2, 3)))
    return float(np.sum(tab.weights * mag ** p) ** (1.0 / p))


def korn_sweep(degree: int, p: float, levels: int = 3, samples: int = 100,
               seed: int = 1234, base_n: int = 2) -> ConstantSweep:
    meshes = _ladder_meshes(levels, base_n)

    def measure(lv, mesh):
        space = BrokenSpace(mesh, degree, components=2)
        rng = np.random.default_rng(seed + lv)
        best = 0.0
        for _ in range(samples):
            v = space.random_field(rng)
            best = max(best, (lebesgue_norm(v, p) + broken_gradient_norm(v, p))
                       / dg_norm(v, p, "sym"))
        return best

    return _sweep("korn", meshes, measure, samples, seed, p=p)


def gn_sweep(degree: int, p: float, q: float, s: float, levels: int = 3,
             samples: int = 100, seed: int = 1234, base_n: int = 2) -> ConstantSweep:
    gamma = check_gn_admissible(p, q, s)
    meshes = _ladder_meshes(levels, base_n)

    def measure(lv, mesh):
        space = BrokenSpace(mesh, degree)
        rng = np.random.default_rng(seed + lv)
        return max(gn_ratio(space.random_field(rng), p, q, s)
                   for _ in range(samples))

    return _sweep("gagliardo_nirenberg", meshes, measure, samples, seed,
                  p=p, q=q, s=s, gamma=gamma)


def gradient_stability_sweep(degree: int, l: int, p: float, levels: int = 3,
                             samples: int = 100, seed: int = 1234,
                             base_n: int = 2) -> ConstantSweep:
    from .calculus import discrete_gradient
    meshes = _ladder_meshes(levels, base_n)

    def measure(lv, mesh):
        space = BrokenSpace(mesh, degree, components=2)
        rng = np.random.default_rng(seed + lv)
        best = 0.0
        for _ in range(samples):
            v = space.random_field(rng)
            best = max(best, lebesgue_norm(discrete_gradient(v, l), p)
                       / dg_norm(v, p, "sym"))
        return best

    return _sweep("gradient_stability", meshes, measure, samples, seed, p=p)


# -- quasi-interpolant sweeps -------------------------------------------------------------

def _patch_data(mesh: Mesh):
    """Element patches (vertex neighbours) and their incident faces."""
    vert_to_elems = [[] for _ in range(mesh.n_vertices)]
    for e, tri in enumerate(mesh.elements):
        for v in tri:
            vert_to_elems[v].append(e)
    patches = []
    for e, tri in enumerate(mesh.elements):
        patch = set()
        for v in tri:
            patch.update(vert_to_elems[v])
        patches.append(sorted(patch))
    elem_ifaces = [[] for _ in range(mesh.n_elements)]
    for f, face in enumerate(mesh.interior_faces):
        elem_ifaces[face.left].append(f)
        elem_ifaces[face.right].append(f)
    elem_bfaces = [[] for _ in range(mesh.n_elements)]
    for f, face in enumerate(mesh.boundary_faces):
        elem_bfaces[face.owner].append(f)
    return patches, elem_ifaces, elem_bfaces


def _local_norm_pieces(v: DGField, p: float):
    """Per-element p-power of the broken gradient and per-face jump powers."""
    space = v.space
    ex = 2 * space.degree + 3
    tab = space.volume_tables(ex)
    grads = np.einsum("ecb,eqbd->eqcd", v.coefficients, tab.grads)
    mag = np.sqrt(np.sum(grads ** 2, axis=(2, 3)))
    grad_pow = np.sum(tab.weights * mag ** p, axis=1)
    ft = space.face_tables(ex)
    c = v.coefficients
    ji = np.einsum("fcb,fqb->fqc", c[ft.i_left], ft.i_trace_left) \
        - np.einsum("fcb,fqb->fqc", c[ft.i_right], ft.i_trace_right)
    jb = np.einsum("fcb,fqb->fqc", c[ft.b_owner], ft.b_trace)
    iface_pow = np.sum(ft.i_weights * ft.i_h[:, None] ** (1.0 - p)
                       * np.linalg.norm(ji, axis=2) ** p, axis=1) \
        if ji.size else np.zeros(0)
    bface_pow = np.sum(ft.b_weights * ft.b_h[:, None] ** (1.0 - p)
                       * np.linalg.norm(jb, axis=2) ** p, axis=1) \
        if jb.size else np.zeros(0)
    return grad_pow, iface_pow, bface_pow


def _element_ls_norms(v: DGField, s: float) -> np.ndarray:
    tab = v.space.volume_tables(2 * v.space.degree + 3)
    vals = v.values_at_tables(tab.values)
    mag = np.linalg.norm(vals, axis=2)
    return np.sum(tab.weights * mag ** s, axis=1) ** (1.0 / s)


def quasi_interp_stability_sweep(degree: int, p: float, levels: int = 3,
                                 samples: int = 100, seed: int = 1234,
                                 base_n: int = 2) -> ConstantSweep:
    """Gradient stability of the vertex-averaging interpolant."""
    meshes = _ladder_meshes(levels, base_n)

    def measure(lv, mesh):
        space = BrokenSpace(mesh, degree)
        rng = np.random.default_rng(seed + lv)
        best = 0.0
        for _ in range(samples):
            v = space.random_field(rng)
            best = max(best, quasi_interpolate(v).grad_lp_norm(p) / dg_norm(v, p))
        return best

    return _sweep("quasi_interp_stability", meshes, measure, samples, seed, p=p)


def quasi_interp_approx_sweep(degree: int, p: float, s: float, levels: int = 3,
                              samples: int = 100, seed: int = 1234,
                              base_n: int = 2) -> ConstantSweep:
    """Localized approximation bound of the vertex-averaging interpolant."""
    meshes = _ladder_meshes(levels, base_n)

    def measure(lv, mesh):
        space = BrokenSpace(mesh, degree)
        target = BrokenSpace(mesh, max(degree, 1))
        patches, elem_ifaces, elem_bfaces = _patch_data(mesh)
        rng = np.random.default_rng(seed + lv)
        hK = mesh.element_diameters
        expo = 1.0 + SPACE_DIM * (1.0 / s - 1.0 / p)
        best = 0.0
        for _ in range(samples):
            v = space.random_field(rng)
            diff = embed(v, target) - quasi_interpolate(v).to_dgfield(target)
            err_K = _element_ls_norms(diff, s)
            grad_pow, if_pow, bf_pow = _local_norm_pieces(v, p)
            for K in range(mesh.n_elements):
                faces_i, faces_b = set(), set()
                for e in patches[K]:
                    faces_i.update(elem_ifaces[e])
                    faces_b.update(elem_bfaces[e])
                loc = sum(grad_pow[e] for e in patches[K]) \
                    + sum(if_pow[f] for f in faces_i) \
                    + sum(bf_pow[f] for f in faces_b)
                denom = hK[K] ** expo * loc ** (1.0 / p)
                if denom > 0:
                    best = max(best, err_K[K] / denom)
        return best

    return _sweep("quasi_interp_approximation", meshes, measure, samples, seed,
                  p=p, s=s)


def quasi_interp_lp_sweep(degree: int, p: float, levels: int = 3,
                          samples: int = 100, seed: int = 1234,
                          base_n: int = 2) -> ConstantSweep:
    """L^p stability of the interpolant and of its approximation error."""
    meshes = _ladder_meshes(levels, base_n)

    def measure(lv, mesh):
        space = BrokenSpace(mesh, degree)
        target = BrokenSpace(mesh, max(degree, 1))
        rng = np.random.default_rng(seed + lv)
        best = 0.0
        for _ in range(samples):
            v = space.random_field(rng)
            qv = quasi_interpolate(v).to_dgfield(target)
            diff = embed(v, target) - qv
            best = max(best, (lebesgue_norm(qv, p) + lebesgue_norm(diff, p))
                       / lebesgue_norm(v, p))
        return best

    return _sweep("quasi_interp_lp_stability", meshes, measure, samples, seed, p=p)


# -- parabolic interpolation ---------------------------------------------------------------

def _random_spacetime(space, grid, k_t, rng) -> list[SlabPolynomial]:
    return [random_slab_polynomial(space, *grid.slab(j), k_t, rng)
            for j in range(grid.n_slabs)]


def _time_lp_of_spatial(slabs, grid, k_t, power, spatial_fn, measure):
    """(sum_j int_{I_j} spatial_fn(v(t))^power)^(1/power) under dt or Radau."""
    if measure == "radau":
        rule = gauss_radau(k_t)
        xi, w_ref = rule.nodes, rule.weights
    else:
        xi, w_ref = np.polynomial.legendre.leggauss(k_t + 6)
    total = 0.0
    for j, sp_ in enumerate(slabs):
        half = 0.5 * (sp_.t1 - sp_.t0)
        for x, w in zip(xi, w_ref):
            total += half * w * spatial_fn(sp_.at_xi(x)) ** power
    return total ** (1.0 / power)


def _linf_of_spatial(slabs, k_t, spatial_fn, n_inner: int = 32) -> float:
    xis = np.concatenate([-1.0 + 2.0 * np.arange(1, n_inner + 1) / n_inner, [1.0]])
    xis = np.unique(np.concatenate([xis, gauss_radau(k_t).nodes]))
    return max(spatial_fn(sp_.at_xi(x)) for sp_ in slabs for x in xis)


def parabolic_ratio(slabs, grid, k_t, p, q, s, measure="dt",
                    quad_bump: int = 3) -> float:
    """Measured constant of the space-time interpolation bound."""
    gamma = check_gn_admissible(p, q, s)
    if s == q:
        num = _linf_of_spatial(slabs, k_t, lambda f: lebesgue_norm(f, s))
        den = _linf_of_spatial(slabs, k_t, lambda f: lebesgue_norm(f, q))
        return num / den
    r = s * (p * (q + SPACE_DIM) - SPACE_DIM * q) / ((s - q) * SPACE_DIM)
    num = _time_lp_of_spatial(slabs, grid, k_t, r,
                              lambda f: lebesgue_norm(f, s), measure)
    den1 = _time_lp_of_spatial(slabs, grid, k_t, p,
                               lambda f: dg_norm(f, p, "gradient", quad_bump),
                               measure)
    den2 = _linf_of_spatial(slabs, k_t, lambda f: lebesgue_norm(f, q))
    return num / (den1 ** gamma * den2 ** (1.0 - gamma))


def parabolic_interpolation_sweep(degree: int, k_t: int, p: float,
                                  levels: int = 3, samples: int = 100,
                                  seed: int = 1234, base_n: int = 2,
                                  base_slabs: int = 2, measure: str = "dt",
                                  final_time: float = 1.0) -> ConstantSweep:
    """Bound of the space-time embedding with q = 2 and s = r = p(d+2)/d,
    the specialization entering the velocity stability argument."""
    q = 2.0
    s = p * (SPACE_DIM + 2) / SPACE_DIM
    gamma = SPACE_DIM / (SPACE_DIM + 2.0)
    meshes = _ladder_meshes(levels, base_n)
    taus = [final_time / (base_slabs * 2 ** lv) for lv in range(levels)]

    def measure_level(lv, mesh):
        space = BrokenSpace(mesh, degree)
        grid = TimeGrid.uniform(final_time, base_slabs * 2 ** lv)
        rng = np.random.default_rng(seed + lv)
        best = 0.0
        for _ in range(samples):
            slabs = _random_spacetime(space, grid, k_t, rng)
            best = max(best, parabolic_ratio(slabs, grid, k_t, p, q, s, measure))
        return best

    return _sweep(f"parabolic_interpolation_{measure}", meshes, measure_level,
                  samples, seed, taus=taus, p=p, q=q, s=s, gamma=gamma)


# -- inf-sup estimation -----------------------------------------------------------------

def _velocity_norm_gram(V: BrokenSpace, alpha_free_ops) -> np.ndarray:
    """Dense Gram matrix of the squared h,2 velocity norm (symmetric-gradient
    flavor plus unweighted jump penalization)."""
    ex = 2 * V.degree
    Dmat = _grad_sym_eval_matrix(V, ex)
    w = V.volume_tables(ex).weights.reshape(-1)
    W4 = np.repeat(w, 4)
    Xvol = (Dmat.T @ (Dmat.multiply(W4[:, None]))).toarray()
    Xjump = alpha_free_ops.velocity_stab_jacobian(np.zeros(V.global_dof_count))
    return Xvol + Xjump.toarray()


def _mean_zero_basis(mvec: np.ndarray) -> np.ndarray:
    return sla.null_space(mvec[None, :])


@dataclass(frozen=True)
class InfSupEstimate:
    p: float
    value: float
    dense: bool
    stabilized: bool
    h: float


def estimate_infsup_dense(mesh: Mesh, k_u: int, k_pi: int,
                          stabilized: bool = True,
                          max_elements: int = 512) -> InfSupEstimate:
    """Smallest generalized singular value of the discrete divergence pairing
    augmented by the pressure stabilisation, p = 2 only."""
    if mesh.n_elements > max_elements:
        raise ValueError(f"mesh with {mesh.n_elements} elements exceeds the "
                         f"dense-path cap {max_elements}; use the p=2 dense "
                         f"mode on a coarser mesh or the ascent estimate")
    from .constitutive import ConstitutiveLaw
    cfg = ProblemConfig(law=ConstitutiveLaw("newtonian"), k_u=k_u, k_pi=k_pi,
                        alpha=1.0)
    ops = SpatialOperators(mesh, cfg)
    X = _velocity_norm_gram(ops.V, ops)
    B = ops.B.toarray()
    Z = _mean_zero_basis(ops.mvec)
    BtZ = B.T @ Z
    Y = sla.solve(X, BtZ, assume_a="pos")
    A = BtZ.T @ Y
    if stabilized:
        Spi = ops.pressure_stab_jacobian(np.zeros(ops.NM)).toarray()
        A = A + Z.T @ Spi @ Z
    eigvals = sla.eigvalsh(A)
    return InfSupEstimate(p=2.0, value=float(np.sqrt(max(eigvals[0], 0.0))),
                          dense=True, stabilized=stabilized,
                          h=mesh.max_mesh_size)


def _dg_norm_power_gradient(ops: SpatialOperators, w: np.ndarray,
                            p: float) -> np.ndarray:
    """Gradient of |w|_{h,p}^p (symmetric-gradient flavor, unit jump weight)."""
    Dmat = ops._infsup_Dmat
    vals = (Dmat @ w).reshape(-1, 4)
    mag2 = np.sum(vals ** 2, axis=1)
    flux = ops._infsup_wq[:, None] * np.where(mag2 > 0, mag2, 1.0)[:, None] \
        ** (0.5 * p - 1.0) * vals
    grad = p * (Dmat.T @ flux.reshape(-1))
    grad = grad + p * ops.velocity_stab_residual(w)
    return grad


def estimate_infsup_ascent(mesh: Mesh, k_u: int, k_pi: int, p: float,
                           stabilized: bool = True, n_starts: int = 3,
                           iters: int = 120, seed: int = 0) -> InfSupEstimate:
    """Heuristic lower bound for general p by alternating maximization over
    velocities (dual-norm evaluation) and minimization over pressures.

    Combines the divergence-pairing supremum and the stabilisation term in
    quadrature, matching the generalized-singular-value definition at p = 2.
    Reported as a lower bound, never asserted against theory.
    """
    from .constitutive import ConstitutiveLaw
    pp = p / (p - 1.0)
    cfg = ProblemConfig(law=ConstitutiveLaw("power-law-explicit", p=p)
                        if p != 2.0 else ConstitutiveLaw("newtonian"),
                        k_u=k_u, k_pi=k_pi, alpha=1.0)
    ops = SpatialOperators(mesh, cfg)
    ex = 2 * k_u
    ops._infsup_Dmat = _grad_sym_eval_matrix(ops.V, ex)
    ops._infsup_wq = ops.V.volume_tables(ex).weights.reshape(-1)
    X2 = _velocity_norm_gram(ops.V, ops)
    B = ops.B
    Z = _mean_zero_basis(ops.mvec)
    rng = np.random.default_rng(seed)

    def dg_p_norm(w):
        vals = (ops._infsup_Dmat @ w).reshape(-1, 4)
        mag = np.sqrt(np.sum(vals ** 2, axis=1))
        vol = float(np.sum(ops._infsup_wq * mag ** p))
        ji, jb = ops._velocity_jumps(w)
        ft = ops.ftV
        jump = 0.0
        if ji.size:
            jump += float(np.sum(ft.i_weights * ft.i_h[:, None] ** (1.0 - p)
                                 * np.linalg.norm(ji, axis=2) ** p))
        if jb.size:
            jump += float(np.sum(ft.b_weights * ft.b_h[:, None] ** (1.0 - p)
                                 * np.linalg.norm(jb, axis=2) ** p))
        return (vol + jump) ** (1.0 / p)

    def sup_over_w(q):
        rhs = ops.BT @ q
        w = sla.solve(X2, rhs, assume_a="pos")   # p = 2 maximizer as init
        best = 0.0
        for _ in range(iters):
            nrm = dg_p_norm(w)
            if nrm == 0:
                break
            val = float(rhs @ w) / nrm
            best = max(best, val)
            grad_t = rhs / nrm - (val / (p * nrm ** p)) \
                * _dg_norm_power_gradient(ops, w, p)
            step = 0.5 * np.linalg.norm(w) / (np.linalg.norm(grad_t) + 1e-30)
            w = w + step * grad_t
        return max(best, float(rhs @ w) / dg_p_norm(w))

    def lp_norm_pressure(q):
        return lebesgue_norm(DGField.from_flat(ops.M, q), pp)

    def value(q):
        sup = sup_over_w(q)
        stab = ops.pressure_stab_form(q, q) if stabilized else 0.0
        return float(np.sqrt(sup ** 2 + max(stab, 0.0) ** (2.0 / pp))) \
            / lp_norm_pressure(q)

    # candidate pressures: p = 2 minimizer plus random mean-zero directions
    X = X2
    BtZ = (ops.B.T @ Z)
    Y = sla.solve(X, BtZ, assume_a="pos")
    A2 = BtZ.T @ Y
    if stabilized:
        Spi = ops.pressure_stab_jacobian(np.zeros(ops.NM)).toarray()
        A2 = A2 + Z.T @ Spi @ Z
    evals, evecs = sla.eigh(A2)
    candidates = [Z @ evecs[:, 0], Z @ evecs[:, 1] if evecs.shape[1] > 1
                  else Z @ evecs[:, 0]]
    candidates += [Z @ rng.standard_normal(Z.shape[1]) for _ in range(n_starts)]
    best = min(value(q) for q in candidates)
    return InfSupEstimate(p=p, value=float(best), dense=False,
                          stabilized=stabilized, h=mesh.max_mesh_size)


def infsup_refinement_sweep(k_u: int, k_pi: int, levels: int = 3,
                            stabilized: bool = True, base_n: int = 2) -> list:
    return [estimate_infsup_dense(build_structured_mesh(base_n * 2 ** lv,
                                                        base_n * 2 ** lv),
                                  k_u, k_pi, stabilized)
            for lv in range(levels)]


# -- CSV emission ------------------------------------------------------------------------

CSV_HEADER = "inequality,level,h,tau,p,q,s,gamma,alpha,max_ratio,samples,seed"


def sweep_csv_rows(sweep: ConstantSweep) -> list[str]:
    def fmt(x):
        return "" if x is None else f"{x:.17g}"

    rows = []
    for lv in sweep.levels:
        rows.append(",".join([
            sweep.inequality, str(lv.level), f"{lv.h:.17g}", f"{lv.tau:.17g}",
            fmt(sweep.p), fmt(sweep.q), fmt(sweep.s), fmt(sweep.gamma),
            fmt(sweep.alpha), f"{lv.max_ratio:.17g}", str(sweep.samples),
            str(sweep.seed)]))
    return rows
