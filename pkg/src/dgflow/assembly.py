"""Per-slab space-time system: spatial forms (viscous, convective,
stabilisations, pressure-divergence coupling), the slab residual and Jacobian,
Newton solution of one slab, and the sequential slab loop.

Velocity and pressure are slab polynomials in the Legendre modal time basis.
Nonlinear terms are integrated in time with the Gauss-Radau measure (or a
high-order Gauss rule in exact-time mode), while the time-derivative, jump
and pressure-divergence pairings are integrated exactly.  The zero spatial
mean of the pressure is enforced by one scalar multiplier per temporal mode.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .constitutive import (ConstitutiveLaw, resolve_stress,
                           stress_tangent_mandel, _MANDEL)
from .calculus import divergence_matrix, get_tensor_ops, _dof_index
from .mesh import Mesh
from .space import BrokenSpace, DGField, dg_norm, project_l2
from .time_dg import (TimeGrid, gauss_radau, legendre_mass_diag,
                      legendre_stiffness, legendre_values, SlabPolynomial)

TANGENT_DELTA = 1e-12   # smoothing of |x|^{p-2} x tangents at x = 0


class SolverError(Exception):
    """Newton failed to converge; carries the iteration log."""

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log or []


def zero_vector_function(t, pts):
    return np.zeros((len(pts), 2))


def zero_initial(pts):
    return np.zeros((len(pts), 2))


@dataclass(frozen=True)
class ProblemConfig:
    """Full discretisation setup for one flow problem."""

    law: ConstitutiveLaw
    k_u: int = 1
    k_pi: int = 1
    k_t: int = 1
    alpha: float = 10.0
    gradient_mode: str = "ldg"            # "ldg" (lifted) or "iidg" (broken)
    stabilisation_mode: str = "standard"  # or "sip"
    lifting_degree: int | None = None     # default k_u - 1
    quadrature_mode: str = "gauss-radau"  # or "exact-time"
    pressure_stab_boundary: bool = False
    forcing: object = zero_vector_function   # f(t, pts) -> (n, 2)
    initial: object = zero_initial           # u0(pts) -> (n, 2)
    final_time: float = 1.0
    n_slabs: int = 4
    newton_tol: float = 1e-10
    newton_max_iter: int = 25
    quad_bump: int = 3
    heat_mode: bool = False
    convection: bool = True
    allow_nonmonotone: bool = False

    def __post_init__(self):
        if self.k_u < 1:
            raise ValueError("velocity degree k_u must be at least 1")
        if self.k_pi > self.k_u:
            raise ValueError(f"pressure degree k_pi = {self.k_pi} violates "
                             f"k_pi <= k_u = {self.k_u}")
        if self.k_t < 0:
            raise ValueError("time degree k_t must be nonnegative")
        if self.alpha <= 0:
            raise ValueError("penalty alpha must be positive")
        if self.gradient_mode not in ("ldg", "iidg"):
            raise ValueError(f"unknown gradient mode {self.gradient_mode!r}")
        if self.stabilisation_mode not in ("standard", "sip"):
            raise ValueError(f"unknown stabilisation mode {self.stabilisation_mode!r}")
        if self.quadrature_mode not in ("gauss-radau", "exact-time"):
            raise ValueError(f"unknown quadrature mode {self.quadrature_mode!r}")
        if not self.law.monotone_resolvable and not self.allow_nonmonotone:
            raise ValueError("non-monotone law requires allow_nonmonotone=True")

    @property
    def p(self) -> float:
        return self.law.p

    @property
    def l_eff(self) -> int:
        return max(self.k_u - 1, 0) if self.lifting_degree is None \
            else self.lifting_degree


def _eval_tensor_matrix(tspace: BrokenSpace, exactness: int) -> sp.csr_matrix:
    """Sparse map from tensor coefficients to values at volume points,
    rows ordered ((element, point), component)."""
    tab = tspace.volume_tables(exactness)
    nE, nq, nb = tab.values.shape
    e = np.repeat(np.arange(nE), nq * 4 * nb)
    q = np.tile(np.repeat(np.arange(nq), 4 * nb), nE)
    c = np.tile(np.repeat(np.arange(4), nb), nE * nq)
    b = np.tile(np.arange(nb), nE * nq * 4)
    rows = (e * nq + q) * 4 + c
    cols = _dof_index(tspace, e, c, b)
    data = tab.values[e, q, b]
    return sp.coo_matrix((data, (rows, cols)),
                         shape=(nE * nq * 4, tspace.global_dof_count)).tocsr()


def _grad_sym_eval_matrix(vspace: BrokenSpace, exactness: int) -> sp.csr_matrix:
    """Sparse map from velocity coefficients to symmetrized broken-gradient
    values at volume points, same row ordering as ``_eval_tensor_matrix``."""
    tab = vspace.volume_tables(exactness)
    nE, nq, nb, _ = tab.grads.shape
    rows, cols, data = [], [], []
    for a in range(2):
        for bdir in range(2):
            comp = 2 * a + bdir
            e = np.repeat(np.arange(nE), nq * nb)
            q = np.tile(np.repeat(np.arange(nq), nb), nE)
            j = np.tile(np.arange(nb), nE * nq)
            r = (e * nq + q) * 4 + comp
            rows += [r, r]
            cols += [_dof_index(vspace, e, a, j), _dof_index(vspace, e, bdir, j)]
            data += [0.5 * tab.grads[e, q, j, bdir], 0.5 * tab.grads[e, q, j, a]]
    return sp.coo_matrix((np.concatenate(data),
                          (np.concatenate(rows), np.concatenate(cols))),
                         shape=(nE * nq * 4, vspace.global_dof_count)).tocsr()


def _sym_coeff_matrix(tspace: BrokenSpace) -> sp.csr_matrix:
    """Symmetrization of tensor coefficients in the component slots."""
    nE, nb = tspace.mesh.n_elements, tspace.n_scalar_basis
    rows, cols, data = [], [], []
    e = np.repeat(np.arange(nE), nb)
    b = np.tile(np.arange(nb), nE)
    for c_out, pairs in ((0, [(0, 1.0)]), (3, [(3, 1.0)]),
                         (1, [(1, 0.5), (2, 0.5)]), (2, [(1, 0.5), (2, 0.5)])):
        for c_in, w in pairs:
            rows.append(_dof_index(tspace, e, c_out, b))
            cols.append(_dof_index(tspace, e, c_in, b))
            data.append(np.full(len(e), w))
    return sp.coo_matrix((np.concatenate(data),
                          (np.concatenate(rows), np.concatenate(cols))),
                         shape=(tspace.global_dof_count,) * 2).tocsr()


class SpatialOperators:
    """All mesh/space-dependent tables and matrices for one configuration."""

    def __init__(self, mesh: Mesh, config: ProblemConfig):
        self.mesh = mesh
        self.config = config
        self.V = BrokenSpace(mesh, config.k_u, components=2)
        self.M = BrokenSpace(mesh, config.k_pi, components=1)
        self.tensor_ops = get_tensor_ops(self.V, config.l_eff)
        self.B = divergence_matrix(self.V, self.M)
        self.BT = self.B.T.tocsr()

        k_u = config.k_u
        self.ex_vol = 2 * k_u + config.quad_bump
        self.ex_face = max(3 * k_u, 2 * k_u + config.quad_bump)
        self.ex_face_pi = 2 * config.k_pi + config.quad_bump

        self.tabV = self.V.volume_tables(self.ex_vol)
        self.ftV = self.V.face_tables(self.ex_face)
        self.ftM = self.M.face_tables(self.ex_face_pi)

        tsp = self.tensor_ops.tspace
        self._evalT = _eval_tensor_matrix(tsp, self.ex_vol)
        self.EG = (self._evalT @ self.tensor_ops.gmat).tocsr()
        if config.gradient_mode == "ldg":
            self.Esym = (self._evalT @ _sym_coeff_matrix(tsp)
                         @ self.tensor_ops.gmat).tocsr()
        else:
            self.Esym = _grad_sym_eval_matrix(self.V, self.ex_vol)
        self._lift_eval = None

        self.w_vol = self.tabV.weights.reshape(-1)          # (nE*nq,)
        self.n_qp = self.tabV.weights.shape[1]

        mtab = self.M.volume_tables(2 * config.k_pi)
        self.mvec = np.einsum("eq,eqb->eb", mtab.weights, mtab.values).reshape(-1)

        self.NV = self.V.global_dof_count
        self.NM = self.M.global_dof_count
        self._face_index_cache = {}

    @property
    def lift_eval(self) -> sp.csr_matrix:
        """Values of the jump lifting at volume points (built on demand)."""
        if self._lift_eval is None:
            self._lift_eval = (self._evalT @ self.tensor_ops.lift).tocsr()
        return self._lift_eval

    # -- pointwise gradient values ------------------------------------------

    def gsym_values(self, u: np.ndarray) -> np.ndarray:
        """Values of the chosen symmetric gradient at volume points."""
        return (self.Esym @ u).reshape(-1, 2, 2)

    def gl_values(self, u: np.ndarray) -> np.ndarray:
        return (self.EG @ u).reshape(-1, 2, 2)

    # -- viscous form ----------------------------------------------------------

    def stress_values(self, u: np.ndarray) -> np.ndarray:
        return resolve_stress(self.config.law, self.gsym_values(u))

    def stress_norm_power(self, u: np.ndarray) -> float:
        """Radau-measure integrand: integral of |T_hat|^{p'} over the domain."""
        That = self.stress_values(u)
        mag = np.sqrt(np.sum(That ** 2, axis=(-2, -1)))
        return float(np.sum(self.w_vol * mag ** self.config.law.p_prime))

    def viscous_residual(self, u: np.ndarray) -> np.ndarray:
        That = self.stress_values(u).reshape(-1)
        r = self.EG.T @ (np.repeat(self.w_vol, 4) * That)
        r += self.velocity_stab_residual(u)
        if self.config.stabilisation_mode == "sip":
            r -= self._lift_pproduct_residual(u)
        return r

    def viscous_jacobian(self, u: np.ndarray) -> sp.csr_matrix:
        gsym = self.gsym_values(u)
        tang = stress_tangent_mandel(self.config.law, gsym)
        T4 = np.einsum("nij,iab,jcd->nabcd", tang, _MANDEL, _MANDEL)
        blocks = T4.reshape(-1, 4, 4) * self.w_vol[:, None, None]
        WD = sp.bsr_matrix((blocks, np.arange(len(blocks)),
                            np.arange(len(blocks) + 1)),
                           shape=(4 * len(blocks), 4 * len(blocks)))
        J = (self.EG.T @ (WD @ self.Esym)).tocsr()
        J = J + self.velocity_stab_jacobian(u)
        if self.config.stabilisation_mode == "sip":
            J = J - self._lift_pproduct_jacobian(u)
        return J

    def viscous_form(self, v: np.ndarray, w: np.ndarray) -> float:
        return float(self.viscous_residual(v) @ w)

    def viscous_coercivity_probe(self, v: np.ndarray):
        """Returns (A_h(v; v), |T_hat|_{p'}^{p'}, |v|_{h,p}^p)."""
        A = self.viscous_form(v, v)
        stress_norm = self.stress_norm_power(v)
        vh = dg_norm(DGField.from_flat(self.V, v), self.config.p, "sym",
                     self.config.quad_bump) ** self.config.p
        return A, stress_norm, vh

    # -- velocity jump stabilisation ---------------------------------------------

    def _velocity_jumps(self, u: np.ndarray):
        ft = self.ftV
        c = u.reshape(self.mesh.n_elements, 2, -1)
        ji = np.einsum("fcb,fqb->fqc", c[ft.i_left], ft.i_trace_left) \
            - np.einsum("fcb,fqb->fqc", c[ft.i_right], ft.i_trace_right)
        jb = np.einsum("fcb,fqb->fqc", c[ft.b_owner], ft.b_trace)
        return ji, jb

    def velocity_stab_residual(self, v: np.ndarray) -> np.ndarray:
        p, alpha = self.config.p, self.config.alpha
        ft = self.ftV
        ji, jb = self._velocity_jumps(v)
        out = np.zeros((self.mesh.n_elements, 2, self.V.n_scalar_basis))
        if ji.size:
            mag = np.linalg.norm(ji, axis=2)
            fac = alpha * ft.i_weights * ft.i_h[:, None] ** (1.0 - p) \
                * np.where(mag > 0, mag, 1.0) ** (p - 2.0)
            vec = fac[..., None] * ji
            np.add.at(out, ft.i_left,
                      np.einsum("fqc,fqb->fcb", vec, ft.i_trace_left))
            np.add.at(out, ft.i_right,
                      -np.einsum("fqc,fqb->fcb", vec, ft.i_trace_right))
        if jb.size:
            mag = np.linalg.norm(jb, axis=2)
            fac = alpha * ft.b_weights * ft.b_h[:, None] ** (1.0 - p) \
                * np.where(mag > 0, mag, 1.0) ** (p - 2.0)
            vec = fac[..., None] * jb
            np.add.at(out, ft.b_owner,
                      np.einsum("fqc,fqb->fcb", vec, ft.b_trace))
        return out.reshape(-1)

    def velocity_stab_form(self, v: np.ndarray, w: np.ndarray) -> float:
        return float(self.velocity_stab_residual(v) @ w)

    def _face_indices(self, key, elems_test, elems_trial, space):
        ck = key
        if ck not in self._face_index_cache:
            m, nb = space.components, space.n_scalar_basis
            a, j, c_, k2 = np.meshgrid(np.arange(m), np.arange(nb),
                                       np.arange(m), np.arange(nb), indexing="ij")
            rows = _dof_index(space, elems_test[:, None, None, None, None],
                              a[None], j[None])
            cols = _dof_index(space, elems_trial[:, None, None, None, None],
                              c_[None], k2[None])
            shape = (len(elems_test), m, nb, m, nb)
            self._face_index_cache[ck] = (
                np.broadcast_to(rows, shape).ravel().copy(),
                np.broadcast_to(cols, shape).ravel().copy())
        return self._face_index_cache[ck]

    def _pjump_blocks(self, jumps, weights, h, p, alpha, traces_test,
                      traces_trial, sign):
        """Local face Jacobian blocks of the p-power jump form; the tangent is
        smoothed through |x|^2 -> |x|^2 + delta^2 (residuals are unsmoothed)."""
        m = jumps.shape[2]
        mag2 = np.sum(jumps ** 2, axis=2) + TANGENT_DELTA ** 2
        base = alpha * weights * h[:, None] ** (1.0 - p)
        eye = np.eye(m)
        core = mag2[..., None, None] ** (0.5 * p - 1.0) * eye \
            + (p - 2.0) * mag2[..., None, None] ** (0.5 * p - 2.0) \
            * jumps[..., :, None] * jumps[..., None, :]
        core = core * base[..., None, None]
        return sign * np.einsum("fqac,fqj,fqk->fajck", core, traces_test,
                                traces_trial)

    def velocity_stab_jacobian(self, v: np.ndarray) -> sp.csr_matrix:
        p, alpha = self.config.p, self.config.alpha
        ft = self.ftV
        ji, jb = self._velocity_jumps(v)
        rows, cols, data = [], [], []
        if ji.size:
            combos = [("LL", ft.i_left, ft.i_left, ft.i_trace_left,
                       ft.i_trace_left, 1.0),
                      ("LR", ft.i_left, ft.i_right, ft.i_trace_left,
                       ft.i_trace_right, -1.0),
                      ("RL", ft.i_right, ft.i_left, ft.i_trace_right,
                       ft.i_trace_left, -1.0),
                      ("RR", ft.i_right, ft.i_right, ft.i_trace_right,
                       ft.i_trace_right, 1.0)]
            for key, te, tr, tte, ttr, sign in combos:
                blocks = self._pjump_blocks(ji, ft.i_weights, ft.i_h, p, alpha,
                                            tte, ttr, sign)
                r, c = self._face_indices("vstab_i" + key, te, tr, self.V)
                rows.append(r)
                cols.append(c)
                data.append(blocks.ravel())
        if jb.size:
            blocks = self._pjump_blocks(jb, ft.b_weights, ft.b_h, p, alpha,
                                        ft.b_trace, ft.b_trace, 1.0)
            r, c = self._face_indices("vstab_b", ft.b_owner, ft.b_owner, self.V)
            rows.append(r)
            cols.append(c)
            data.append(blocks.ravel())
        return sp.coo_matrix((np.concatenate(data),
                              (np.concatenate(rows), np.concatenate(cols))),
                             shape=(self.NV, self.NV)).tocsr()

    # -- SIP lifting correction ---------------------------------------------------

    def _lift_pproduct_residual(self, v: np.ndarray) -> np.ndarray:
        p = self.config.p
        R = (self.lift_eval @ v).reshape(-1, 4)
        mag2 = np.sum(R ** 2, axis=1)
        flux = self.w_vol[:, None] * np.where(
            mag2 > 0, mag2, 1.0)[:, None] ** (0.5 * p - 1.0) * R
        return self.lift_eval.T @ flux.reshape(-1)

    def _lift_pproduct_jacobian(self, v: np.ndarray) -> sp.csr_matrix:
        p = self.config.p
        R = (self.lift_eval @ v).reshape(-1, 4)
        mag2 = np.sum(R ** 2, axis=1) + TANGENT_DELTA ** 2
        eye = np.eye(4)
        blocks = mag2[:, None, None] ** (0.5 * p - 1.0) * eye \
            + (p - 2.0) * mag2[:, None, None] ** (0.5 * p - 2.0) \
            * R[:, :, None] * R[:, None, :]
        blocks *= self.w_vol[:, None, None]
        WD = sp.bsr_matrix((blocks, np.arange(len(blocks)),
                            np.arange(len(blocks) + 1)),
                           shape=(4 * len(blocks),) * 2)
        return (self.lift_eval.T @ (WD @ self.lift_eval)).tocsr()

    def sip_stab_form(self, v: np.ndarray, w: np.ndarray) -> float:
        """Velocity stabilisation minus the lifting p-product."""
        return self.velocity_stab_form(v, w) \
            - float(self._lift_pproduct_residual(v) @ w)

    # -- pressure stabilisation ------------------------------------------------------

    def _pressure_jumps(self, q: np.ndarray):
        ft = self.ftM
        c = q.reshape(self.mesh.n_elements, 1, -1)
        ji = np.einsum("fcb,fqb->fqc", c[ft.i_left], ft.i_trace_left) \
            - np.einsum("fcb,fqb->fqc", c[ft.i_right], ft.i_trace_right)
        jb = np.einsum("fcb,fqb->fqc", c[ft.b_owner], ft.b_trace)
        return ji, jb

    def pressure_stab_residual(self, q: np.ndarray) -> np.ndarray:
        pp = self.config.law.p_prime
        ft = self.ftM
        ji, jb = self._pressure_jumps(q)
        out = np.zeros((self.mesh.n_elements, 1, self.M.n_scalar_basis))
        if ji.size:
            mag = np.abs(ji[..., 0])
            fac = ft.i_weights * ft.i_h[:, None] ** (pp - 1.0) \
                * np.where(mag > 0, mag, 1.0) ** (pp - 2.0)
            vec = (fac * ji[..., 0])[..., None]
            np.add.at(out, ft.i_left,
                      np.einsum("fqc,fqb->fcb", vec, ft.i_trace_left))
            np.add.at(out, ft.i_right,
                      -np.einsum("fqc,fqb->fcb", vec, ft.i_trace_right))
        if self.config.pressure_stab_boundary and jb.size:
            mag = np.abs(jb[..., 0])
            fac = ft.b_weights * ft.b_h[:, None] ** (pp - 1.0) \
                * np.where(mag > 0, mag, 1.0) ** (pp - 2.0)
            vec = (fac * jb[..., 0])[..., None]
            np.add.at(out, ft.b_owner,
                      np.einsum("fqc,fqb->fcb", vec, ft.b_trace))
        return out.reshape(-1)

    def pressure_stab_form(self, qa: np.ndarray, qb: np.ndarray) -> float:
        return float(self.pressure_stab_residual(qa) @ qb)

    def pressure_stab_jacobian(self, q: np.ndarray) -> sp.csr_matrix:
        pp = self.config.law.p_prime
        ft = self.ftM
        ji, jb = self._pressure_jumps(q)
        rows, cols, data = [], [], []
        # the p'-power face form matches the velocity one with h-exponent
        # p'-1 instead of 1-p; reuse the block helper with adjusted h powers
        if ji.size:
            h_eff = ft.i_h ** ((pp - 1.0) / (1.0 - pp))
            combos = [("LL", ft.i_left, ft.i_left, ft.i_trace_left,
                       ft.i_trace_left, 1.0),
                      ("LR", ft.i_left, ft.i_right, ft.i_trace_left,
                       ft.i_trace_right, -1.0),
                      ("RL", ft.i_right, ft.i_left, ft.i_trace_right,
                       ft.i_trace_left, -1.0),
                      ("RR", ft.i_right, ft.i_right, ft.i_trace_right,
                       ft.i_trace_right, 1.0)]
            for key, te, tr, tte, ttr, sign in combos:
                blocks = self._pjump_blocks(ji, ft.i_weights, h_eff, pp, 1.0,
                                            tte, ttr, sign)
                r, c = self._face_indices("pstab_i" + key, te, tr, self.M)
                rows.append(r)
                cols.append(c)
                data.append(blocks.ravel())
        if self.config.pressure_stab_boundary and jb.size:
            h_eff = ft.b_h ** ((pp - 1.0) / (1.0 - pp))
            blocks = self._pjump_blocks(jb, ft.b_weights, h_eff, pp, 1.0,
                                        ft.b_trace, ft.b_trace, 1.0)
            r, c = self._face_indices("pstab_b", ft.b_owner, ft.b_owner, self.M)
            rows.append(r)
            cols.append(c)
            data.append(blocks.ravel())
        if not rows:
            return sp.csr_matrix((self.NM, self.NM))
        return sp.coo_matrix((np.concatenate(data),
                              (np.concatenate(rows), np.concatenate(cols))),
                             shape=(self.NM, self.NM)).tocsr()

    # -- convective form -----------------------------------------------------------

    def _volume_values(self, u: np.ndarray):
        c = u.reshape(self.mesh.n_elements, 2, -1)
        vals = np.einsum("ecb,eqb->eqc", c, self.tabV.values)
        grads = np.einsum("ecb,eqbd->eqcd", c, self.tabV.grads)
        return vals, grads

    def _face_values(self, u: np.ndarray):
        ft = self.ftV
        c = u.reshape(self.mesh.n_elements, 2, -1)
        uL = np.einsum("fcb,fqb->fqc", c[ft.i_left], ft.i_trace_left)
        uR = np.einsum("fcb,fqb->fqc", c[ft.i_right], ft.i_trace_right)
        ub = np.einsum("fcb,fqb->fqc", c[ft.b_owner], ft.b_trace)
        return uL, uR, ub

    def convective_hat_test_residual(self, u, v) -> np.ndarray:
        """Functional w -> Chat[u, v, w] over test dofs (face-integral form)."""
        ft = self.ftV
        uv, _ = self._volume_values(u)
        vv, _ = self._volume_values(v)
        W = self.tabV.weights
        out = np.zeros((self.mesh.n_elements, 2, self.V.n_scalar_basis))
        out -= np.einsum("eq,eqa,eqb,eqjb->eaj", W, vv, uv, self.tabV.grads)
        uL, uR, ub = self._face_values(u)
        vL, vR, vb = self._face_values(v)
        if len(ft.i_h):
            unL = np.einsum("fqb,fb->fq", uL, ft.i_normal)
            unR = np.einsum("fqb,fb->fq", uR, ft.i_normal)
            flux = 0.5 * (vL * unL[..., None] + vR * unR[..., None]) \
                * ft.i_weights[..., None]
            np.add.at(out, ft.i_left,
                      np.einsum("fqa,fqj->faj", flux, ft.i_trace_left))
            np.add.at(out, ft.i_right,
                      -np.einsum("fqa,fqj->faj", flux, ft.i_trace_right))
        if len(ft.b_h):
            un = np.einsum("fqb,fb->fq", ub, ft.b_normal)
            flux = vb * (ft.b_weights * un)[..., None]
            np.add.at(out, ft.b_owner,
                      np.einsum("fqa,fqj->faj", flux, ft.b_trace))
        return out.reshape(-1)

    def convective_hat_middle_residual(self, u, w) -> np.ndarray:
        """Functional v -> Chat[u, v, w] over the middle slot's dofs."""
        ft = self.ftV
        uv, _ = self._volume_values(u)
        _, gw = self._volume_values(w)
        W = self.tabV.weights
        out = np.zeros((self.mesh.n_elements, 2, self.V.n_scalar_basis))
        out -= np.einsum("eq,eqab,eqb,eqj->eaj", W, gw, uv, self.tabV.values)
        uL, uR, ub = self._face_values(u)
        wL, wR, wb = self._face_values(w)
        if len(ft.i_h):
            jw = wL - wR
            unL = np.einsum("fqb,fb->fq", uL, ft.i_normal)
            unR = np.einsum("fqb,fb->fq", uR, ft.i_normal)
            np.add.at(out, ft.i_left, 0.5 * np.einsum(
                "fq,fq,fqa,fqj->faj", ft.i_weights, unL, jw, ft.i_trace_left))
            np.add.at(out, ft.i_right, 0.5 * np.einsum(
                "fq,fq,fqa,fqj->faj", ft.i_weights, unR, jw, ft.i_trace_right))
        if len(ft.b_h):
            un = np.einsum("fqb,fb->fq", ub, ft.b_normal)
            np.add.at(out, ft.b_owner, np.einsum(
                "fq,fq,fqa,fqj->faj", ft.b_weights, un, wb, ft.b_trace))
        return out.reshape(-1)

    def convective_hat(self, u, v, w) -> float:
        return float(self.convective_hat_test_residual(u, v) @ w)

    def convective_form(self, u, v, w) -> float:
        """Skew-symmetrized convective trilinear form C[u, v, w]."""
        return 0.5 * (self.convective_hat(u, v, w) - self.convective_hat(u, w, v))

    def convective_residual(self, u: np.ndarray) -> np.ndarray:
        """Vector of C_h[u, u, basis] over test dofs."""
        return 0.5 * (self.convective_hat_test_residual(u, u)
                      - self.convective_hat_middle_residual(u, u))

    def convective_jacobian(self, u: np.ndarray) -> sp.csr_matrix:
        """Derivative of ``convective_residual``; the boundary-face parts of
        the two hat-functionals cancel identically and are skipped."""
        ft = self.ftV
        nb = self.V.n_scalar_basis
        nE = self.mesh.n_elements
        W = self.tabV.weights
        val = self.tabV.values
        grd = self.tabV.grads
        uv, gu = self._volume_values(u)
        uL, uR, _ = self._face_values(u)

        rows, cols, data = [], [], []

        # volume blocks: test part 1/2 * (A1 delta + A2), mid part -1/2 * (B1 delta + B2)
        A1 = -np.einsum("eq,eqk,eqb,eqjb->ejk", W, val, uv, grd)
        A2 = -np.einsum("eq,eqa,eqk,eqjc->eajck", W, uv, val, grd)
        B1 = -np.einsum("eq,eqj,eqkb,eqb->ejk", W, val, grd, uv)
        B2 = -np.einsum("eq,eqj,eqac,eqk->eajck", W, val, gu, val)
        full = 0.5 * A2 - 0.5 * B2
        diag = 0.5 * A1 - 0.5 * B1
        for a in range(2):
            full[:, a, :, a, :] += diag
        eidx = np.arange(nE)
        a_, j_, c_, k_ = np.meshgrid(np.arange(2), np.arange(nb),
                                     np.arange(2), np.arange(nb), indexing="ij")
        r = _dof_index(self.V, eidx[:, None, None, None, None], a_[None], j_[None])
        c = _dof_index(self.V, eidx[:, None, None, None, None], c_[None], k_[None])
        rows.append(np.broadcast_to(r, full.shape).ravel())
        cols.append(np.broadcast_to(c, full.shape).ravel())
        data.append(full.ravel())

        if len(ft.i_h):
            wI = ft.i_weights
            nrm = ft.i_normal
            trs = {"L": ft.i_trace_left, "R": ft.i_trace_right}
            els = {"L": ft.i_left, "R": ft.i_right}
            vals = {"L": uL, "R": uR}
            un = {"L": np.einsum("fqb,fb->fq", uL, nrm),
                  "R": np.einsum("fqb,fb->fq", uR, nrm)}
            ju = uL - uR
            sgn = {"L": 1.0, "R": -1.0}
            nF = len(ft.i_h)
            for T in ("L", "R"):
                for S in ("L", "R"):
                    blk = np.zeros((nF, 2, nb, 2, nb))
                    # test part of C: sign(T)/2 w [ (u_S.n) delta + u_S (x) n ] phi_k^S phi_j^T
                    d1 = 0.5 * sgn[T] * np.einsum("fq,fq,fqj,fqk->fjk",
                                                  wI, un[S], trs[T], trs[S])
                    x1 = 0.5 * sgn[T] * np.einsum("fq,fqa,fc,fqj,fqk->fajck",
                                                  wI, vals[S], nrm, trs[T], trs[S])
                    # mid part: 1/2 w [ sgn(S) (u_T.n) delta + (S==T) ju (x) n ]
                    d2 = 0.5 * sgn[S] * np.einsum("fq,fq,fqj,fqk->fjk",
                                                  wI, un[T], trs[T], trs[S])
                    blk += 0.5 * x1
                    if S == T:
                        x2 = 0.5 * np.einsum("fq,fqa,fc,fqj,fqk->fajck",
                                             wI, ju, nrm, trs[T], trs[S])
                        blk -= 0.5 * x2
                    dd = 0.5 * d1 - 0.5 * d2
                    for a in range(2):
                        blk[:, a, :, a, :] += dd
                    rws, cls = self._face_indices("conv" + T + S, els[T],
                                                  els[S], self.V)
                    rows.append(rws)
                    cols.append(cls)
                    data.append(blk.ravel())

        return sp.coo_matrix((np.concatenate(data),
                              (np.concatenate(rows), np.concatenate(cols))),
                             shape=(self.NV, self.NV)).tocsr()

    # -- forcing ---------------------------------------------------------------------

    def forcing_vector(self, t: float) -> np.ndarray:
        f = self.config.forcing
        pts = self.tabV.points.reshape(-1, 2)
        vals = np.asarray(f(t, pts), dtype=float).reshape(
            self.mesh.n_elements, self.n_qp, 2)
        return np.einsum("eq,eqc,eqb->ecb", self.tabV.weights, vals,
                         self.tabV.values).reshape(-1)

    def initial_velocity(self) -> np.ndarray:
        return project_l2(self.V, self.config.initial, self.ex_vol).flat


# -- slab system -------------------------------------------------------------------


@dataclass
class SlabSolution:
    """Converged unknowns of one slab in the temporal Legendre basis."""

    slab_index: int
    t0: float
    t1: float
    U: np.ndarray                 # (k_t+1, NV)
    P: np.ndarray | None          # (k_t+1, NM), absent in heat mode
    mu: np.ndarray | None         # (k_t+1,) mean-zero multipliers
    newton_iterations: int
    residual_norm: float
    newton_log: list = field(default_factory=list)

    def velocity(self, space: BrokenSpace) -> SlabPolynomial:
        coeffs = np.array([DGField.from_flat(space, u).coefficients
                           for u in self.U])
        return SlabPolynomial(space, self.t0, self.t1, coeffs, self.slab_index)

    def pressure(self, space: BrokenSpace) -> SlabPolynomial:
        if self.P is None:
            raise ValueError("no pressure in heat mode")
        coeffs = np.array([DGField.from_flat(space, q).coefficients
                           for q in self.P])
        return SlabPolynomial(space, self.t0, self.t1, coeffs, self.slab_index)


class SlabSystem:
    """Residual and Jacobian of one slab's space-time problem."""

    def __init__(self, ops: SpatialOperators, t0: float, t1: float,
                 u_prev: np.ndarray, slab_index: int = 0):
        self.ops = ops
        cfg = ops.config
        self.t0, self.t1 = t0, t1
        self.u_prev = u_prev
        self.slab_index = slab_index
        k_t = cfg.k_t
        self.k_t = k_t
        self.n_modes = k_t + 1

        if cfg.quadrature_mode == "gauss-radau":
            rule = gauss_radau(k_t)
            self.xi_nodes = rule.nodes
            ref_w = rule.weights
        else:
            n_t = 2 * k_t + 1 if cfg.p == 2.0 else k_t + 6
            x, w = np.polynomial.legendre.leggauss(n_t)
            self.xi_nodes = x
            ref_w = w
        half = 0.5 * (t1 - t0)
        self.t_nodes = 0.5 * (t0 + t1) + half * self.xi_nodes
        self.w_nodes = half * ref_w
        self.L_nodes = legendre_values(k_t, self.xi_nodes)   # (modes, nodes)
        self.signs = np.array([(-1.0) ** i for i in range(self.n_modes)])
        self.D = legendre_stiffness(k_t)
        self.TM = half * legendre_mass_diag(k_t)
        self.heat = cfg.heat_mode
        self.NV, self.NM = ops.NV, ops.NM
        self.size = self.n_modes * self.NV if self.heat else \
            self.n_modes * (self.NV + self.NM) + self.n_modes
        self.fvecs = [ops.forcing_vector(t) for t in self.t_nodes]

    # layout helpers
    def split(self, x: np.ndarray):
        nm = self.n_modes
        U = x[:nm * self.NV].reshape(nm, self.NV)
        if self.heat:
            return U, None, None
        P = x[nm * self.NV: nm * (self.NV + self.NM)].reshape(nm, self.NM)
        mu = x[nm * (self.NV + self.NM):]
        return U, P, mu

    def join(self, U, P=None, mu=None) -> np.ndarray:
        if self.heat:
            return U.reshape(-1)
        return np.concatenate([U.reshape(-1), P.reshape(-1), mu])

    def velocity_at_nodes(self, U: np.ndarray) -> list[np.ndarray]:
        return [self.L_nodes[:, l] @ U for l in range(len(self.xi_nodes))]

    def residual(self, x: np.ndarray) -> np.ndarray:
        ops = self.ops
        cfg = ops.config
        U, P, mu = self.split(x)
        Unodes = self.velocity_at_nodes(U)
        RU = np.zeros_like(U)
        # exact-in-time couplings
        for m in range(self.n_modes):
            RU[m] = self.D.T[m] @ U + self.signs[m] * (self.signs @ U - self.u_prev)
        # nonlinear terms under the chosen time rule
        for l, (w_l, t_l) in enumerate(zip(self.w_nodes, self.t_nodes)):
            r_l = ops.viscous_residual(Unodes[l]) - self.fvecs[l]
            if cfg.convection and not self.heat:
                r_l = r_l + ops.convective_residual(Unodes[l])
            RU += np.outer(self.L_nodes[:, l], w_l * r_l)
        if self.heat:
            return RU.reshape(-1)
        for m in range(self.n_modes):
            RU[m] -= self.TM[m] * (ops.BT @ P[m])
        RP = np.zeros_like(P)
        for m in range(self.n_modes):
            RP[m] = self.TM[m] * (ops.B @ U[m]) + mu[m] * ops.mvec
        Pnodes = [self.L_nodes[:, l] @ P for l in range(len(self.xi_nodes))]
        for l, w_l in enumerate(self.w_nodes):
            rp = ops.pressure_stab_residual(Pnodes[l])
            RP += np.outer(self.L_nodes[:, l], w_l * rp)
        Rmu = P @ ops.mvec
        return self.join(RU, RP, Rmu)

    def jacobian(self, x: np.ndarray) -> sp.csr_matrix:
        ops = self.ops
        cfg = ops.config
        nm = self.n_modes
        U, P, mu = self.split(x)
        Unodes = self.velocity_at_nodes(U)
        Ctime = self.D.T + np.outer(self.signs, self.signs)
        JUU = sp.kron(Ctime, sp.identity(self.NV, format="csr"), format="csr")
        for l, w_l in enumerate(self.w_nodes):
            Jl = ops.viscous_jacobian(Unodes[l])
            if cfg.convection and not self.heat:
                Jl = Jl + ops.convective_jacobian(Unodes[l])
            coup = w_l * np.outer(self.L_nodes[:, l], self.L_nodes[:, l])
            JUU = JUU + sp.kron(coup, Jl, format="csr")
        if self.heat:
            return JUU.tocsr()
        JUP = sp.kron(sp.diags(-self.TM), ops.BT, format="csr")
        JPU = sp.kron(sp.diags(self.TM), ops.B, format="csr")
        Pnodes = [self.L_nodes[:, l] @ P for l in range(len(self.xi_nodes))]
        JPP = sp.csr_matrix((nm * self.NM, nm * self.NM))
        for l, w_l in enumerate(self.w_nodes):
            Jp = ops.pressure_stab_jacobian(Pnodes[l])
            coup = w_l * np.outer(self.L_nodes[:, l], self.L_nodes[:, l])
            JPP = JPP + sp.kron(coup, Jp, format="csr")
        mcol = sp.csr_matrix(ops.mvec[:, None])
        JPmu = sp.kron(sp.identity(nm, format="csr"), mcol, format="csr")
        JmuP = sp.kron(sp.identity(nm, format="csr"), mcol.T, format="csr")
        Zmu = sp.csr_matrix((nm, nm))
        ZUmu = sp.csr_matrix((nm * self.NV, nm))
        ZmuU = sp.csr_matrix((nm, nm * self.NV))
        return sp.bmat([[JUU, JUP, ZUmu],
                        [JPU, JPP, JPmu],
                        [ZmuU, JmuP, Zmu]], format="csr")

    def initial_guess(self, warm: "SlabSolution | None" = None) -> np.ndarray:
        """Constant extension of the previous end value; with a warm start,
        the previous slab's pressure end value seeds the lowest mode."""
        U = np.zeros((self.n_modes, self.NV))
        U[0] = self.u_prev
        if self.heat:
            return self.join(U)
        P = np.zeros((self.n_modes, self.NM))
        if warm is not None and warm.P is not None:
            P[0] = warm.P.sum(axis=0)
        return self.join(U, P, np.zeros(self.n_modes))


def solve_slab(ops: SpatialOperators, t0: float, t1: float,
               u_prev: np.ndarray, slab_index: int = 0,
               warm: SlabSolution | None = None) -> SlabSolution:
    """Newton with backtracking line search on the residual norm."""
    cfg = ops.config
    system = SlabSystem(ops, t0, t1, u_prev, slab_index)
    x = system.initial_guess(warm)
    data_scale = 1.0 + float(np.linalg.norm(u_prev)) \
        + sum(w * np.linalg.norm(f) for w, f in zip(system.w_nodes, system.fvecs))
    tol = cfg.newton_tol * data_scale
    log = []
    F = system.residual(x)
    norm = float(np.linalg.norm(F))
    log.append(norm)
    it = 0
    while not norm <= tol:
        if it >= cfg.newton_max_iter:
            raise SolverError(
                f"Newton did not converge in {cfg.newton_max_iter} iterations "
                f"on slab {slab_index} (residual {norm:.3e}, tol {tol:.3e})", log)
        J = system.jacobian(x)
        try:
            delta = spla.spsolve(J.tocsc(), -F)
        except RuntimeError as exc:
            raise SolverError(f"linear solve failed on slab {slab_index}: {exc}",
                              log) from exc
        step = 1.0
        for _ in range(40):
            x_new = x + step * delta
            F_new = system.residual(x_new)
            norm_new = float(np.linalg.norm(F_new))
            if norm_new <= (1.0 - 1e-4 * step) * norm or norm_new <= tol:
                break
            step *= 0.5
        else:
            raise SolverError(
                f"line search failed on slab {slab_index} at residual {norm:.3e}",
                log)
        x, F, norm = x_new, F_new, norm_new
        log.append(norm)
        it += 1
    U, P, mu = system.split(x)
    return SlabSolution(slab_index=slab_index, t0=t0, t1=t1, U=U.copy(),
                        P=None if P is None else P.copy(),
                        mu=None if mu is None else mu.copy(),
                        newton_iterations=it, residual_norm=norm,
                        newton_log=log)


# -- trajectories -----------------------------------------------------------------


class Trajectory:
    """Sequential slab solutions plus the projected initial velocity."""

    def __init__(self, ops: SpatialOperators, grid: TimeGrid,
                 u0: np.ndarray, slabs: list[SlabSolution]):
        self.ops = ops
        self.grid = grid
        self.u0 = u0
        self.slabs = slabs

    @property
    def config(self) -> ProblemConfig:
        return self.ops.config

    def initial_field(self) -> DGField:
        return DGField.from_flat(self.ops.V, self.u0)

    def slab_velocity(self, j: int) -> SlabPolynomial:
        return self.slabs[j].velocity(self.ops.V)

    def slab_pressure(self, j: int) -> SlabPolynomial:
        return self.slabs[j].pressure(self.ops.M)

    def locate(self, t: float) -> int:
        """Slab index whose half-open interval (t_{j-1}, t_j] contains t."""
        pts = self.grid.points
        if t <= pts[0]:
            return -1
        j = int(np.searchsorted(pts, t, side="left")) - 1
        return min(j, self.grid.n_slabs - 1)

    def velocity_at(self, t: float) -> DGField:
        j = self.locate(t)
        if j < 0:
            return self.initial_field()
        return self.slab_velocity(j).value_at(t)

    def end_values(self) -> np.ndarray:
        """Velocity coefficients at the partition points t_1..t_N."""
        return np.array([self.slabs[j].U.sum(axis=0)
                         for j in range(len(self.slabs))])

    def jumps(self) -> list[np.ndarray]:
        """Coefficient vectors of the temporal jumps at t_0..t_{N-1}."""
        out = []
        prev = self.u0
        for s in self.slabs:
            signs = np.array([(-1.0) ** i for i in range(s.U.shape[0])])
            out.append(signs @ s.U - prev)
            prev = s.U.sum(axis=0)
        return out


def run_simulation(mesh: Mesh, grid: TimeGrid, config: ProblemConfig,
                   ops: SpatialOperators | None = None) -> Trajectory:
    """Sequential slab loop from the projected initial velocity."""
    if ops is None:
        ops = SpatialOperators(mesh, config)
    u_prev = ops.initial_velocity()
    slabs = []
    warm = None
    for j in range(grid.n_slabs):
        t0, t1 = grid.slab(j)
        sol = solve_slab(ops, t0, t1, u_prev, j, warm=warm)
        slabs.append(sol)
        warm = sol
        u_prev = sol.U.sum(axis=0)   # end value: Legendre values at xi = 1
    return Trajectory(ops, grid, ops.initial_velocity(), slabs)


# -- checkpoint files ---------------------------------------------------------------

TRAJECTORY_HEADER = "dgflow-trajectory 1"


def config_hash(config: ProblemConfig) -> str:
    items = []
    for key in sorted(config.__dataclass_fields__):
        val = getattr(config, key)
        items.append(f"{key}={val!r}")
    return hashlib.sha256(";".join(items).encode()).hexdigest()[:12]


def save_trajectory(traj: Trajectory) -> str:
    buf = io.StringIO()
    cfg = traj.config
    buf.write(f"{TRAJECTORY_HEADER} config={config_hash(cfg)}\n")
    buf.write(f"slabs {len(traj.slabs)} k_t {cfg.k_t} "
              f"nv {traj.ops.NV} nm {0 if cfg.heat_mode else traj.ops.NM}\n")
    buf.write("grid " + " ".join(f"{t:.17g}" for t in traj.grid.points) + "\n")
    buf.write("u0 " + " ".join(f"{v:.17g}" for v in traj.u0) + "\n")
    for s in traj.slabs:
        buf.write(f"slab {s.slab_index} {s.t0:.17g} {s.t1:.17g} "
                  f"{s.newton_iterations} {s.residual_norm:.17g}\n")
        for row in s.U:
            buf.write("U " + " ".join(f"{v:.17g}" for v in row) + "\n")
        if s.P is not None:
            for row in s.P:
                buf.write("P " + " ".join(f"{v:.17g}" for v in row) + "\n")
            buf.write("mu " + " ".join(f"{v:.17g}" for v in s.mu) + "\n")
    return buf.getvalue()


def load_trajectory(text: str, ops: SpatialOperators) -> Trajectory:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines[0].startswith(TRAJECTORY_HEADER):
        raise ValueError("not a trajectory checkpoint")
    meta = lines[1].split()
    n_slabs, k_t = int(meta[1]), int(meta[3])
    grid = TimeGrid(np.array([float(v) for v in lines[2].split()[1:]]))
    u0 = np.array([float(v) for v in lines[3].split()[1:]])
    idx = 4
    slabs = []
    heat = ops.config.heat_mode
    for _ in range(n_slabs):
        head = lines[idx].split()
        idx += 1
        j, t0, t1 = int(head[1]), float(head[2]), float(head[3])
        U = np.array([[float(v) for v in lines[idx + m].split()[1:]]
                      for m in range(k_t + 1)])
        idx += k_t + 1
        P = mu = None
        if not heat:
            P = np.array([[float(v) for v in lines[idx + m].split()[1:]]
                          for m in range(k_t + 1)])
            idx += k_t + 1
            mu = np.array([float(v) for v in lines[idx].split()[1:]])
            idx += 1
        slabs.append(SlabSolution(j, t0, t1, U, P, mu, int(head[4]),
                                  float(head[5])))
    return Trajectory(ops, grid, u0, slabs)
