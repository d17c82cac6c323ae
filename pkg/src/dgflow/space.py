"""Broken polynomial spaces, fields, L2 projection and the DG norms.

Each element carries its own orthonormal basis, obtained by a Cholesky
orthonormalization of centered/scaled monomials against the exact element
mass matrix.  Element mass matrices are therefore the identity, the squared
L2 norm of a field is the squared Euclidean norm of its coefficients, and
nested degrees share leading basis functions (Cholesky factors of nested
Gram matrices are nested).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .mesh import Mesh
from .quadrature import QuadratureRule, interval_rule, triangle_rule


def monomial_exponents(degree: int) -> np.ndarray:
    """Exponent pairs (a, b), a+b <= degree, ordered by total degree."""
    return np.array([(d - b, b) for d in range(degree + 1) for b in range(d + 1)],
                    dtype=np.int64)


@dataclass(frozen=True)
class VolumeTables:
    points: np.ndarray    # (nE, nq, 2) physical coordinates
    weights: np.ndarray   # (nE, nq) physical weights
    values: np.ndarray    # (nE, nq, nb) orthonormal basis values
    grads: np.ndarray     # (nE, nq, nb, 2) basis gradients


@dataclass(frozen=True)
class FaceTables:
    """Basis traces at face quadrature points, interior and boundary parts."""

    # interior faces
    i_left: np.ndarray      # (nFi,) left (lower-index) element
    i_right: np.ndarray     # (nFi,) right element
    i_normal: np.ndarray    # (nFi, 2) unit normal left -> right
    i_h: np.ndarray         # (nFi,)
    i_points: np.ndarray    # (nFi, nq, 2)
    i_weights: np.ndarray   # (nFi, nq)
    i_trace_left: np.ndarray   # (nFi, nq, nb)
    i_trace_right: np.ndarray  # (nFi, nq, nb)
    # boundary faces
    b_owner: np.ndarray     # (nFb,)
    b_normal: np.ndarray    # (nFb, 2) outward
    b_h: np.ndarray         # (nFb,)
    b_points: np.ndarray    # (nFb, nq, 2)
    b_weights: np.ndarray   # (nFb, nq)
    b_trace: np.ndarray     # (nFb, nq, nb)


class BrokenSpace:
    """Discontinuous piecewise-polynomial space P_k(T_h)^m."""

    def __init__(self, mesh: Mesh, degree: int, components: int = 1):
        if degree < 0:
            raise ValueError("degree must be nonnegative")
        if components < 1:
            raise ValueError("components must be positive")
        self.mesh = mesh
        self.degree = degree
        self.components = components
        self.exponents = monomial_exponents(degree)
        self.n_scalar_basis = len(self.exponents)
        self.dofs_per_element = self.n_scalar_basis * components
        self.global_dof_count = mesh.n_elements * self.dofs_per_element
        self._ortho = self._orthonormalize()
        self._volume_cache: dict[int, VolumeTables] = {}
        self._face_cache: dict[int, FaceTables] = {}

    # -- basis construction -------------------------------------------------

    def _monomials(self, element_points: np.ndarray) -> np.ndarray:
        """Scaled monomial values; element_points has shape (nE, nq, 2)."""
        mesh = self.mesh
        loc = (element_points - mesh.element_centroids[:, None, :]) \
            / mesh.element_diameters[:, None, None]
        a = self.exponents[:, 0]
        b = self.exponents[:, 1]
        return loc[..., 0, None] ** a * loc[..., 1, None] ** b

    def _monomial_grads(self, element_points: np.ndarray) -> np.ndarray:
        mesh = self.mesh
        hK = mesh.element_diameters
        loc = (element_points - mesh.element_centroids[:, None, :]) / hK[:, None, None]
        a = self.exponents[:, 0]
        b = self.exponents[:, 1]
        x = loc[..., 0, None]
        y = loc[..., 1, None]
        with np.errstate(invalid="ignore"):
            dx = np.where(a > 0, a * x ** np.maximum(a - 1, 0) * y ** b, 0.0)
            dy = np.where(b > 0, b * x ** a * y ** np.maximum(b - 1, 0), 0.0)
        grad = np.stack([dx, dy], axis=-1)
        return grad / hK[:, None, None, None]

    def _physical_volume_rule(self, rule: QuadratureRule):
        mesh = self.mesh
        v0 = mesh.vertices[mesh.elements[:, 0]]
        v1 = mesh.vertices[mesh.elements[:, 1]]
        v2 = mesh.vertices[mesh.elements[:, 2]]
        xi = rule.points[:, 0]
        eta = rule.points[:, 1]
        pts = (v0[:, None, :]
               + xi[None, :, None] * (v1 - v0)[:, None, :]
               + eta[None, :, None] * (v2 - v0)[:, None, :])
        wts = rule.weights[None, :] * (2.0 * mesh.element_areas)[:, None]
        return pts, wts

    def _orthonormalize(self) -> np.ndarray:
        rule = triangle_rule(2 * self.degree)
        pts, wts = self._physical_volume_rule(rule)
        mono = self._monomials(pts)
        gram = np.einsum("eq,eqi,eqj->eij", wts, mono, mono)
        nb = self.n_scalar_basis
        linv = np.empty((self.mesh.n_elements, nb, nb))
        eye = np.eye(nb)
        for e in range(self.mesh.n_elements):
            chol = np.linalg.cholesky(gram[e])
            linv[e] = solve_triangular(chol, eye, lower=True)
        return linv

    # -- tables --------------------------------------------------------------

    def volume_tables(self, exactness: int) -> VolumeTables:
        key = int(exactness)
        if key not in self._volume_cache:
            rule = triangle_rule(exactness)
            pts, wts = self._physical_volume_rule(rule)
            mono = self._monomials(pts)
            gmono = self._monomial_grads(pts)
            values = np.einsum("eij,eqj->eqi", self._ortho, mono)
            grads = np.einsum("eij,eqjd->eqid", self._ortho, gmono)
            self._volume_cache[key] = VolumeTables(pts, wts, values, grads)
        return self._volume_cache[key]

    def basis_at(self, elements: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Basis values for given elements at given points (nE', nq, 2)."""
        mesh = self.mesh
        loc = (points - mesh.element_centroids[elements][:, None, :]) \
            / mesh.element_diameters[elements][:, None, None]
        a = self.exponents[:, 0]
        b = self.exponents[:, 1]
        mono = loc[..., 0, None] ** a * loc[..., 1, None] ** b
        return np.einsum("eij,eqj->eqi", self._ortho[elements], mono)

    def basis_grad_at(self, elements: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Basis gradients for given elements at given points, (nE', nq, nb, 2)."""
        mesh = self.mesh
        hK = mesh.element_diameters[elements]
        loc = (points - mesh.element_centroids[elements][:, None, :]) \
            / hK[:, None, None]
        a = self.exponents[:, 0]
        b = self.exponents[:, 1]
        x = loc[..., 0, None]
        y = loc[..., 1, None]
        with np.errstate(invalid="ignore"):
            dx = np.where(a > 0, a * x ** np.maximum(a - 1, 0) * y ** b, 0.0)
            dy = np.where(b > 0, b * x ** a * y ** np.maximum(b - 1, 0), 0.0)
        grad = np.stack([dx, dy], axis=-1) / hK[:, None, None, None]
        return np.einsum("eij,eqjd->eqid", self._ortho[elements], grad)

    def face_tables(self, exactness: int) -> FaceTables:
        key = int(exactness)
        if key in self._face_cache:
            return self._face_cache[key]
        rule = interval_rule(exactness)
        mesh = self.mesh
        s = 0.5 * (rule.points + 1.0)  # parameter in [0, 1]

        def face_geometry(faces):
            if not faces:
                return (np.zeros((0, 2, 2)), np.zeros((0, 2)), np.zeros(0),
                        np.zeros((0, rule.n_points, 2)), np.zeros((0, rule.n_points)))
            ends = np.array([[mesh.vertices[f.vertices[0]],
                              mesh.vertices[f.vertices[1]]] for f in faces])
            normals = np.array([f.normal for f in faces])
            lengths = np.array([f.length for f in faces])
            pts = ends[:, None, 0, :] + s[None, :, None] * (ends[:, 1, :]
                                                            - ends[:, 0, :])[:, None, :]
            wts = rule.weights[None, :] * (0.5 * lengths)[:, None]
            return ends, normals, lengths, pts, wts

        ifaces = mesh.interior_faces
        bfaces = mesh.boundary_faces
        _, i_nrm, i_len, i_pts, i_wts = face_geometry(list(ifaces))
        _, b_nrm, b_len, b_pts, b_wts = face_geometry(list(bfaces))
        i_left = np.array([f.left for f in ifaces], dtype=np.int64)
        i_right = np.array([f.right for f in ifaces], dtype=np.int64)
        b_owner = np.array([f.owner for f in bfaces], dtype=np.int64)
        tab = FaceTables(
            i_left=i_left, i_right=i_right, i_normal=i_nrm, i_h=i_len,
            i_points=i_pts, i_weights=i_wts,
            i_trace_left=self.basis_at(i_left, i_pts) if len(ifaces) else
            np.zeros((0, rule.n_points, self.n_scalar_basis)),
            i_trace_right=self.basis_at(i_right, i_pts) if len(ifaces) else
            np.zeros((0, rule.n_points, self.n_scalar_basis)),
            b_owner=b_owner, b_normal=b_nrm, b_h=b_len,
            b_points=b_pts, b_weights=b_wts,
            b_trace=self.basis_at(b_owner, b_pts) if len(bfaces) else
            np.zeros((0, rule.n_points, self.n_scalar_basis)),
        )
        self._face_cache[key] = tab
        return tab

    # -- convenience ---------------------------------------------------------

    def zero_field(self) -> "DGField":
        return DGField(self, np.zeros((self.mesh.n_elements, self.components,
                                       self.n_scalar_basis)))

    def random_field(self, rng: np.random.Generator) -> "DGField":
        coeffs = rng.standard_normal((self.mesh.n_elements, self.components,
                                      self.n_scalar_basis))
        return DGField(self, coeffs)

    def gram_deviation(self) -> float:
        """Max deviation of any element Gram matrix from the identity."""
        rule = triangle_rule(2 * self.degree)
        pts, wts = self._physical_volume_rule(rule)
        mono = self._monomials(pts)
        values = np.einsum("eij,eqj->eqi", self._ortho, mono)
        gram = np.einsum("eq,eqi,eqj->eij", wts, values, values)
        return float(np.max(np.abs(gram - np.eye(self.n_scalar_basis))))


class DGField:
    """Coefficient vector over a BrokenSpace; evaluation is element-local."""

    def __init__(self, space: BrokenSpace, coefficients: np.ndarray):
        coefficients = np.asarray(coefficients, dtype=float)
        expected = (space.mesh.n_elements, space.components, space.n_scalar_basis)
        if coefficients.shape != expected:
            raise ValueError(f"coefficient shape {coefficients.shape} != {expected}")
        self.space = space
        self.coefficients = coefficients

    @property
    def flat(self) -> np.ndarray:
        return self.coefficients.reshape(-1)

    @classmethod
    def from_flat(cls, space: BrokenSpace, flat: np.ndarray) -> "DGField":
        return cls(space, np.asarray(flat, dtype=float).reshape(
            space.mesh.n_elements, space.components, space.n_scalar_basis))

    def copy(self) -> "DGField":
        return DGField(self.space, self.coefficients.copy())

    def __add__(self, other: "DGField") -> "DGField":
        return DGField(self.space, self.coefficients + other.coefficients)

    def __sub__(self, other: "DGField") -> "DGField":
        return DGField(self.space, self.coefficients - other.coefficients)

    def __mul__(self, c: float) -> "DGField":
        return DGField(self.space, c * self.coefficients)

    __rmul__ = __mul__

    def values_at_tables(self, values_table: np.ndarray) -> np.ndarray:
        """Evaluate on precomputed basis tables; (nE, nq, nb) -> (nE, nq, m)."""
        return np.einsum("ecb,eqb->eqc", self.coefficients, values_table)

    def eval_elementwise(self, exactness: int) -> np.ndarray:
        tab = self.space.volume_tables(exactness)
        return self.values_at_tables(tab.values)

    def eval_at(self, elements: np.ndarray, points: np.ndarray) -> np.ndarray:
        tab = self.space.basis_at(np.asarray(elements), points)
        return np.einsum("ecb,eqb->eqc", self.coefficients[elements], tab)

    def l2_norm(self) -> float:
        """Exact L2 norm (Parseval, orthonormal element bases)."""
        return float(np.linalg.norm(self.coefficients))


def nonlinear_exactness(space: BrokenSpace, quad_bump: int = 3) -> int:
    return 2 * space.degree + quad_bump


def project_l2(space: BrokenSpace, f, exactness: int | None = None) -> DGField:
    """L2-orthogonal projection of a pointwise-evaluable function.

    ``f`` maps an (n, 2) array of coordinates to (n,) scalars or (n, m)
    vectors.  Quadrature exactness defaults to 2*degree + 3.
    """
    if exactness is None:
        exactness = nonlinear_exactness(space)
    tab = space.volume_tables(exactness)
    nE, nq, _ = tab.values.shape
    vals = np.asarray(f(tab.points.reshape(-1, 2)), dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    if vals.shape != (nE * nq, space.components):
        raise ValueError(f"function returned shape {vals.shape}, expected "
                         f"({nE * nq}, {space.components})")
    vals = vals.reshape(nE, nq, space.components)
    coeffs = np.einsum("eq,eqc,eqb->ecb", tab.weights, vals, tab.values)
    return DGField(space, coeffs)


def _broken_gradient_values(v: DGField, exactness: int) -> np.ndarray:
    """(nE, nq, m, 2) values of the element-local gradient."""
    tab = v.space.volume_tables(exactness)
    return np.einsum("ecb,eqbd->eqcd", v.coefficients, tab.grads)


def _jump_values(v: DGField, exactness: int):
    """Face jumps and weights.

    Returns (interior jump values (nFi, nq, m), interior weights, interior h,
    boundary trace values, boundary weights, boundary h).  The interior jump
    is trace_left - trace_right; combined with the left-to-right normal this
    realizes the jump of v (x) n up to the shared tensor factor.
    """
    ft = v.space.face_tables(exactness)
    c = v.coefficients
    jl = np.einsum("fcb,fqb->fqc", c[ft.i_left], ft.i_trace_left) \
        - np.einsum("fcb,fqb->fqc", c[ft.i_right], ft.i_trace_right)
    bt = np.einsum("fcb,fqb->fqc", c[ft.b_owner], ft.b_trace)
    return jl, ft.i_weights, ft.i_h, bt, ft.b_weights, ft.b_h


def jump_seminorm_power(v: DGField, p: float, exactness: int | None = None) -> float:
    """Integral over all faces of h^(1-p) |jump|^p (the p-th power)."""
    if exactness is None:
        exactness = nonlinear_exactness(v.space)
    ji, wi, hi, jb, wb, hb = _jump_values(v, exactness)
    mag_i = np.linalg.norm(ji, axis=2)
    mag_b = np.linalg.norm(jb, axis=2)
    total = 0.0
    if mag_i.size:
        total += float(np.sum(wi * hi[:, None] ** (1.0 - p) * mag_i ** p))
    if mag_b.size:
        total += float(np.sum(wb * hb[:, None] ** (1.0 - p) * mag_b ** p))
    return total


def dg_norm(v: DGField, p: float, flavor: str = "gradient",
            quad_bump: int = 3) -> float:
    """Broken W^{1,p} norm with h-weighted jump penalization.

    ``flavor`` selects the full-gradient norm (scalars and the interpolation
    inequalities) or the symmetric-gradient norm used for velocity fields.
    """
    if p <= 1.0:
        raise ValueError("p must exceed 1")
    if flavor not in ("gradient", "sym"):
        raise ValueError(f"unknown flavor {flavor!r}")
    if flavor == "sym" and v.space.components != 2:
        raise ValueError("symmetric-gradient flavor needs a 2-component field")
    exactness = nonlinear_exactness(v.space, quad_bump)
    tab = v.space.volume_tables(exactness)
    grads = _broken_gradient_values(v, exactness)
    if flavor == "sym":
        grads = 0.5 * (grads + np.swapaxes(grads, 2, 3))
    mag = np.sqrt(np.sum(grads ** 2, axis=(2, 3)))
    vol = float(np.sum(tab.weights * mag ** p))
    return (vol + jump_seminorm_power(v, p, exactness)) ** (1.0 / p)


def lebesgue_norm(v: DGField, s: float, quad_bump: int = 3) -> float:
    """L^s(Omega) norm via per-element quadrature (Euclidean pointwise norm)."""
    if s < 1.0:
        raise ValueError("s must be at least 1")
    exactness = nonlinear_exactness(v.space, quad_bump)
    tab = v.space.volume_tables(exactness)
    vals = v.values_at_tables(tab.values)
    mag = np.linalg.norm(vals, axis=2)
    return float(np.sum(tab.weights * mag ** s) ** (1.0 / s))


def linf_l2_over_samples(eval_at, times) -> float:
    """Max over sample times of the L2 norm of a time-dependent field.

    ``eval_at`` maps a time to a DGField (e.g. a trajectory accessor).
    """
    return max(eval_at(t).l2_norm() for t in times)
