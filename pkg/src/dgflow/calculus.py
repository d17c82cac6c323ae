"""Jumps, averages, lifting operators, discrete gradients and divergence,
vertex-averaging quasi-interpolation, and the Gagliardo-Nirenberg ratio.

The lifting of a velocity field v represents its face jumps [[v (x) n]] as a
volume tensor field tested against broken tensor polynomials of degree l;
subtracting it from the broken gradient gives the discrete gradient, whose
trace is the discrete divergence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh
from .space import BrokenSpace, DGField, dg_norm, lebesgue_norm, project_l2

SPACE_DIM = 2


# -- face trace data ---------------------------------------------------------

@dataclass(frozen=True)
class FaceTraceData:
    """Per-face traces, averages, and jump tensors at face quadrature points.

    ``i_jump_n`` holds the jump of v (x) n: shape (nFi, nq, m, 2) so that
    entry [..., a, b] is (v_left - v_right)_a n_b; boundary jumps analogously
    use the trace and the outward normal.  Averages carry plain field values.
    """

    i_left_values: np.ndarray
    i_right_values: np.ndarray
    i_average: np.ndarray
    i_jump_n: np.ndarray
    i_weights: np.ndarray
    i_h: np.ndarray
    b_values: np.ndarray
    b_average: np.ndarray
    b_jump_n: np.ndarray
    b_weights: np.ndarray
    b_h: np.ndarray


def face_traces(v: DGField, exactness: int | None = None) -> FaceTraceData:
    space = v.space
    if exactness is None:
        exactness = 2 * space.degree + 3
    ft = space.face_tables(exactness)
    c = v.coefficients
    left = np.einsum("fcb,fqb->fqc", c[ft.i_left], ft.i_trace_left)
    right = np.einsum("fcb,fqb->fqc", c[ft.i_right], ft.i_trace_right)
    bnd = np.einsum("fcb,fqb->fqc", c[ft.b_owner], ft.b_trace)
    i_jump = np.einsum("fqc,fd->fqcd", left - right, ft.i_normal)
    b_jump = np.einsum("fqc,fd->fqcd", bnd, ft.b_normal)
    return FaceTraceData(
        i_left_values=left, i_right_values=right,
        i_average=0.5 * (left + right), i_jump_n=i_jump,
        i_weights=ft.i_weights, i_h=ft.i_h,
        b_values=bnd, b_average=bnd, b_jump_n=b_jump,
        b_weights=ft.b_weights, b_h=ft.b_h,
    )


# -- lifting / discrete gradient operators -----------------------------------

def _dof_index(space: BrokenSpace, elems, comp, basis):
    """Flat dof index for (element, component, scalar basis) triples."""
    return (elems * space.components + comp) * space.n_scalar_basis + basis


@dataclass
class TensorOps:
    """Assembled operators from a velocity space into a broken tensor space."""

    vspace: BrokenSpace
    tspace: BrokenSpace      # components = 4, degree max(k_u - 1, l)
    l: int
    n_l: int                 # scalar basis size of the P_l test block
    lift: sp.csr_matrix      # N_T x N_V, jump lifting (zero rows beyond P_l)
    grad: sp.csr_matrix      # N_T x N_V, exact broken gradient
    gmat: sp.csr_matrix      # grad - lift


def _tensor_mass_solve(tspace: BrokenSpace) -> np.ndarray:
    """Inverse scalar mass matrices per element, shape (nE, nb, nb)."""
    tab = tspace.volume_tables(2 * tspace.degree)
    mass = np.einsum("eq,eqi,eqj->eij", tab.weights, tab.values, tab.values)
    return np.linalg.inv(mass)


def build_tensor_ops(vspace: BrokenSpace, l: int) -> TensorOps:
    if l < 0:
        raise ValueError("lifting degree must be nonnegative")
    if vspace.components != 2:
        raise ValueError("lifting acts on 2-component velocity fields")
    mesh = vspace.mesh
    k = vspace.degree
    deg_t = max(k - 1, l)
    tspace = BrokenSpace(mesh, deg_t, components=4)
    n_l = (l + 1) * (l + 2) // 2
    nbV = vspace.n_scalar_basis
    nbT = tspace.n_scalar_basis
    nE = mesh.n_elements

    # jump lifting right-hand side: rows test tensor dofs, cols velocity dofs
    fex = k + deg_t
    ftV = vspace.face_tables(fex)
    ftT = tspace.face_tables(fex)
    rows, cols, data = [], [], []

    def scatter(face_elems_test, face_elems_trial, mass_block, normals, factor):
        # mass_block: (nF, n_l, nbV); contribution factor * n_b * mass
        nF = mass_block.shape[0]
        if nF == 0:
            return
        ii, jj = np.meshgrid(np.arange(n_l), np.arange(nbV), indexing="ij")
        for a in range(SPACE_DIM):
            for b in range(SPACE_DIM):
                comp_t = SPACE_DIM * a + b
                vals = factor * normals[:, b, None, None] * mass_block
                r = _dof_index(tspace, face_elems_test[:, None, None], comp_t, ii[None])
                c = _dof_index(vspace, face_elems_trial[:, None, None], a, jj[None])
                rows.append(np.broadcast_to(r, vals.shape).ravel())
                cols.append(np.broadcast_to(c, vals.shape).ravel())
                data.append(vals.ravel())

    if len(mesh.interior_faces):
        trT = {"L": ftT.i_trace_left[:, :, :n_l], "R": ftT.i_trace_right[:, :, :n_l]}
        trV = {"L": ftV.i_trace_left, "R": ftV.i_trace_right}
        el = {"L": ftT.i_left, "R": ftT.i_right}
        sign = {"L": 1.0, "R": -1.0}
        for ts in ("L", "R"):
            for tr in ("L", "R"):
                mass = np.einsum("fq,fqi,fqj->fij", ftV.i_weights, trT[ts], trV[tr])
                scatter(el[ts], el[tr], mass, ftT.i_normal, 0.5 * sign[tr])
    if len(mesh.boundary_faces):
        mass = np.einsum("fq,fqi,fqj->fij", ftV.b_weights,
                         ftT.b_trace[:, :, :n_l], ftV.b_trace)
        scatter(ftT.b_owner, ftT.b_owner, mass, ftT.b_normal, 1.0)

    shape = (tspace.global_dof_count, vspace.global_dof_count)
    if rows:
        lift_rhs = sp.coo_matrix((np.concatenate(data),
                                  (np.concatenate(rows), np.concatenate(cols))),
                                 shape=shape).tocsr()
    else:
        lift_rhs = sp.csr_matrix(shape)

    # solve the (block-diagonal SPD) tensor mass system
    minv = _tensor_mass_solve(tspace)
    mi_rows, mi_cols, mi_data = [], [], []
    ii, jj = np.meshgrid(np.arange(nbT), np.arange(nbT), indexing="ij")
    for c in range(4):
        r = _dof_index(tspace, np.arange(nE)[:, None, None], c, ii[None])
        cc = _dof_index(tspace, np.arange(nE)[:, None, None], c, jj[None])
        mi_rows.append(np.broadcast_to(r, minv.shape).ravel())
        mi_cols.append(np.broadcast_to(cc, minv.shape).ravel())
        mi_data.append(minv.ravel())
    minv_sp = sp.coo_matrix((np.concatenate(mi_data),
                             (np.concatenate(mi_rows), np.concatenate(mi_cols))),
                            shape=(shape[0], shape[0])).tocsr()
    lift = (minv_sp @ lift_rhs).tocsr()

    # exact broken gradient into the tensor space
    vex = max(k - 1, 0) + deg_t
    tabV = vspace.volume_tables(vex)
    tabT = tspace.volume_tables(vex)
    gblock = np.einsum("eq,eqi,eqjb->eijb", tabV.weights, tabT.values, tabV.grads)
    g_rows, g_cols, g_data = [], [], []
    ii, jj = np.meshgrid(np.arange(nbT), np.arange(nbV), indexing="ij")
    eidx = np.arange(nE)[:, None, None]
    for a in range(SPACE_DIM):
        for b in range(SPACE_DIM):
            comp_t = SPACE_DIM * a + b
            g_rows.append(np.broadcast_to(
                _dof_index(tspace, eidx, comp_t, ii[None]), gblock[..., b].shape).ravel())
            g_cols.append(np.broadcast_to(
                _dof_index(vspace, eidx, a, jj[None]), gblock[..., b].shape).ravel())
            g_data.append(gblock[..., b].ravel())
    grad = sp.coo_matrix((np.concatenate(g_data),
                          (np.concatenate(g_rows), np.concatenate(g_cols))),
                         shape=shape).tocsr()
    # grad must represent the mass-projected gradient; with orthonormal bases
    # the projection is the identity on P_{k-1} and gblock already is exact.
    grad = (minv_sp @ grad).tocsr()

    return TensorOps(vspace=vspace, tspace=tspace, l=l, n_l=n_l,
                     lift=lift, grad=grad, gmat=(grad - lift).tocsr())


def get_tensor_ops(vspace: BrokenSpace, l: int) -> TensorOps:
    cache = getattr(vspace, "_tensor_ops_cache", None)
    if cache is None:
        cache = {}
        vspace._tensor_ops_cache = cache
    if l not in cache:
        cache[l] = build_tensor_ops(vspace, l)
    return cache[l]


def _default_l(v: DGField, l: int | None) -> int:
    return max(v.space.degree - 1, 0) if l is None else l


def symmetrize_tensor_coeffs(coeffs: np.ndarray) -> np.ndarray:
    """Symmetrize (nE, 4, nb) tensor coefficients in the 2x2 component slots."""
    out = coeffs.copy()
    off = 0.5 * (coeffs[:, 1, :] + coeffs[:, 2, :])
    out[:, 1, :] = off
    out[:, 2, :] = off
    return out


def lifting(v: DGField, l: int | None = None, sym: bool = False) -> DGField:
    """Jump lifting R^l(v) (symmetric variant optional) as a tensor field."""
    l = _default_l(v, l)
    ops = get_tensor_ops(v.space, l)
    coeffs = (ops.lift @ v.flat).reshape(v.space.mesh.n_elements, 4,
                                         ops.tspace.n_scalar_basis)
    if sym:
        coeffs = symmetrize_tensor_coeffs(coeffs)
    return DGField(ops.tspace, coeffs)


def discrete_gradient(v: DGField, l: int | None = None) -> DGField:
    """Broken gradient minus jump lifting, in P_max(k-1, l) tensors."""
    l = _default_l(v, l)
    ops = get_tensor_ops(v.space, l)
    coeffs = (ops.gmat @ v.flat).reshape(v.space.mesh.n_elements, 4,
                                         ops.tspace.n_scalar_basis)
    return DGField(ops.tspace, coeffs)


def discrete_sym_gradient(v: DGField, l: int | None = None) -> DGField:
    """Broken symmetric gradient minus symmetric jump lifting."""
    l = _default_l(v, l)
    ops = get_tensor_ops(v.space, l)
    gcoef = (ops.grad @ v.flat).reshape(v.space.mesh.n_elements, 4,
                                        ops.tspace.n_scalar_basis)
    rcoef = (ops.lift @ v.flat).reshape(v.space.mesh.n_elements, 4,
                                        ops.tspace.n_scalar_basis)
    coeffs = symmetrize_tensor_coeffs(gcoef) - symmetrize_tensor_coeffs(rcoef)
    return DGField(ops.tspace, coeffs)


def discrete_divergence(v: DGField, l: int | None = None) -> DGField:
    """Trace of the discrete gradient, a scalar broken field."""
    g = discrete_gradient(v, l)
    coeffs = (g.coefficients[:, 0, :] + g.coefficients[:, 3, :])[:, None, :]
    scal = BrokenSpace(g.space.mesh, g.space.degree, components=1)
    return DGField(scal, coeffs)


def divergence_matrix(vspace: BrokenSpace, mspace: BrokenSpace) -> sp.csr_matrix:
    """Matrix of (q, Div_h^l v) with l = pressure degree, via the identity
    (q, div_h v) - <[[v . n]], {q}>, so no lifting solve is involved."""
    if mspace.mesh is not vspace.mesh:
        raise ValueError("spaces must share a mesh")
    mesh = vspace.mesh
    nbV, nbM = vspace.n_scalar_basis, mspace.n_scalar_basis
    nE = mesh.n_elements
    rows, cols, data = [], [], []

    vex = max(vspace.degree - 1, 0) + mspace.degree
    tabV = vspace.volume_tables(vex)
    tabM = mspace.volume_tables(vex)
    vol = np.einsum("eq,eqi,eqja->eija", tabV.weights, tabM.values, tabV.grads)
    ii, jj = np.meshgrid(np.arange(nbM), np.arange(nbV), indexing="ij")
    eidx = np.arange(nE)[:, None, None]
    for a in range(SPACE_DIM):
        rows.append(np.broadcast_to(
            _dof_index(mspace, eidx, 0, ii[None]), vol[..., a].shape).ravel())
        cols.append(np.broadcast_to(
            _dof_index(vspace, eidx, a, jj[None]), vol[..., a].shape).ravel())
        data.append(vol[..., a].ravel())

    fex = vspace.degree + mspace.degree
    ftV = vspace.face_tables(fex)
    ftM = mspace.face_tables(fex)

    def face_scatter(test_elems, trial_elems, mass, normals, factor):
        nF = mass.shape[0]
        if nF == 0:
            return
        i2, j2 = np.meshgrid(np.arange(nbM), np.arange(nbV), indexing="ij")
        for a in range(SPACE_DIM):
            vals = factor * normals[:, a, None, None] * mass
            rows.append(np.broadcast_to(_dof_index(
                mspace, test_elems[:, None, None], 0, i2[None]), vals.shape).ravel())
            cols.append(np.broadcast_to(_dof_index(
                vspace, trial_elems[:, None, None], a, j2[None]), vals.shape).ravel())
            data.append(vals.ravel())

    if len(mesh.interior_faces):
        trM = {"L": ftM.i_trace_left, "R": ftM.i_trace_right}
        trV = {"L": ftV.i_trace_left, "R": ftV.i_trace_right}
        el = {"L": ftM.i_left, "R": ftM.i_right}
        sign = {"L": 1.0, "R": -1.0}
        for ts in ("L", "R"):
            for tr in ("L", "R"):
                mass = np.einsum("fq,fqi,fqj->fij", ftV.i_weights, trM[ts], trV[tr])
                face_scatter(el[ts], el[tr], mass, ftM.i_normal, -0.5 * sign[tr])
    if len(mesh.boundary_faces):
        mass = np.einsum("fq,fqi,fqj->fij", ftV.b_weights, ftM.b_trace, ftV.b_trace)
        face_scatter(ftM.b_owner, ftM.b_owner, mass, ftM.b_normal, -1.0)

    return sp.coo_matrix((np.concatenate(data),
                          (np.concatenate(rows), np.concatenate(cols))),
                         shape=(mspace.global_dof_count,
                                vspace.global_dof_count)).tocsr()


# -- quasi-interpolation -------------------------------------------------------

class ConformingP1Field:
    """Continuous piecewise-affine field given by vertex values."""

    def __init__(self, mesh: Mesh, nodal: np.ndarray):
        self.mesh = mesh
        self.nodal = np.asarray(nodal, dtype=float)
        if self.nodal.shape[0] != mesh.n_vertices:
            raise ValueError("one nodal value row per mesh vertex required")

    @property
    def components(self) -> int:
        return self.nodal.shape[1]

    def element_gradients(self) -> np.ndarray:
        """Constant per-element gradients, shape (nE, m, 2)."""
        mesh = self.mesh
        tri = mesh.elements
        p0 = mesh.vertices[tri[:, 0]]
        p1 = mesh.vertices[tri[:, 1]]
        p2 = mesh.vertices[tri[:, 2]]
        det = 2.0 * mesh.element_areas
        # gradients of the barycentric coordinates
        g0 = np.stack([p1[:, 1] - p2[:, 1], p2[:, 0] - p1[:, 0]], axis=1) / det[:, None]
        g1 = np.stack([p2[:, 1] - p0[:, 1], p0[:, 0] - p2[:, 0]], axis=1) / det[:, None]
        g2 = np.stack([p0[:, 1] - p1[:, 1], p1[:, 0] - p0[:, 0]], axis=1) / det[:, None]
        n0 = self.nodal[tri[:, 0]]
        n1 = self.nodal[tri[:, 1]]
        n2 = self.nodal[tri[:, 2]]
        return (np.einsum("em,ed->emd", n0, g0)
                + np.einsum("em,ed->emd", n1, g1)
                + np.einsum("em,ed->emd", n2, g2))

    def values_elementwise(self, points: np.ndarray) -> np.ndarray:
        """Evaluate at per-element points (nE, nq, 2) -> (nE, nq, m)."""
        mesh = self.mesh
        tri = mesh.elements
        p0 = mesh.vertices[tri[:, 0]]
        grads = self.element_gradients()
        base = self.nodal[tri[:, 0]]
        rel = points - p0[:, None, :]
        return base[:, None, :] + np.einsum("emd,eqd->eqm", grads, rel)

    def to_dgfield(self, space: BrokenSpace) -> DGField:
        """Exact representation in a broken space of degree >= 1."""
        if space.degree < 1:
            raise ValueError("target degree must be at least 1")
        if space.components != self.components:
            raise ValueError("component count mismatch")
        tab = space.volume_tables(2 * space.degree)
        vals = self.values_elementwise(tab.points)
        coeffs = np.einsum("eq,eqc,eqb->ecb", tab.weights, vals, tab.values)
        return DGField(space, coeffs)

    def grad_lp_norm(self, p: float) -> float:
        grads = self.element_gradients()
        mag = np.sqrt(np.sum(grads ** 2, axis=(1, 2)))
        return float(np.sum(self.mesh.element_areas * mag ** p) ** (1.0 / p))


def quasi_interpolate(v: DGField) -> ConformingP1Field:
    """Vertex-averaging interpolant into continuous piecewise-affines.

    The nodal value at each vertex is the arithmetic mean of the element
    limits over all elements containing the vertex; boundary vertices average
    interior traces the same way.
    """
    mesh = v.space.mesh
    corners = mesh.vertices[mesh.elements]          # (nE, 3, 2)
    tab = v.space.basis_at(np.arange(mesh.n_elements), corners)
    vals = np.einsum("ecb,eqb->eqc", v.coefficients, tab)   # (nE, 3, m)
    sums = np.zeros((mesh.n_vertices, v.space.components))
    counts = np.zeros(mesh.n_vertices)
    np.add.at(sums, mesh.elements.ravel(), vals.reshape(-1, v.space.components))
    np.add.at(counts, mesh.elements.ravel(), 1.0)
    return ConformingP1Field(mesh, sums / counts[:, None])


def embed(v: DGField, space: BrokenSpace) -> DGField:
    """Exact re-expansion of v in a space of at least the same degree."""
    if space.degree < v.space.degree:
        raise ValueError("target degree too small for exact embedding")
    tab = space.volume_tables(v.space.degree + space.degree)
    vals = v.eval_at(np.arange(space.mesh.n_elements), tab.points)
    coeffs = np.einsum("eq,eqc,eqb->ecb", tab.weights, vals, tab.values)
    return DGField(space, coeffs)


# -- Gagliardo-Nirenberg ratio -------------------------------------------------

def gn_exponent(p: float, q: float, s: float, d: int = SPACE_DIM) -> float:
    """Interpolation exponent (1/q - 1/s) / (1/q + 1/d - 1/p)."""
    return (1.0 / q - 1.0 / s) / (1.0 / q + 1.0 / d - 1.0 / p)


def check_gn_admissible(p: float, q: float, s: float, d: int = SPACE_DIM) -> float:
    """Validate the exponent triple and return gamma; raises ValueError."""
    if p <= 1.0:
        raise ValueError("p must exceed 1")
    if q < 1.0 or s < 1.0:
        raise ValueError("q and s must be at least 1")
    gamma = gn_exponent(p, q, s, d)
    if p < d:
        p_star = d * p / (d - p)
        if q <= p_star:
            if not (q <= s <= p_star):
                raise ValueError(
                    f"inadmissible s={s}: for p={p} < {d} and q={q} <= p*={p_star:g} "
                    f"the range is s in [q, p*]")
        else:
            if not (p_star <= s <= q):
                raise ValueError(
                    f"inadmissible s={s}: for p={p} < {d} and q={q} >= p*={p_star:g} "
                    f"the range is s in [p*, q]")
        if not (0.0 <= gamma <= 1.0):
            raise ValueError(f"inadmissible exponents: gamma={gamma:g} not in [0, 1]")
    else:
        if s < q:
            raise ValueError(f"inadmissible s={s}: for p={p} >= {d} the range is s >= q={q}")
        bound = d * p / (d * p + q * (p - d))
        if not (0.0 <= gamma < bound or (gamma == 0.0)):
            raise ValueError(
                f"inadmissible exponents: gamma={gamma:g} must lie in [0, {bound:g})")
    return gamma


def gn_ratio(v: DGField, p: float, q: float, s: float) -> float:
    """Measured constant of the broken Gagliardo-Nirenberg inequality,
    ||v||_{L^s} / (||v||_{h,p}^gamma ||v||_{L^q}^{1-gamma})."""
    gamma = check_gn_admissible(p, q, s)
    num = lebesgue_norm(v, s)
    if gamma == 0.0:
        return num / lebesgue_norm(v, q)
    den = dg_norm(v, p) ** gamma * lebesgue_norm(v, q) ** (1.0 - gamma)
    return num / den
