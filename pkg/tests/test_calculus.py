import numpy as np
import pytest

from oracles import dense_lifting
from dgflow.mesh import build_structured_mesh
from dgflow.space import BrokenSpace, DGField, dg_norm, lebesgue_norm, project_l2
from dgflow.calculus import (ConformingP1Field, check_gn_admissible,
                             discrete_divergence, discrete_gradient,
                             discrete_sym_gradient, divergence_matrix, embed,
                             face_traces, get_tensor_ops, gn_ratio, lifting,
                             quasi_interpolate)


def hat_field(mesh, space):
    """Conforming piecewise-affine hat at the center vertex, times e1."""
    nodal = np.zeros((mesh.n_vertices, 2))
    center = np.argmin(np.linalg.norm(mesh.vertices - 0.5, axis=1))
    nodal[center, 0] = 1.0
    return ConformingP1Field(mesh, nodal).to_dgfield(space)


class TestFaceTraces:
    def test_boundary_jump_is_trace(self, mesh22, rng):
        v = BrokenSpace(mesh22, 1, components=2).random_field(rng)
        ft = face_traces(v)
        assert np.allclose(ft.b_average, ft.b_values)
        # [[v (x) n]] on the boundary is trace (x) outward normal
        recon = np.einsum("fqc,fd->fqcd", ft.b_values,
                          np.array([f.normal for f in mesh22.boundary_faces]))
        assert np.max(np.abs(ft.b_jump_n - recon)) == 0.0

    def test_continuous_field_has_no_interior_jump(self, mesh22):
        space = BrokenSpace(mesh22, 1, components=2)
        v = hat_field(mesh22, space)
        ft = face_traces(v)
        assert np.max(np.abs(ft.i_jump_n)) <= 1e-12

    def test_average_of_continuous_field(self, mesh22):
        space = BrokenSpace(mesh22, 2)
        f = lambda xy: xy[:, 0] ** 2 + xy[:, 1]
        v = project_l2(space, f)
        ft = face_traces(v)
        assert np.max(np.abs(ft.i_left_values - ft.i_right_values)) <= 1e-12


class TestLifting:
    def test_zero_field(self, mesh22):
        space = BrokenSpace(mesh22, 1, components=2)
        R = lifting(space.zero_field(), 0)
        assert np.max(np.abs(R.coefficients)) == 0.0

    def test_conforming_zero_trace_lifts_to_zero(self, mesh22):
        space = BrokenSpace(mesh22, 1, components=2)
        v = hat_field(mesh22, space)
        R = lifting(v)
        assert np.max(np.abs(R.coefficients)) <= 1e-12

    @pytest.mark.parametrize("l", [0, 1])
    def test_against_dense_solve(self, mesh11, rng, l):
        space = BrokenSpace(mesh11, 1, components=2)
        v = space.random_field(rng)
        R = lifting(v, l)
        _, evaluate = dense_lifting(space, v.coefficients, l)
        pts = rng.uniform(0.05, 0.4, size=(4, 2))
        pts[:, 0] += 0.5   # inside element 0 of the two-triangle mesh
        dense_vals = evaluate(0, pts)
        main_vals = R.eval_at(np.array([0]), pts[None])[0].reshape(-1, 2, 2)
        assert np.max(np.abs(dense_vals - main_vals)) <= 1e-12

    @pytest.mark.parametrize("l", [0, 1])
    def test_adjoint_identity_full_basis(self, mesh22, rng, l):
        """<R(v), t> = <[[v (x) n]], {t}> for every degree-l tensor basis t."""
        space = BrokenSpace(mesh22, 1, components=2)
        v = space.random_field(rng)
        R = lifting(v, l)
        ops = get_tensor_ops(space, l)
        fex = space.degree + ops.tspace.degree
        ftT = ops.tspace.face_tables(fex)
        ctd = face_traces(v, fex)
        worst = 0.0
        for E in range(mesh22.n_elements):
            for c in range(4):
                a, b = divmod(c, 2)
                for i in range(ops.n_l):
                    lhs = R.coefficients[E, c, i]
                    rhs = 0.0
                    for f in range(len(mesh22.interior_faces)):
                        for elem, tr in ((ftT.i_left[f], ftT.i_trace_left),
                                         (ftT.i_right[f], ftT.i_trace_right)):
                            if elem == E:
                                rhs += 0.5 * np.sum(ctd.i_weights[f]
                                                    * ctd.i_jump_n[f, :, a, b]
                                                    * tr[f, :, i])
                    for f in range(len(mesh22.boundary_faces)):
                        if ftT.b_owner[f] == E:
                            rhs += np.sum(ctd.b_weights[f]
                                          * ctd.b_jump_n[f, :, a, b]
                                          * ftT.b_trace[f, :, i])
                    worst = max(worst, abs(lhs - rhs))
        assert worst <= 1e-11

    def test_symmetric_variant_is_symmetric(self, mesh22, rng):
        space = BrokenSpace(mesh22, 2, components=2)
        v = space.random_field(rng)
        R = lifting(v, 1, sym=True)
        assert np.max(np.abs(R.coefficients[:, 1] - R.coefficients[:, 2])) == 0.0


class TestDiscreteGradient:
    def test_conforming_zero_trace_gradient(self, mesh22):
        """G_h v equals the broken gradient pointwise for a conforming field
        with zero boundary trace."""
        space = BrokenSpace(mesh22, 1, components=2)
        v = hat_field(mesh22, space)
        G = discrete_gradient(v)
        tab = space.volume_tables(4)
        grads = np.einsum("ecb,eqbd->eqcd", v.coefficients, tab.grads)
        tabT = G.space.volume_tables(4)
        gvals = G.values_at_tables(tabT.values).reshape(
            mesh22.n_elements, -1, 2, 2)
        assert np.max(np.abs(gvals - grads)) <= 1e-12

    def test_constant_field_gradient_is_minus_lifting(self, mesh22):
        space = BrokenSpace(mesh22, 1, components=2)
        c = project_l2(space, lambda xy: np.tile([1.0, -2.0], (len(xy), 1)))
        G = discrete_gradient(c, 0)
        R = lifting(c, 0)
        assert np.max(np.abs(G.coefficients + R.coefficients)) <= 1e-12

    def test_divergence_identity(self, mesh22, rng):
        """(q, Div_h v) = (q, div_h v) - <[[v.n]], {q}> for all pressure q."""
        V = BrokenSpace(mesh22, 2, components=2)
        M = BrokenSpace(mesh22, 1)
        B = divergence_matrix(V, M)
        v = V.random_field(rng)
        div = discrete_divergence(v, l=M.degree)
        ex = M.degree + div.space.degree
        tabM = M.volume_tables(ex)
        tabD = div.space.volume_tables(ex)
        divvals = div.values_at_tables(tabD.values)
        lhs = np.einsum("eq,eqc,eqb->ebc", tabM.weights, divvals,
                        tabM.values)[:, :, 0].ravel()
        rhs = B @ v.flat
        assert np.max(np.abs(lhs - rhs)) <= 1e-11

    def test_sym_gradient_consistency(self, mesh22, rng):
        space = BrokenSpace(mesh22, 1, components=2)
        v = space.random_field(rng)
        G = discrete_gradient(v)
        Gs = discrete_sym_gradient(v)
        sym = G.coefficients.copy()
        off = 0.5 * (sym[:, 1] + sym[:, 2])
        sym[:, 1] = off
        sym[:, 2] = off
        assert np.max(np.abs(Gs.coefficients - sym)) <= 1e-12

    def test_distributional_gradient_identity(self, mesh22, rng):
        """For a tensor test field in the lifting test space,
        (G_h^l v, t) + (v, div_h t) - <{v} (x) n, [[t]]> = 0 exactly."""
        V = BrokenSpace(mesh22, 1, components=2)
        l = 1
        v = V.random_field(rng)
        G = discrete_gradient(v, l)
        T = BrokenSpace(mesh22, l, components=4)
        smooth = lambda xy: np.stack([
            np.sin(np.pi * xy[:, 0]) * np.sin(np.pi * xy[:, 1]),
            xy[:, 0] * (1 - xy[:, 0]) * xy[:, 1] * (1 - xy[:, 1]),
            np.sin(np.pi * xy[:, 0]) * xy[:, 1] * (1 - xy[:, 1]),
            np.sin(2 * np.pi * xy[:, 1]) * xy[:, 0] * (1 - xy[:, 0])], axis=1)
        t = project_l2(T, smooth)
        ex = 8
        # (G, t)
        tabG = G.space.volume_tables(ex)
        tabT = T.volume_tables(ex)
        gv = G.values_at_tables(tabG.values)
        tv = t.values_at_tables(tabT.values)
        term1 = float(np.sum(tabG.weights[..., None] * gv * tv))
        # (v, div_h t): div of the tensor rows
        tgrads = np.einsum("ecb,eqbd->eqcd", t.coefficients, tabT.grads)
        divt = np.stack([tgrads[:, :, 0, 0] + tgrads[:, :, 1, 1],
                         tgrads[:, :, 2, 0] + tgrads[:, :, 3, 1]], axis=2)
        vv = v.values_at_tables(V.volume_tables(ex).values)
        term2 = float(np.sum(tabG.weights[..., None] * vv * divt))
        # interior correction <({v} (x) n) : [[t]]>
        ftV = V.face_tables(ex)
        ftT = T.face_tables(ex)
        cV, cT = v.coefficients, t.coefficients
        vl = np.einsum("fcb,fqb->fqc", cV[ftV.i_left], ftV.i_trace_left)
        vr = np.einsum("fcb,fqb->fqc", cV[ftV.i_right], ftV.i_trace_right)
        tl = np.einsum("fcb,fqb->fqc", cT[ftT.i_left], ftT.i_trace_left)
        tr = np.einsum("fcb,fqb->fqc", cT[ftT.i_right], ftT.i_trace_right)
        avg_v = 0.5 * (vl + vr)
        tjump = (tl - tr).reshape(tl.shape[0], tl.shape[1], 2, 2)
        corr = float(np.sum(ftV.i_weights[..., None]
                            * np.einsum("fqa,fb,fqab->fq", avg_v, ftV.i_normal,
                                        tjump)[..., None]))
        assert abs(term1 + term2 - corr) <= 1e-10


class TestQuasiInterpolation:
    def test_reproduces_conforming_affine(self, mesh22, rng):
        space = BrokenSpace(mesh22, 1)
        f = lambda xy: 0.5 + 1.5 * xy[:, 0] - 0.25 * xy[:, 1]
        v = project_l2(space, f)
        Q = quasi_interpolate(v)
        expected = 0.5 + 1.5 * mesh22.vertices[:, 0] - 0.25 * mesh22.vertices[:, 1]
        assert np.max(np.abs(Q.nodal[:, 0] - expected)) <= 1e-12
        back = Q.to_dgfield(space)
        assert np.max(np.abs(back.coefficients - v.coefficients)) <= 1e-12

    def test_reproduces_constants(self, mesh44):
        space = BrokenSpace(mesh44, 2)
        v = project_l2(space, lambda xy: np.full(len(xy), -3.5))
        Q = quasi_interpolate(v)
        assert np.max(np.abs(Q.nodal + 3.5)) <= 1e-12

    def test_vertex_average_definition(self, mesh11, rng):
        space = BrokenSpace(mesh11, 1)
        v = space.random_field(rng)
        Q = quasi_interpolate(v)
        # vertex 0 = (0,0) belongs to both triangles of the two-triangle mesh
        pts = np.array([[[0.0, 0.0]], [[0.0, 0.0]]])
        vals = v.eval_at(np.array([0, 1]), pts)[:, 0, 0]
        assert Q.nodal[0, 0] == pytest.approx(vals.mean(), rel=1e-13)

    def test_gradient_of_interpolant(self, mesh22):
        nodal = np.zeros((mesh22.n_vertices, 1))
        nodal[:, 0] = 2.0 * mesh22.vertices[:, 0] + mesh22.vertices[:, 1]
        f = ConformingP1Field(mesh22, nodal)
        grads = f.element_gradients()
        assert np.max(np.abs(grads[:, 0, 0] - 2.0)) <= 1e-13
        assert np.max(np.abs(grads[:, 0, 1] - 1.0)) <= 1e-13


class TestGagliardoNirenberg:
    def test_gamma_collapse(self, mesh22, rng):
        v = BrokenSpace(mesh22, 1).random_field(rng)
        assert gn_ratio(v, 2.0, 2.0, 2.0) == pytest.approx(1.0, abs=1e-14)

    def test_ladyzhenskaya_gamma(self):
        assert check_gn_admissible(2.0, 2.0, 4.0) == pytest.approx(0.5)

    def test_scaling_invariance(self, mesh22, rng):
        v = BrokenSpace(mesh22, 1).random_field(rng)
        r1 = gn_ratio(v, 2.0, 2.0, 4.0)
        r2 = gn_ratio(-7.5 * v, 2.0, 2.0, 4.0)
        assert r2 == pytest.approx(r1, rel=1e-12)

    @pytest.mark.parametrize("p,q,s,msg", [
        (3.0, 2.0, 1.5, "s >= q"),
        (1.5, 1.0, 9.0, "range is s in"),
        (2.0, 2.0, 1.0, "s >= q"),
    ])
    def test_inadmissible(self, mesh22, rng, p, q, s, msg):
        v = BrokenSpace(mesh22, 1).random_field(rng)
        with pytest.raises(ValueError, match=msg):
            gn_ratio(v, p, q, s)

    def test_embedding_exact(self, mesh22, rng):
        v = BrokenSpace(mesh22, 1).random_field(rng)
        w = embed(v, BrokenSpace(mesh22, 2))
        assert lebesgue_norm(w, 2.0) == pytest.approx(lebesgue_norm(v, 2.0),
                                                      rel=1e-12)
