import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dgflow.mesh import build_structured_mesh
from dgflow.space import (BrokenSpace, DGField, dg_norm, lebesgue_norm,
                          linf_l2_over_samples, project_l2)


@pytest.mark.parametrize("degree", [0, 1, 2, 3])
def test_orthonormal_basis(mesh22, degree):
    space = BrokenSpace(mesh22, degree)
    assert space.gram_deviation() <= 1e-12
    assert space.dofs_per_element == (degree + 1) * (degree + 2) // 2
    assert space.global_dof_count == mesh22.n_elements * space.dofs_per_element


def test_vector_space_dof_count(mesh22):
    space = BrokenSpace(mesh22, 2, components=2)
    assert space.dofs_per_element == 12
    assert space.global_dof_count == 8 * 12


def test_projection_reproduces_constants(mesh22):
    space = BrokenSpace(mesh22, 1)
    g = project_l2(space, lambda xy: np.full(len(xy), 4.25))
    vals = g.eval_elementwise(5)
    assert np.max(np.abs(vals - 4.25)) <= 1e-13


def test_projection_reproduces_polynomials(mesh22):
    space = BrokenSpace(mesh22, 2)
    f = lambda xy: 1.0 + 2.0 * xy[:, 0] - xy[:, 1] + 0.5 * xy[:, 0] * xy[:, 1]
    g = project_l2(space, f)
    tab = space.volume_tables(7)
    vals = g.values_at_tables(tab.values)[:, :, 0]
    ref = f(tab.points.reshape(-1, 2)).reshape(vals.shape)
    assert np.max(np.abs(vals - ref)) <= 1e-12


def test_projection_stability_sine(mesh22):
    space = BrokenSpace(mesh22, 1)
    f = lambda xy: np.sin(np.pi * xy[:, 0]) * np.sin(np.pi * xy[:, 1])
    g = project_l2(space, f)
    # the exact L2 norm of f on the unit square is 1/2
    assert lebesgue_norm(g, 2.0) <= 0.5 + 1e-12


def test_elementwise_locality(mesh22, rng):
    space = BrokenSpace(mesh22, 1)
    v = space.random_field(rng)
    w = v.copy()
    w.coefficients[3] += 1.0   # perturb one element only
    tab = space.volume_tables(5)
    dv = np.abs(v.values_at_tables(tab.values)
                - w.values_at_tables(tab.values))
    changed = np.nonzero(dv.max(axis=(1, 2)) > 0)[0]
    assert list(changed) == [3]


def test_dg_norm_constant_field(mesh11):
    space = BrokenSpace(mesh11, 1)
    one = project_l2(space, lambda xy: np.ones(len(xy)))
    assert dg_norm(one, 2.0) == pytest.approx(2.0, abs=1e-12)


def test_dg_norm_linear_field(mesh11):
    space = BrokenSpace(mesh11, 1)
    vx = project_l2(space, lambda xy: xy[:, 0])
    assert dg_norm(vx, 2.0) == pytest.approx(np.sqrt(8.0 / 3.0), rel=1e-12)


def test_dg_norm_zero(mesh22):
    space = BrokenSpace(mesh22, 1, components=2)
    assert dg_norm(space.zero_field(), 2.0, "sym") == 0.0


def test_dg_norm_parameter_validation(mesh22, rng):
    v = BrokenSpace(mesh22, 1).random_field(rng)
    with pytest.raises(ValueError):
        dg_norm(v, 1.0)
    with pytest.raises(ValueError):
        dg_norm(v, 2.0, "sym")   # scalar field has no symmetric gradient
    with pytest.raises(ValueError):
        lebesgue_norm(v, 0.5)


def test_lebesgue_norm_examples(mesh11):
    space = BrokenSpace(mesh11, 1)
    c2 = project_l2(space, lambda xy: np.full(len(xy), 2.0))
    assert lebesgue_norm(c2, 3.0) == pytest.approx(2.0, rel=1e-13)
    vx = project_l2(space, lambda xy: xy[:, 0])
    assert lebesgue_norm(vx, 2.0) == pytest.approx(np.sqrt(1.0 / 3.0), rel=1e-12)


def test_parseval(mesh22, rng):
    space = BrokenSpace(mesh22, 2, components=2)
    v = space.random_field(rng)
    assert lebesgue_norm(v, 2.0) == pytest.approx(v.l2_norm(), rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(c=st.floats(-50, 50, allow_nan=False).filter(lambda x: abs(x) > 1e-3),
       p=st.floats(1.2, 4.0))
def test_dg_norm_homogeneity(c, p):
    mesh = build_structured_mesh(2, 2)
    space = BrokenSpace(mesh, 1)
    v = space.random_field(np.random.default_rng(7))
    assert dg_norm(c * v, p) == pytest.approx(abs(c) * dg_norm(v, p), rel=1e-12)


def test_linf_l2_over_samples(mesh22):
    space = BrokenSpace(mesh22, 1)
    base = project_l2(space, lambda xy: xy[:, 0])

    def eval_at(t):
        return (1.0 + t * t) * base

    times = np.linspace(0.0, 2.0, 9)
    val = linf_l2_over_samples(eval_at, times)
    assert val == pytest.approx(5.0 * base.l2_norm(), rel=1e-12)


@pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
def test_poincare_bounded_under_refinement(p, rng):
    """Module invariant: the measured Poincare ratio must not blow up by more
    than 2x across three refinement levels (it trends non-increasing)."""
    maxima = []
    for n in (2, 4, 8):
        space = BrokenSpace(build_structured_mesh(n, n), 1)
        level_rng = np.random.default_rng(512 + n)
        maxima.append(max(lebesgue_norm(v, p) / dg_norm(v, p)
                          for v in (space.random_field(level_rng)
                                    for _ in range(100))))
    assert maxima[-1] <= 2.0 * maxima[0]
    assert maxima[-1] <= maxima[0] * 1.05 or maxima[1] <= maxima[0] * 1.05
