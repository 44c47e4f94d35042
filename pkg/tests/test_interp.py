"""Quasi-interpolation: broken projection, node averaging, constraints."""

import numpy as np

from lodadapt import fem, grid
from lodadapt.interp import InterpOperator


def mesh1d(coarse, refine, dirichlet=(0,)):
    return grid.build_mesh_pair([[0.0, 1.0]], [coarse], [refine], list(dirichlet))


def mesh2d(coarse=3, refine=3, dirichlet=(0,)):
    dom = [[0.0, 1.0], [0.0, 1.0]]
    return grid.build_mesh_pair(dom, [coarse] * 2, [refine] * 2, list(dirichlet))


def test_broken_projection_1d_hat():
    # one coarse element, two fine elements, v the fine hat peaking at 0.5;
    # the element mass system [[1/3, 1/6], [1/6, 1/3]] x = (1/4, 1/4) has the
    # constant solution 1/2
    m = mesh1d(1, 2, dirichlet=())
    iop = InterpOperator(m)
    v = np.array([0.0, 1.0, 0.0])
    broken = iop.project_broken(v)
    assert broken.shape == (1, 2)
    assert np.allclose(broken[0], [0.5, 0.5], atol=1e-14)


def test_interpolation_zero_on_dirichlet_nodes():
    m = mesh2d()
    iop = InterpOperator(m)
    rng = np.random.default_rng(0)
    v = rng.standard_normal(m.n_fine_nodes)
    out = iop.interpolate(v)
    assert np.all(out[m.dirichlet_coarse_mask()] == 0.0)


def test_hat_with_full_dirichlet_interpolates_to_zero():
    # both endpoints Dirichlet: the only coarse nodes are pinned, so the
    # interpolant of anything is zero
    m = mesh1d(1, 2, dirichlet=(0,))
    iop = InterpOperator(m)
    out = iop.interpolate(np.array([0.0, 1.0, 0.0]))
    assert np.all(out == 0.0)


def test_node_average_keeps_continuous_traces():
    # when element traces agree at a node and the node is not Dirichlet, the
    # average returns exactly the common value
    m = mesh2d(coarse=2, refine=1, dirichlet=())
    iop = InterpOperator(m)
    coords = m.coarse_node_coords()
    alpha = coords[:, 0] + 2.0 * coords[:, 1]
    conn = grid.box_connectivity(tuple(m.coarse))
    broken = alpha[conn]
    assert np.allclose(iop.node_average(broken), alpha, atol=1e-14)


def test_projective_on_coarse_functions():
    # I_H reproduces prolongated coarse functions away from the Dirichlet set
    m = mesh2d(coarse=4, refine=4)
    iop = InterpOperator(m)
    rng = np.random.default_rng(1)
    alpha = rng.standard_normal(m.n_coarse_nodes)
    alpha[m.dirichlet_coarse_mask()] = 0.0
    P = fem.prolongation(m)
    out = iop.interpolate(P @ alpha)
    assert np.allclose(out, alpha, atol=1e-12)


def test_idempotent():
    m = mesh2d(coarse=3, refine=2)
    iop = InterpOperator(m)
    P = fem.prolongation(m)
    rng = np.random.default_rng(2)
    v = rng.standard_normal(m.n_fine_nodes)
    once = iop.interpolate(v)
    twice = iop.interpolate(P @ once)
    assert np.allclose(twice, once, atol=1e-14)


def test_linear():
    m = mesh2d()
    iop = InterpOperator(m)
    rng = np.random.default_rng(3)
    v1 = rng.standard_normal(m.n_fine_nodes)
    v2 = rng.standard_normal(m.n_fine_nodes)
    lhs = iop.interpolate(2.0 * v1 - 3.0 * v2)
    rhs = 2.0 * iop.interpolate(v1) - 3.0 * iop.interpolate(v2)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_matrix_matches_interpolate():
    m = mesh2d(coarse=3, refine=3)
    iop = InterpOperator(m)
    M = iop.matrix()
    rng = np.random.default_rng(4)
    v = rng.standard_normal(m.n_fine_nodes)
    assert np.allclose(M @ v, iop.interpolate(v), atol=1e-13)


def test_constraint_rows_empty_for_all_dirichlet_patch():
    # a single coarse element whose boundary is entirely Dirichlet leaves no
    # coarse node to constrain
    m = mesh1d(1, 2, dirichlet=(0,))
    iop = InterpOperator(m)
    p = grid.patch(m, 0, 0)
    dofs = grid.classify_fine_dofs(m, p)
    C = iop.patch_constraint_matrix(p, dofs)
    assert C.shape[0] == 0
    assert list(dofs.free) == [1]


def test_constraint_rows_match_global_interpolation():
    # the patch constraint of a zero-extended patch function equals the global
    # I_H rows at the constrained coarse nodes
    m = mesh2d(coarse=4, refine=2)
    iop = InterpOperator(m)
    p = grid.patch(m, 5, 1)
    dofs = grid.classify_fine_dofs(m, p)
    C = iop.patch_constraint_matrix(p, dofs)
    rng = np.random.default_rng(5)
    vloc = np.zeros(p.n_fine_nodes)
    vloc[dofs.free] = rng.standard_normal(len(dofs.free))
    vglob = np.zeros(m.n_fine_nodes)
    vglob[p.fine_nodes()] = vloc
    expect = iop.interpolate(vglob)[dofs.cons_coarse_global]
    assert np.allclose(C @ vloc[dofs.free], expect, atol=1e-13)
