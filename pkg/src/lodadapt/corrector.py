"""Localized corrector problems on element patches.

For a home element T with snapshot coefficient A~_T on its patch U_k(T), the
basis correctors solve

    (A~_T grad Q_i, grad v) = (A~_T grad phi_i, grad v)_T   for all v in V^f(U_k(T)),

with one right-hand side per corner hat phi_i of T, plus one for the source
(f, v)_T and one for the boundary extension (A~_T grad g, grad v)_T. The
fine-scale test space V^f(U_k(T)) is the fine Q1 space on the patch with zero
values on the patch boundary, intersected with the kernel of the
quasi-interpolation I_H; the kernel constraint is enforced with Lagrange
multipliers. All 2^d + 2 right-hand sides reuse a single factorization of the
patch stiffness block; the multiplier system is a small dense Schur
complement on the constraint rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as dla
import scipy.sparse.linalg as spl

from . import fem, grid
from .errors import NumericError

__all__ = [
    "CorrectorSet",
    "ElementContribution",
    "compute_element_correctors",
    "element_contribution",
    "stiffness_contribution",
    "load_contribution",
    "basis_elem_values",
]


def basis_elem_values(mesh):
    """Values of one coarse cell's 2^d corner hats at its fine element corners.

    Shape (r^d, 2^d, 2^d): [fine element within the cell, corner of that fine
    element, coarse hat]. Identical for every coarse cell on the uniform grid.
    """
    key = "basis_elem_vals"
    if key not in mesh._cache:
        d = mesh.dim
        P = fem.box_prolongation((1,) * d, tuple(mesh.refine)).toarray()
        conn = grid.box_connectivity(tuple(mesh.refine))
        mesh._cache[key] = P[conn]
    return mesh._cache[key]


@dataclass
class CorrectorSet:
    """Correctors of one home element, as nodal vectors on its patch.

    Q has one column per corner hat of the home element; Rf and Qg are the
    source and boundary-extension correctors. a_patch is the coefficient
    snapshot the correctors were computed with (per patch fine element).
    Vectors vanish on the fixed patch dofs by construction.
    """

    patch: grid.Patch
    Q: np.ndarray
    Rf: np.ndarray
    Qg: np.ndarray
    a_patch: np.ndarray
    include_rhs: bool = True
    # transient assembly products, dropped once contributions are extracted
    _kpatch: object = field(default=None, repr=False)
    _basis_loads: np.ndarray = field(default=None, repr=False)

    @property
    def T(self):
        return self.patch.T

    def release_assembly(self):
        self._kpatch = None
        self._basis_loads = None


@dataclass
class ElementContribution:
    """One element's block of the lagged coarse system.

    rows are the patch coarse nodes (test hats), cols the home element's
    corner nodes (trial directions); K is (n_rows, 2^d) and b (n_rows,).
    """

    T: int
    rows: np.ndarray
    cols: np.ndarray
    K: np.ndarray
    b: np.ndarray


def _center_loads(mesh, p, conn, a_patch, f, g):
    """Right-hand sides restricted to the home element T (full patch vectors)."""
    d = mesh.dim
    m = 2**d
    Kunit = fem.unit_stiffness(mesh)
    center = p.center_fine_elems_local()
    connT = conn[center]
    aT = a_patch[center]
    n_nodes = p.n_fine_nodes

    bas = basis_elem_values(mesh)  # (r^d, 2^d, m)
    contrib = aT[:, None, None] * np.einsum("pq,eqi->epi", Kunit, bas, optimize=True)
    basis_loads = np.zeros((n_nodes, m))
    for i in range(m):
        np.add.at(basis_loads[:, i], connT, contrib[:, :, i])

    g_load = np.zeros(n_nodes)
    if g is not None:
        g_patch = np.asarray(g, dtype=float)[p.fine_nodes()]
        ge = aT[:, None] * (g_patch[connT] @ Kunit.T)
        np.add.at(g_load, connT, ge)
    else:
        g_patch = None

    f_load = np.zeros(n_nodes)
    if f is not None:
        f = np.asarray(f, dtype=float).reshape(-1)
        if len(f) == mesh.n_fine_nodes:
            Munit = fem.unit_mass(mesh)
            f_patch = f[p.fine_nodes()]
            fe = f_patch[connT] @ Munit.T
        elif len(f) == mesh.n_fine_elems:
            vol = float(np.prod(mesh.h))
            fT = f[p.fine_elems()[center]]
            fe = np.repeat(fT[:, None] * (vol / connT.shape[1]), connT.shape[1], axis=1)
        else:
            raise ValueError("source vector length matches neither fine nodes nor elements")
        np.add.at(f_load, connT, fe)

    return basis_loads, f_load, g_load, g_patch


def compute_element_correctors(mesh, iop, T, k, a_patch, f=None, g=None, include_rhs=True):
    """Solve all corrector problems of one home element on its patch.

    Args:
        mesh: MeshPair.
        iop: InterpOperator for the kernel constraints.
        T: home coarse element index.
        k: patch radius in element layers.
        a_patch: coefficient snapshot per patch fine element (lexicographic
            patch order), strictly positive.
        f, g: global source (nodal or cellwise) and boundary extension (nodal);
            either may be None.
        include_rhs: when False the source corrector is skipped (kept at zero).
    """
    p = grid.patch(mesh, T, k)
    a_patch = np.ascontiguousarray(a_patch, dtype=float)
    if a_patch.shape != (p.n_fine_elems,):
        raise ValueError(
            f"coefficient snapshot has shape {a_patch.shape}, expected ({p.n_fine_elems},)"
        )
    if a_patch.min() <= 0.0:
        raise ValueError("coefficient snapshot must be strictly positive")

    conn = grid.box_connectivity(tuple(p.fine_counts))
    Kp = fem._assemble(conn, p.n_fine_nodes, fem.unit_stiffness(mesh), a_patch)
    dofs = grid.classify_fine_dofs(mesh, p)
    C = iop.patch_constraint_matrix(p, dofs)

    basis_loads, f_load, g_load, _ = _center_loads(mesh, p, conn, a_patch, f, g)

    m = 2**mesh.dim
    use_f = include_rhs and f is not None
    cols = [basis_loads]
    if use_f:
        cols.append(f_load[:, None])
    if g is not None:
        cols.append(g_load[:, None])
    R = np.hstack(cols)[dofs.free]

    Kff = Kp[dofs.free][:, dofs.free].tocsc()
    try:
        lu = spl.splu(Kff, permc_spec="MMD_AT_PLUS_A")
    except RuntimeError as exc:  # singular block: degenerate patch/bc setup
        raise NumericError(f"corrector block for element {T} is singular: {exc}") from exc
    q = lu.solve(R)
    if C.shape[0] > 0:
        Y = lu.solve(C.T.toarray())
        S = C @ Y
        try:
            cho = dla.cho_factor(S, lower=True)
        except dla.LinAlgError as exc:
            raise NumericError(
                f"constraint Schur complement for element {T} is singular: {exc}"
            ) from exc
        lam = dla.cho_solve(cho, C @ q)
        q = q - Y @ lam

    full = np.zeros((p.n_fine_nodes, q.shape[1]))
    full[dofs.free] = q
    Q = full[:, :m]
    j = m
    if use_f:
        Rf = full[:, j]
        j += 1
    else:
        Rf = np.zeros(p.n_fine_nodes)
    Qg = full[:, j] if g is not None else np.zeros(p.n_fine_nodes)

    cs = CorrectorSet(
        patch=p, Q=Q, Rf=Rf, Qg=Qg, a_patch=a_patch, include_rhs=include_rhs,
        _kpatch=Kp, _basis_loads=basis_loads,
    )
    return cs


def element_contribution(mesh, cs):
    """Stiffness block and load of one home element for the lagged system.

    K[i, j] = (A~_T (chi_T grad - grad Q_j) phi_j, grad phi_i) over the patch,
    b[i] = (A~_T grad (Qg - Rf), grad phi_i); phi_i runs over the patch coarse
    nodes, phi_j over the home element's corners. All integrands are supported
    in the patch, so patch-local prolongations of the hats are exact.
    """
    p = cs.patch
    Kp = cs._kpatch
    basis_loads = cs._basis_loads
    if Kp is None or basis_loads is None:
        conn = grid.box_connectivity(tuple(p.fine_counts))
        Kp = fem._assemble(conn, p.n_fine_nodes, fem.unit_stiffness(mesh), cs.a_patch)
        basis_loads, _, _, _ = _center_loads(mesh, p, conn, cs.a_patch, None, None)
    P = fem.box_prolongation(tuple(p.shape), tuple(mesh.refine))
    K_T = P.T @ (basis_loads - Kp @ cs.Q)
    b_T = P.T @ (Kp @ (cs.Qg - cs.Rf))
    mlt = mesh.coarse_multi(cs.T)
    cols = grid.box_lex_indices(mlt, mlt + 1, mesh.coarse + 1)
    return ElementContribution(T=cs.T, rows=p.coarse_nodes(), cols=cols, K=K_T, b=b_T)


def stiffness_contribution(mesh, cs):
    return element_contribution(mesh, cs).K


def load_contribution(mesh, cs):
    return element_contribution(mesh, cs).b
