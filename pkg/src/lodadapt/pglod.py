"""Global coarse system of the lagged multiscale method.

The trial space is spanned by corrected coarse hats (each home element
contributes its block of corrected basis directions), the test space by the
plain coarse hats, so the stiffness matrix is assembled from the per-element
contributions alone. Only the corrector terms of the right-hand side lag
behind: the source and boundary terms with the true current coefficient are
reassembled every step, which is cheap because they live on the coarse test
space.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spl

from . import fem
from .errors import NumericError
from .grid import box_lex_indices

__all__ = ["assemble_global", "solve_coarse", "solve_coarse_fem", "reconstruct"]


def assemble_global(mesh, contribs, a_now=None, f=None, g=None):
    """Assemble the coarse stiffness matrix and right-hand side.

    Args:
        mesh: MeshPair.
        contribs: iterable of ElementContribution in deterministic order.
        a_now: current global coefficient, used for the fresh load terms.
        f, g: source and boundary extension; the load is
            (f, phi_i) - (A grad g, grad phi_i) + lagged corrector terms.

    Returns (K, b) over all coarse nodes; apply the Dirichlet reduction in
    solve_coarse.
    """
    n = mesh.n_coarse_nodes
    rows, cols, vals = [], [], []
    b = np.zeros(n)
    for c in contribs:
        nr, m = c.K.shape
        rows.append(np.repeat(c.rows, m))
        cols.append(np.tile(c.cols, nr))
        vals.append(c.K.reshape(-1))
        b[c.rows] += c.b
    K = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    ).tocsr()
    if f is not None or g is not None:
        P = fem.prolongation(mesh)
        if f is not None:
            b += P.T @ fem.load_vector(mesh, f)
        if g is not None:
            if a_now is None:
                raise ValueError("boundary load needs the current coefficient")
            Ka = fem.assemble_stiffness(mesh, a_now)
            b -= P.T @ (Ka @ np.asarray(g, dtype=float))
    return K, b


def solve_coarse(mesh, K, b):
    """Solve the reduced coarse system; returns the full nodal vector.

    Dirichlet coarse nodes carry zero (boundary data enters through g).
    """
    free = np.nonzero(~mesh.dirichlet_coarse_mask())[0]
    Kff = K[free][:, free].tocsc()
    bf = b[free]
    try:
        lu = spl.splu(Kff)
    except RuntimeError as exc:
        raise NumericError(f"coarse system factorization failed: {exc}") from exc
    x = lu.solve(bf)
    resid = np.linalg.norm(Kff @ x - bf)
    if not np.isfinite(resid) or resid > 1e-12 * max(np.linalg.norm(bf), 1.0):
        raise NumericError(f"coarse solve residual {resid:.3e} exceeds tolerance")
    alpha = np.zeros(mesh.n_coarse_nodes)
    alpha[free] = x
    return alpha


def solve_coarse_fem(mesh, a, f=None, g=None):
    """Standard coarse Q1 Galerkin solution, the comparison baseline.

    Exact quadrature via the fine grid; boundary handling matches the
    multiscale path (returned values vanish on the Dirichlet boundary, the
    physical field is the prolongation plus g).
    """
    Kf = fem.assemble_stiffness(mesh, a)
    P = fem.prolongation(mesh)
    K = (P.T @ Kf @ P).tocsr()
    b = np.zeros(mesh.n_coarse_nodes)
    if f is not None:
        b += P.T @ fem.load_vector(mesh, f)
    if g is not None:
        b -= P.T @ (Kf @ np.asarray(g, dtype=float))
    return solve_coarse(mesh, K, b)


def reconstruct(mesh, alpha, corrector_sets, include_corrections=True):
    """Fine-scale representative of the multiscale solution.

    u = P alpha - sum_T Q_T (alpha restricted to T's corners)
      + sum_T (Rf_T - Qg_T)            [when corrections are enabled]

    The result vanishes on the Dirichlet boundary; the physical field is
    u + g. I_H applied to the result returns alpha.
    """
    P = fem.prolongation(mesh)
    u = P @ np.asarray(alpha, dtype=float)
    if not include_corrections:
        return u
    for cs in corrector_sets:
        if cs is None:
            raise NumericError("reconstruction needs retained correctors")
        p = cs.patch
        nodes = p.fine_nodes()
        mlt = mesh.coarse_multi(cs.T)
        corners = box_lex_indices(mlt, mlt + 1, mesh.coarse + 1)
        u[nodes] -= cs.Q @ alpha[corners]
        u[nodes] += cs.Rf - cs.Qg
    return u
