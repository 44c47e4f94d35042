"""Q1 finite elements on the fine grid: element matrices, assembly, solves.

Coefficients are piecewise constant per fine element, so every integral used
here is evaluated exactly: element stiffness/mass matrices come from the
tensor-product closed form (equivalent to 2-point Gauss per axis), and all
bilinear forms reduce to weighted sums of per-element quadratic forms against
a single reference matrix, because the fine grid is uniform.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spl

from .grid import box_connectivity

__all__ = [
    "Coefficient",
    "element_stiffness",
    "element_mass",
    "unit_stiffness",
    "unit_mass",
    "fine_connectivity",
    "assemble_stiffness",
    "assemble_mass",
    "load_vector",
    "solve_fine_reference",
    "energy_seminorm",
    "l2_norm",
    "elem_quadratic_forms",
    "prolongation",
    "box_prolongation",
    "coarse_stiffness_exact",
]


class Coefficient:
    """A positive scalar coefficient, constant on each fine element.

    Values are stored flat in lexicographic fine-element order. The spectral
    bounds alpha/beta are cached on construction and reused by indicator code.
    """

    def __init__(self, values):
        values = np.ascontiguousarray(values, dtype=float)
        if values.ndim != 1:
            values = values.reshape(-1)
        if values.size == 0 or not np.all(np.isfinite(values)):
            raise ValueError("coefficient values must be finite and non-empty")
        if values.min() <= 0.0:
            raise ValueError("coefficient values must be strictly positive")
        self.values = values
        self.alpha = float(values.min())
        self.beta = float(values.max())

    def __len__(self):
        return len(self.values)


def coeff_values(a):
    """Accept a Coefficient or a bare array of per-element values."""
    if isinstance(a, Coefficient):
        return a.values
    return np.asarray(a, dtype=float).reshape(-1)


def _stiff_mass_1d(h):
    K = np.array([[1.0, -1.0], [-1.0, 1.0]]) / h
    M = np.array([[2.0, 1.0], [1.0, 2.0]]) * (h / 6.0)
    return K, M


def element_stiffness(extents, a=1.0):
    """Exact Q1 stiffness matrix of one box element with constant coefficient.

    Corner order is lexicographic in the corner offsets (x fastest).
    """
    extents = np.atleast_1d(np.asarray(extents, dtype=float))
    d = len(extents)
    pairs = [_stiff_mass_1d(h) for h in extents]
    K = np.zeros((2**d, 2**d))
    for axis in range(d):
        term = np.array([[1.0]])
        # kron builds indices with the LAST factor fastest, so feed axes in reverse
        for b in reversed(range(d)):
            factor = pairs[b][0] if b == axis else pairs[b][1]
            term = np.kron(term, factor)
        K += term
    return a * K


def element_mass(extents):
    """Exact Q1 mass matrix of one box element (lexicographic corner order)."""
    extents = np.atleast_1d(np.asarray(extents, dtype=float))
    d = len(extents)
    M = np.array([[1.0]])
    for b in reversed(range(d)):
        M = np.kron(M, _stiff_mass_1d(extents[b])[1])
    return M


def unit_stiffness(mesh):
    """Reference fine-element stiffness (coefficient 1), cached on the mesh."""
    key = "unit_stiffness"
    if key not in mesh._cache:
        mesh._cache[key] = element_stiffness(mesh.h)
    return mesh._cache[key]


def unit_mass(mesh):
    key = "unit_mass"
    if key not in mesh._cache:
        mesh._cache[key] = element_mass(mesh.h)
    return mesh._cache[key]


def fine_connectivity(mesh):
    key = "fine_conn"
    if key not in mesh._cache:
        mesh._cache[key] = box_connectivity(tuple(mesh.fine))
    return mesh._cache[key]


def _assemble(conn, n_nodes, ref, weights):
    """Sum weights[e] * ref over elements into a CSR matrix."""
    n_el, m = conn.shape
    vals = np.multiply.outer(weights, ref).reshape(-1)
    rows = np.repeat(conn, m, axis=1).reshape(-1)
    cols = np.tile(conn, (1, m)).reshape(-1)
    A = sp.coo_matrix((vals, (rows, cols)), shape=(n_nodes, n_nodes))
    return A.tocsr()


def assemble_stiffness(mesh, a, conn=None, n_nodes=None):
    """Fine stiffness matrix for coefficient ``a`` over all fine elements.

    Pass a patch-local ``conn``/``n_nodes`` to assemble on a patch instead.
    """
    vals = coeff_values(a)
    if conn is None:
        conn = fine_connectivity(mesh)
        n_nodes = mesh.n_fine_nodes
    return _assemble(conn, n_nodes, unit_stiffness(mesh), vals)


def assemble_mass(mesh, conn=None, n_nodes=None, weights=None):
    if conn is None:
        conn = fine_connectivity(mesh)
        n_nodes = mesh.n_fine_nodes
    if weights is None:
        weights = np.ones(len(conn))
    return _assemble(conn, n_nodes, unit_mass(mesh), weights)


def load_vector(mesh, f, conn=None, n_nodes=None):
    """Load vector (f, v) for nodal f (length n_fine_nodes) or cellwise f.

    Cellwise data integrates exactly as sum_e f_e * |e| / 2^d per corner.
    """
    if conn is None:
        conn = fine_connectivity(mesh)
        n_nodes = mesh.n_fine_nodes
    f = np.asarray(f, dtype=float).reshape(-1)
    out = np.zeros(n_nodes)
    if len(f) == n_nodes:
        M = unit_mass(mesh)
        contrib = f[conn] @ M.T
    elif len(f) == len(conn):
        vol = float(np.prod(mesh.h))
        contrib = np.repeat(f[:, None] * (vol / conn.shape[1]), conn.shape[1], axis=1)
    else:
        raise ValueError(
            f"load data length {len(f)} matches neither nodes ({n_nodes}) "
            f"nor elements ({len(conn)})"
        )
    np.add.at(out, conn, contrib)
    return out


def solve_fine_reference(mesh, a, f, g=None):
    """Reference Galerkin solution on the fine grid.

    Solves (A grad u, grad v) = (f, v) - (A grad g, grad v) for all fine v
    vanishing on the Dirichlet boundary; returns the nodal vector of u, which
    is zero on the Dirichlet boundary. The physical field is u + g.
    """
    K = assemble_stiffness(mesh, a)
    b = load_vector(mesh, f) if f is not None else np.zeros(mesh.n_fine_nodes)
    if g is not None:
        b = b - K @ np.asarray(g, dtype=float)
    free = np.nonzero(~mesh.dirichlet_fine_mask())[0]
    Kff = K[free][:, free].tocsc()
    lu = spl.splu(Kff, permc_spec="MMD_AT_PLUS_A")
    u = np.zeros(mesh.n_fine_nodes)
    u[free] = lu.solve(b[free])
    return u


def elem_quadratic_forms(ref, conn, u, v=None):
    """Per-element values u_e^T ref v_e; the building block of every norm here."""
    ue = u[conn]
    ve = ue if v is None else v[conn]
    return np.einsum("ep,pq,eq->e", ue, ref, ve, optimize=True)


def energy_seminorm(mesh, a, v, elems=None):
    """|v|_A over the whole mesh or over the fine elements listed in ``elems``."""
    vals = coeff_values(a)
    conn = fine_connectivity(mesh)
    if elems is not None:
        conn = conn[elems]
        vals = vals[elems]
    q = elem_quadratic_forms(unit_stiffness(mesh), conn, np.asarray(v, dtype=float))
    return float(np.sqrt(np.maximum(vals @ q, 0.0)))


def l2_norm(mesh, v, elems=None):
    conn = fine_connectivity(mesh)
    if elems is not None:
        conn = conn[elems]
    v = np.asarray(v, dtype=float).reshape(-1)
    if len(v) == mesh.n_fine_elems:
        # piecewise constant data
        vol = float(np.prod(mesh.h))
        vv = v if elems is None else v[elems]
        return float(np.sqrt(vol * np.sum(vv * vv)))
    q = elem_quadratic_forms(unit_mass(mesh), conn, v)
    return float(np.sqrt(max(q.sum(), 0.0)))


def _hat_matrix_1d(n_cells, r):
    """Values of the n_cells+1 coarse hats at the n_cells*r+1 fine nodes."""
    nf = n_cells * r
    x = np.arange(nf + 1) / r
    P = np.zeros((nf + 1, n_cells + 1))
    for c in range(n_cells + 1):
        P[:, c] = np.maximum(0.0, 1.0 - np.abs(x - c))
    return sp.csr_matrix(P)


@lru_cache(maxsize=None)
def box_prolongation(shape, refine):
    """Sparse coarse-to-fine nodal interpolation on a box of coarse cells.

    Exact: coarse Q1 functions restricted to nested fine cells are fine Q1.
    """
    shape = np.asarray(shape, dtype=np.int64)
    refine = np.asarray(refine, dtype=np.int64)
    P = None
    # kron builds the last-fed factor fastest; x must be fastest
    for a in reversed(range(len(shape))):
        P1 = _hat_matrix_1d(int(shape[a]), int(refine[a]))
        P = P1 if P is None else sp.kron(P, P1, format="csr")
    return P.tocsr()


def prolongation(mesh):
    """Global coarse-to-fine nodal interpolation matrix, cached on the mesh."""
    key = "prolongation"
    if key not in mesh._cache:
        mesh._cache[key] = box_prolongation(tuple(mesh.coarse), tuple(mesh.refine))
    return mesh._cache[key]


def coarse_stiffness_exact(mesh, a):
    """Standard Q1 stiffness on the coarse mesh with the fine coefficient.

    Quadrature is exact: the coarse basis prolongs exactly to the fine grid,
    so the matrix is P^T K_fine(a) P.
    """
    P = prolongation(mesh)
    K = assemble_stiffness(mesh, a)
    return (P.T @ K @ P).tocsr()
