"""Computable error indicators for lagged correctors.

The fine indicator of a home element T measures how far the snapshot
coefficient A~_T has drifted from the current A on the patch:

    e_u(T)^2 = max over coarse w, |w|_{A,T} = 1, of
               || (A~_T - A) A^{-1/2} (chi_T grad w - grad Q_T w) ||^2_{L2(U_k(T))},

a small generalized eigenvalue problem over the 2^d - 1 dimensional reduced
corner basis (gradients on T kill constants, so one corner is dropped).
Companion indicators e_f and e_g control the source and boundary correctors.

Every integral is a per-fine-element quadratic form against the reference
stiffness, so each element stores a gradient product table once per corrector
recompute; evaluating indicators for a new A is then a weighted sum plus a
tiny eigenproblem. The coarse indicators E_* bound e_*^2 using only per-cell
data (the mu table and coefficient extrema), which is what long saturation
sweeps keep in memory instead of the correctors themselves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as dla

from . import fem, grid

__all__ = [
    "ProductTable",
    "MuTable",
    "max_gevp",
    "build_product_table",
    "fine_indicators",
    "e_u_fine",
    "e_fg_fine",
    "extract_mu_table",
    "coarse_indicators",
    "generic_delta_ratio",
    "darcy_delta_ratio",
]


def max_gevp(B, C, drop=0):
    """Largest eigenvalue of B x = mu C x over the reduced corner basis.

    Both matrices are restricted to the corner hats with index ``drop``
    removed (the lexicographically smallest corner by default); the reduced C
    is positive definite because no combination of the remaining hats is
    constant on the element. The value is independent of which corner is
    dropped.
    """
    keep = [i for i in range(B.shape[0]) if i != drop]
    Br = B[np.ix_(keep, keep)]
    Cr = C[np.ix_(keep, keep)]
    Br = 0.5 * (Br + Br.T)
    Cr = 0.5 * (Cr + Cr.T)
    w = dla.eigh(Br, Cr, eigvals_only=True)
    return float(max(w[-1], 0.0))


def basis_pair_products(mesh):
    """Unit-coefficient gradient products of the corner hats, per fine element.

    p[e, i, j] = integral over fine element e (within one coarse cell) of
    grad phi_i . grad phi_j; shared by every coarse cell of the uniform grid.
    """
    key = "basis_pair_products"
    if key not in mesh._cache:
        from .corrector import basis_elem_values

        bas = basis_elem_values(mesh)
        Kunit = fem.unit_stiffness(mesh)
        mesh._cache[key] = np.einsum("epi,pq,eqj->eij", bas, Kunit, bas, optimize=True)
    return mesh._cache[key]


@dataclass
class ProductTable:
    """Per-fine-element gradient products of one element's corrector data."""

    patch: grid.Patch
    a_tilde: np.ndarray
    q_bb: np.ndarray  # (n_patch_fine_elems, 2^d, 2^d)
    q_ff: np.ndarray  # (n_patch_fine_elems,)
    q_gg: np.ndarray
    gq_center: np.ndarray  # unit-coefficient |grad g|^2 integrals on T
    fnorm2: float  # ||f||^2_{L2(T)}
    center_local: np.ndarray = field(repr=False, default=None)
    fine_gidx: np.ndarray = field(repr=False, default=None)


def build_product_table(mesh, cs, f=None, g=None):
    """Assemble the gradient product table of a corrector set."""
    from .corrector import basis_elem_values

    p = cs.patch
    conn = grid.box_connectivity(tuple(p.fine_counts))
    Kunit = fem.unit_stiffness(mesh)
    center = p.center_fine_elems_local()
    connT = conn[center]

    zloc = -cs.Q[conn]  # (n_pe, 2^d, m)
    zloc[center] += basis_elem_values(mesh)
    q_bb = np.einsum("epi,pq,eqj->eij", zloc, Kunit, zloc, optimize=True)

    rloc = cs.Rf[conn]
    q_ff = np.einsum("ep,pq,eq->e", rloc, Kunit, rloc, optimize=True)

    if g is not None:
        g_patch = np.asarray(g, dtype=float)[p.fine_nodes()]
        zg = -cs.Qg[conn]
        zg[center] += g_patch[connT]
        q_gg = np.einsum("ep,pq,eq->e", zg, Kunit, zg, optimize=True)
        gT = g_patch[connT]
        gq_center = np.einsum("ep,pq,eq->e", gT, Kunit, gT, optimize=True)
    else:
        q_gg = np.zeros(p.n_fine_elems)
        gq_center = np.zeros(len(center))

    fnorm2 = 0.0
    if f is not None:
        f = np.asarray(f, dtype=float).reshape(-1)
        if len(f) == mesh.n_fine_nodes:
            fT = f[p.fine_nodes()][connT]
            Munit = fem.unit_mass(mesh)
            fnorm2 = float(np.einsum("ep,pq,eq->", fT, Munit, fT, optimize=True))
        elif len(f) == mesh.n_fine_elems:
            vol = float(np.prod(mesh.h))
            fc = f[p.fine_elems()[center]]
            fnorm2 = float(vol * np.sum(fc * fc))
        else:
            raise ValueError("source vector length matches neither fine nodes nor elements")

    return ProductTable(
        patch=p,
        a_tilde=cs.a_patch,
        q_bb=q_bb,
        q_ff=q_ff,
        q_gg=q_gg,
        gq_center=gq_center,
        fnorm2=fnorm2,
        center_local=center,
        fine_gidx=p.fine_elems(),
    )


def fine_indicators(mesh, table, a_now):
    """(e_u, e_f, e_g) of one element for the current global coefficient."""
    a_now = fem.coeff_values(a_now)
    a_pat = a_now[table.fine_gidx]
    at = table.a_tilde
    diff = at - a_pat
    w = diff * diff / a_pat
    B = np.einsum("e,eij->ij", w, table.q_bb, optimize=True)
    aT = a_pat[table.center_local]
    Cmat = np.einsum("e,eij->ij", aT, basis_pair_products(mesh), optimize=True)
    e_u = float(np.sqrt(max_gevp(B, Cmat)))
    e_f = 0.0
    if table.fnorm2 > 0.0:
        e_f = float(np.sqrt(max(w @ table.q_ff, 0.0) / table.fnorm2))
    e_g = 0.0
    den = float(aT @ table.gq_center)
    if den > 0.0:
        e_g = float(np.sqrt(max(w @ table.q_gg, 0.0) / den))
    return e_u, e_f, e_g


def e_u_fine(mesh, cs, a_now):
    """Basis-corrector indicator of one element against the current coefficient."""
    return fine_indicators(mesh, build_product_table(mesh, cs), a_now)[0]


def e_fg_fine(mesh, cs, a_now, f=None, g=None):
    """(e_f, e_g) of one element against the current coefficient."""
    _, e_f, e_g = fine_indicators(mesh, build_product_table(mesh, cs, f, g), a_now)
    return e_f, e_g


@dataclass
class MuTable:
    """Per-patch-cell spectral data saved at corrector time.

    mu[c] bounds the reduced eigenvalue problem restricted to patch cell c
    with the snapshot coefficient on both sides; s_f and s_g are the per-cell
    corrector energies normalized by the home element's data norms. lam holds
    the per-cell scalar mobility snapshot in two-phase mode (unused otherwise).
    """

    T: int
    cells: np.ndarray
    mu: np.ndarray
    s_f: np.ndarray
    s_g: np.ndarray
    center_cell: int
    lam: np.ndarray = None


def extract_mu_table(mesh, table):
    """Reduce a product table to the coarse per-cell quantities."""
    p = table.patch
    cells_local = p.cells_fine_elems_local()  # (n_cells, r^d)
    at = table.a_tilde
    at_cells = at[cells_local]
    B_cells = np.einsum("ce,ceij->cij", at_cells, table.q_bb[cells_local], optimize=True)
    aT = at[table.center_local]
    Ct = np.einsum("e,eij->ij", aT, basis_pair_products(mesh), optimize=True)
    mu = np.array([max_gevp(B_cells[c], Ct) for c in range(len(B_cells))])

    s_f = np.einsum("ce,ce->c", at_cells, table.q_ff[cells_local], optimize=True)
    if table.fnorm2 > 0.0:
        s_f = s_f / table.fnorm2
    else:
        s_f = np.zeros(len(cells_local))
    den = float(aT @ table.gq_center)
    s_g = np.einsum("ce,ce->c", at_cells, table.q_gg[cells_local], optimize=True)
    s_g = s_g / den if den > 0.0 else np.zeros(len(cells_local))

    c = p.center_local
    shape = p.shape
    center_cell = 0
    stride = 1
    for a in range(mesh.dim):
        center_cell += int(c[a]) * stride
        stride *= int(shape[a])
    return MuTable(
        T=p.T,
        cells=p.coarse_elems(),
        mu=np.maximum(mu, 0.0),
        s_f=np.maximum(s_f, 0.0),
        s_g=np.maximum(s_g, 0.0),
        center_cell=center_cell,
    )


def coarse_indicators(mu_t, delta2_cells, ratio_center):
    """(sqrt(E_u), sqrt(E_f), sqrt(E_g)) from per-cell drift bounds.

    delta2_cells[c] bounds ((A~ - A)^2 / (A A~)) on cell c; ratio_center
    bounds A~/A on the home element. E_u sums delta2 * ratio * mu over the
    patch cells, E_f drops the ratio factor (its normalization does not
    involve A), and E_g keeps it.
    """
    d2 = np.asarray(delta2_cells, dtype=float)
    E_u = float(np.sum(d2 * mu_t.mu) * ratio_center)
    E_f = float(np.sum(d2 * mu_t.s_f))
    E_g = float(np.sum(d2 * mu_t.s_g) * ratio_center)
    return (
        float(np.sqrt(max(E_u, 0.0))),
        float(np.sqrt(max(E_f, 0.0))),
        float(np.sqrt(max(E_g, 0.0))),
    )


def darcy_delta_ratio(mu_t, lam_now_cells):
    """Per-cell delta^2 and home ratio in two-phase mode, from mobilities only.

    The coefficient is lambda(s) * K with K fixed, so K cancels from both the
    drift bound and the ratio; per patch cell c they reduce to
    (lam~ - lam)^2 / (lam~ lam) and lam~/lam on the home cell.
    """
    lt = mu_t.lam
    ln = np.asarray(lam_now_cells, dtype=float)
    diff = lt - ln
    d2 = diff * diff / (lt * ln)
    ratio = float(lt[mu_t.center_cell] / ln[mu_t.center_cell])
    return d2, ratio


def generic_delta_ratio(p, a_tilde, a_now_patch):
    """Per-cell delta^2 and the home-element ratio for a generic coefficient.

    delta^2[c] = max over fine elements of cell c of (a~ - a)^2 / (a a~);
    ratio = max over the home element of a~/a.
    """
    cells_local = p.cells_fine_elems_local()
    at = a_tilde[cells_local]
    an = a_now_patch[cells_local]
    diff = at - an
    d2 = np.max(diff * diff / (at * an), axis=1)
    center = p.center_fine_elems_local()
    ratio = float(np.max(a_tilde[center] / a_now_patch[center]))
    return d2, ratio
