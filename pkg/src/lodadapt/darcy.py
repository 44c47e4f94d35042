"""Sequentially coupled two-phase Darcy flow on the lagging multiscale solver.

Each time step solves the pressure equation with coefficient lambda(s) * K,
extracts conservative coarse face fluxes, and advances the saturation with an
explicit upwind step. Between steps only coarse per-element tables survive:
stiffness/load contributions, indicator tables holding the lagging mobility,
and the face flux tables built here.
"""

import logging
import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from . import adaptive, fem, grid, interp, pglod
from .errors import ConfigError, NumericError

__all__ = [
    "FluxTable",
    "mobility",
    "mobility_coefficient",
    "flux_tables",
    "preflux",
    "element_source_integrals",
    "conservative_flux",
    "harmonic_face_flux",
    "transport_step",
    "run_upscaling",
]

log = logging.getLogger(__name__)


def mobility(s):
    """Wetting/non-wetting/total mobility and fractional flow at saturation s.

    lambda_w = s^3, lambda_n = (1-s)^3, lambda = lambda_w + lambda_n,
    psi = lambda_w / lambda. s is clamped to [0, 1] before evaluation;
    scalars and arrays are both accepted.
    """
    s = np.clip(s, 0.0, 1.0)
    lw = s**3
    ln = (1.0 - s) ** 3
    lam = lw + ln
    return lw, ln, lam, lw / lam


def mobility_coefficient(mesh, perm, s):
    """Fine coefficient lambda(s) * K plus the per-coarse-cell total mobility.

    s is one value per coarse element (a scalar is broadcast); the mobility is
    constant per coarse cell and multiplies the fine permeability cellwise.
    """
    s = np.asarray(s, dtype=float)
    if s.ndim == 0:
        s = np.full(mesh.n_coarse_elems, float(s))
    lam = mobility(s)[2]
    a = fem.coeff_values(perm) * lam[mesh.coarse_elem_of_fine_elem()]
    return a, lam


def _face_stencil(mesh):
    """Face integrals of the axis derivatives of Q1 corner shapes, per axis.

    St[a, p] is the integral of d/dx_a of corner shape p over either face of
    one fine element normal to axis a; the derivative is constant along x_a,
    so both faces give the same value +-(prod h / h_a) / (2^(d-1) h_a).
    """
    key = "face_stencil"
    if key not in mesh._cache:
        d = mesh.dim
        h = mesh.h
        vol = float(np.prod(h))
        st = np.empty((d, 1 << d))
        for a in range(d):
            sign = np.where((np.arange(1 << d) >> a) & 1, 1.0, -1.0)
            st[a] = sign * (vol / h[a]) / ((1 << (d - 1)) * h[a])
        mesh._cache[key] = st
    return mesh._cache[key]


def _home_trace_table(mesh):
    """Face-integrated hat gradients on the home cell: (r^d, d, 2^d hats)."""
    key = "home_trace"
    if key not in mesh._cache:
        from .corrector import basis_elem_values

        st = _face_stencil(mesh)
        bas = basis_elem_values(mesh)
        mesh._cache[key] = np.einsum("ap,lph->lah", st, bas)
    return mesh._cache[key]


@dataclass
class FluxTable:
    """Per-face trace rows of one home element's multiscale contribution.

    For each listed coarse face, the one-sided integrals of
    -<A~> grad(.) . n_F taken from inside the adjacent patch cells (summed
    when both cells lie in the patch). ``u`` maps the 2^d home corner values
    of the coarse solution to the trace; ``fg`` is the fixed part from the
    source/boundary correctors plus the boundary extension itself on the home
    element.
    """

    T: int
    fids: np.ndarray
    u: np.ndarray
    fg: np.ndarray


def flux_tables(mesh, cs, f=None, g=None):
    """Coarse-face flux tables for the home element of a corrector set.

    The gradient trace on every fine face segment is one-sided from inside
    the patch cell; the lagging coefficient is averaged harmonically across
    the segment, doubled on the domain boundary, and taken one-sided where
    the neighbouring fine cell lies outside the patch. f is accepted for
    interface symmetry only: the source enters through the stored corrector.
    """
    p = cs.patch
    d = mesh.dim
    nb = 1 << d
    r = mesh.refine
    fs = faces = grid.faces(mesh)
    conn = grid.box_connectivity(tuple(int(c) for c in p.fine_counts))
    st = _face_stencil(mesh)

    # face-integrated gradient traces of the continuous parts per fine element
    w = np.empty((p.n_fine_nodes, nb + 1))
    w[:, :nb] = -cs.Q
    w[:, nb] = cs.Rf - cs.Qg
    dtab = np.einsum("ap,epc->eac", st, w[conn])
    # the chi_T parts (corner hats, boundary extension) live on the home cell
    home = p.center_fine_elems_local()
    dtab[home, :, :nb] += _home_trace_table(mesh)
    if g is not None:
        gvals = np.asarray(g, dtype=float)[p.fine_nodes()][conn[home]]
        dtab[home, :, nb] += np.einsum("ap,lp->la", st, gvals)

    cells = p.cells_fine_elems_local()
    n_cells = p.n_cells
    rem = np.arange(n_cells, dtype=np.int64)
    cm = np.empty((n_cells, d), dtype=np.int64)
    for a in range(d):
        cm[:, a] = rem % p.shape[a]
        rem //= p.shape[a]
    gm = cm + p.lo
    fine_counts = p.fine_counts
    strides = np.cumprod(np.concatenate(([1], fine_counts[:-1])))
    cells_grid = cells.reshape((n_cells,) + tuple(int(c) for c in r[::-1]))
    apatch = cs.a_patch

    fid_rows, val_rows = [], []
    for a in range(d):
        others = [b for b in range(d) if b != a]
        layer_axis = 1 + (d - 1 - a)
        for side in (0, 1):
            loc = int(r[a]) - 1 if side else 0
            ein = np.take(cells_grid, loc, axis=layer_axis).reshape(n_cells, -1)
            lm_a = cm[:, a] * r[a] + loc
            if side == 0:
                on_domain = (p.lo[a] * r[a] + lm_a) == 0
                in_patch = lm_a > 0
                eacross = ein - strides[a]
            else:
                on_domain = (p.lo[a] * r[a] + lm_a) == mesh.fine[a] - 1
                in_patch = lm_a < fine_counts[a] - 1
                eacross = ein + strides[a]
            ain = apatch[ein]
            aout = apatch[np.where(in_patch[:, None], eacross, ein)]
            coeff = np.where(
                on_domain[:, None],
                2.0 * ain,
                np.where(in_patch[:, None], 2.0 * ain * aout / (ain + aout), ain),
            )
            vals = -np.einsum("ns,nsc->nc", coeff, dtab[ein][:, :, a, :])
            fid_rows.append(fs.face_id(a, gm[:, a] + side, gm[:, others]))
            val_rows.append(vals)

    fid_all = np.concatenate(fid_rows)
    val_all = np.vstack(val_rows)
    fids, inv = np.unique(fid_all, return_inverse=True)
    acc = np.zeros((len(fids), nb + 1))
    np.add.at(acc, inv, val_all)
    return FluxTable(T=cs.T, fids=fids, u=acc[:, :nb], fg=acc[:, nb])


def preflux(mesh, tables, alpha):
    """Non-conservative upscaled face flux from the stored tables.

    Per face, half the sum over home elements of (u-row @ corner values of
    alpha + fg-row); the half averages the two one-sided traces, and cancels
    the doubling on domain-boundary faces. Neumann faces are forced to zero
    (homogeneous natural boundary).
    """
    fs = grid.faces(mesh)
    alpha = np.asarray(alpha, dtype=float)
    seen = set()
    sig = np.zeros(fs.n_faces)
    for tab in tables:
        seen.add(int(tab.T))
        m = mesh.coarse_multi(tab.T)
        corners = grid.box_lex_indices(m, m + 1, mesh.coarse + 1)
        np.add.at(sig, tab.fids, tab.u @ alpha[corners] + tab.fg)
    if len(seen) != mesh.n_coarse_elems:
        raise ConfigError(
            f"flux tables cover {len(seen)} of {mesh.n_coarse_elems} elements"
        )
    sig *= 0.5
    sig[fs.kind == grid.FaceSet.NEUMANN] = 0.0
    return sig


def element_source_integrals(mesh, f):
    """Integral of the source over each coarse element.

    Accepts None (zero), a scalar, fine cellwise values, or fine nodal values
    (integrated through the Q1 interpolant, i.e. cell volume times the corner
    mean).
    """
    n = mesh.n_coarse_elems
    if f is None:
        return np.zeros(n)
    vol = float(np.prod(mesh.h))
    ef = mesh.fine_elems_of_coarse_elems()
    f = np.asarray(f, dtype=float)
    if f.ndim == 0:
        return np.full(n, float(f) * vol * ef.shape[1])
    if f.shape == (mesh.n_fine_elems,):
        return f[ef].sum(axis=1) * vol
    if f.shape == (mesh.n_fine_nodes,):
        cell = f[fem.fine_connectivity(mesh)].mean(axis=1)
        return cell[ef].sum(axis=1) * vol
    raise ConfigError(f"source vector has unsupported shape {f.shape}")


def conservative_flux(mesh, sigma_bar, f=None):
    """Minimal L2 correction of a face flux to element-wise conservation.

    Minimizes ||sigma - sigma_bar||^2 subject to, for every coarse element,
    sum_F theta_(T,F) sigma_F = int_T f. Neumann faces are pinned at zero;
    the multiplier system is the element-graph Laplacian, grounded by any
    Dirichlet boundary face. With no Dirichlet faces the source must balance
    and one multiplier is pinned (the correction is gauge invariant).
    """
    fs = grid.faces(mesh)
    key = "flux_post"
    if key not in mesh._cache:
        theta = fs.element_incidence().tocsr()
        free = fs.kind != grid.FaceSet.NEUMANN
        tu = theta[:, free].tocsr()
        lap = (tu @ tu.T).tocsc()
        grounded = bool(np.any(fs.kind == grid.FaceSet.DIRICHLET))
        if free.sum() == 0:
            solver = None
        elif grounded:
            solver = spla.splu(lap, permc_spec="MMD_AT_PLUS_A")
        else:
            solver = spla.splu(lap[1:, 1:].tocsc(), permc_spec="MMD_AT_PLUS_A")
        mesh._cache[key] = (theta, free, tu, grounded, solver)
    theta, free, tu, grounded, solver = mesh._cache[key]

    sig = np.array(sigma_bar, dtype=float)
    sig[~free] = 0.0
    src = element_source_integrals(mesh, f)
    rhs = src - theta @ sig
    scale = max(float(np.abs(sig).mean()), float(np.abs(src).max()), 1.0)
    if solver is None:
        if float(np.abs(rhs).max()) > 1e-10 * scale:
            raise NumericError("no free faces left to restore conservation")
        return sig
    if grounded:
        y = solver.solve(rhs)
    else:
        if abs(float(rhs.sum())) > 1e-10 * scale * mesh.n_coarse_elems:
            raise NumericError(
                "all-Neumann flux correction needs a balanced source"
            )
        y = np.zeros(mesh.n_coarse_elems)
        y[1:] = solver.solve(rhs[1:])
    sig[free] += tu.T @ y
    residual = float(np.abs(src - theta @ sig).max())
    if residual > 1e-9 * scale:
        raise NumericError(f"flux post-processing residual {residual:.3e}")
    return sig


def harmonic_face_flux(mesh, a, w):
    """Coarse-face integrals of -<a> grad w . n_F for a fine nodal field w.

    The two one-sided gradient traces on each fine face segment are averaged
    and weighted by the harmonic mean of the flanking cell coefficients; on
    the domain boundary the single trace and single coefficient are used.
    This is the reference-flux counterpart of the table construction in
    flux_tables. Neumann faces are forced to zero.
    """
    d = mesh.dim
    avals = fem.coeff_values(a)
    w = np.asarray(w, dtype=float)
    st = _face_stencil(mesh)
    conn = fem.fine_connectivity(mesh)
    dall = np.einsum("ap,ep->ea", st, w[conn])

    fs = grid.faces(mesh)
    r = mesh.refine
    fine = mesh.fine
    fstride = np.cumprod(np.concatenate(([1], fine[:-1])))
    sig = np.zeros(fs.n_faces)
    for ax in range(d):
        others = [b for b in range(d) if b != ax]
        mask = np.nonzero(fs.axis == ax)[0]
        planes = fs.plane[mask]
        trans = fs.transverse[mask][:, : len(others)]
        # local transverse fine offsets within one coarse face, lexicographic
        n_seg = int(np.prod([r[b] for b in others])) if others else 1
        offs = np.zeros((n_seg, len(others)), dtype=np.int64)
        remo = np.arange(n_seg, dtype=np.int64)
        for j, b in enumerate(others):
            offs[:, j] = remo % r[b]
            remo //= r[b]
        base = np.zeros(len(mask), dtype=np.int64)
        for j, b in enumerate(others):
            base = base + trans[:, j] * r[b] * fstride[b]
        if others:
            seg_off = offs @ fstride[others]
        else:
            seg_off = np.zeros(1, dtype=np.int64)
        seg = base[:, None] + seg_off[None, :]
        pf = planes * r[ax]
        hi_ok = pf < fine[ax]
        lo_ok = pf > 0
        idx_hi = seg + np.where(hi_ok, pf, 0)[:, None] * fstride[ax]
        idx_lo = seg + np.where(lo_ok, pf - 1, 0)[:, None] * fstride[ax]
        d_hi = dall[idx_hi, ax]
        d_lo = dall[idx_lo, ax]
        a_hi = avals[idx_hi]
        a_lo = avals[idx_lo]
        both = (hi_ok & lo_ok)[:, None]
        val = np.where(
            both,
            -(2.0 * a_lo * a_hi / (a_lo + a_hi)) * 0.5 * (d_lo + d_hi),
            np.where(hi_ok[:, None], -a_hi * d_hi, -a_lo * d_lo),
        )
        sig[mask] = val.sum(axis=1)
    sig[fs.kind == grid.FaceSet.NEUMANN] = 0.0
    return sig


def transport_step(mesh, s, sigma, dt, s_b, clamp=False, step=None):
    """One explicit upwind transport update of the coarse saturation.

    s_T <- s_T - (dt/|T|) sum_F psi(s_up) theta_(T,F) sigma_F, where s_up is
    the saturation of the element the flux leaves (sigma >= 0 takes the minus
    side) and s_b substitutes on inflow boundary faces. Out-of-range results
    are logged and, when clamp is set, clipped to [0, 1].
    """
    fs = grid.faces(mesh)
    s = np.asarray(s, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    up = np.where(sigma >= 0.0, fs.elem_minus, fs.elem_plus)
    sup = np.where(up >= 0, s[np.clip(up, 0, None)], float(s_b))
    psi = mobility(sup)[3]
    vol = float(np.prod(mesh.H))
    out = s - (dt / vol) * (fs.element_incidence() @ (psi * sigma))
    bad = np.nonzero((out < -1e-12) | (out > 1.0 + 1e-12))[0]
    if len(bad):
        label = "" if step is None else f" at step {step}"
        log.warning(
            "saturation out of [0,1]%s in %d elements (first %s), range [%g, %g]",
            label,
            len(bad),
            bad[:8].tolist(),
            float(out.min()),
            float(out.max()),
        )
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return out


def run_upscaling(
    mesh,
    perm,
    s0,
    s_b,
    n_steps,
    dt,
    k=2,
    tol=0.0,
    f=None,
    g=None,
    pressure_solver="lod",
    include_rhs=True,
    compare_squared=False,
    force_recompute=False,
    clamp_saturation=False,
    threads=None,
    iop=None,
    memo=None,
    on_step=None,
):
    """Sequentially coupled pressure/saturation loop.

    pressure_solver selects the pressure discretization per step: "lod" runs
    the lagging multiscale solve with recompute tolerance tol, "fine" the
    fine FEM reference, "coarse" the plain coarse FEM. Returns the list of
    saturation fields (s0 first), one stats dict per step, and the lagging
    store (None unless "lod").
    """
    if pressure_solver not in ("lod", "fine", "coarse"):
        raise ConfigError(f"unknown pressure solver {pressure_solver!r}")
    s = np.asarray(s0, dtype=float)
    if s.ndim == 0:
        s = np.full(mesh.n_coarse_elems, float(s0))
    else:
        s = s.copy()
    if s.shape != (mesh.n_coarse_elems,):
        raise ConfigError(f"initial saturation has shape {s.shape}")
    perm = fem.coeff_values(perm)

    store = None
    if pressure_solver == "lod":
        if iop is None:
            iop = interp.InterpOperator(mesh)
        a0, lam0 = mobility_coefficient(mesh, perm, s)
        store = adaptive.init_store(
            mesh,
            iop,
            a0,
            f=f,
            g=g,
            k=k,
            mode="darcy",
            include_rhs=include_rhs,
            flux_builder=flux_tables,
            lam0=lam0,
            threads=threads,
        )

    sats = [s.copy()]
    stats = []
    for n in range(1, int(n_steps) + 1):
        t0 = time.perf_counter()
        a_now, lam_now = mobility_coefficient(mesh, perm, s)
        res = None
        alpha = None
        if pressure_solver == "lod":
            res = adaptive.step(
                store,
                n,
                a_now=a_now,
                tol=tol,
                lam_now=lam_now,
                force_recompute=force_recompute,
                compare_squared=compare_squared,
                threads=threads,
                memo=memo,
            )
            alpha = res.alpha
            sigma_bar = preflux(mesh, [rec.flux for rec in store.records], alpha)
        elif pressure_solver == "fine":
            u = fem.solve_fine_reference(mesh, a_now, f, g)
            w = u if g is None else u + np.asarray(g, dtype=float)
            sigma_bar = harmonic_face_flux(mesh, a_now, w)
        else:
            alpha = pglod.solve_coarse_fem(mesh, a_now, f=f, g=g)
            w = fem.prolongation(mesh) @ alpha
            if g is not None:
                w = w + np.asarray(g, dtype=float)
            sigma_bar = harmonic_face_flux(mesh, a_now, w)
        sigma = conservative_flux(mesh, sigma_bar, f)
        s_prev = s
        s = transport_step(
            mesh, s_prev, sigma, dt, s_b, clamp=clamp_saturation, step=n
        )
        wall_ms = (time.perf_counter() - t0) * 1e3
        sats.append(s.copy())
        stats.append(
            {
                "n": n,
                "recomputed_count": int(res.recomputed.sum()) if res else 0,
                "recomputed_fraction": float(res.fraction) if res else 0.0,
                "wall_ms": wall_ms,
                "sat_min": float(s.min()),
                "sat_max": float(s.max()),
            }
        )
        if on_step is not None:
            on_step(
                {
                    "n": n,
                    "res": res,
                    "alpha": alpha,
                    "sigma_bar": sigma_bar,
                    "sigma": sigma,
                    "s_prev": s_prev,
                    "s": s,
                    "dt": dt,
                    "store": store,
                }
            )
    return sats, stats, store
