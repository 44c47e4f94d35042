"""Lagged-corrector bookkeeping and the adaptive recompute/solve loop.

A LaggingStore holds, per coarse element, the data computed at its last
corrector recompute. What is retained depends on the indicator mode:

  fine    - gradient product tables (and optionally the correctors themselves,
            needed to reconstruct fine-scale solutions); indicators are the
            exact e_u/e_f/e_g values.
  coarse  - per-cell mu tables plus the fine coefficient snapshot; indicators
            are the sqrt(E_*) upper bounds. No corrector vectors survive.
  darcy   - per-cell mu tables plus the scalar mobility snapshot per coarse
            cell (the permeability factor cancels from the drift bounds), and
            optionally flux table rows. The lightest retention mode.

Each step evaluates indicators against the incoming coefficient, recomputes
the flagged elements (max indicator >= TOL), assembles the mixed-age global
system and solves it. Elements are independent within a step, so evaluation
and recomputation run on a thread pool sized by LODADAPT_THREADS; results are
merged in element order, which keeps runs bit-identical for any thread count.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import fem, grid, indicator, pglod
from .corrector import compute_element_correctors, element_contribution
from .errors import ConfigError
from .interp import InterpOperator

__all__ = [
    "ElementRecord",
    "LaggingStore",
    "StepResult",
    "thread_count",
    "parallel_map",
    "init_store",
    "evaluate_indicators",
    "recompute_elements",
    "step",
    "run_sequence",
    "save_checkpoint",
    "load_checkpoint",
]

MODES = ("fine", "coarse", "darcy")


def thread_count(threads=None):
    """Resolve the worker count: explicit arg, else LODADAPT_THREADS, else cores."""
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("LODADAPT_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"LODADAPT_THREADS={env!r} is not an integer") from exc
    return os.cpu_count() or 1


def parallel_map(fn, items, threads=None):
    """Order-preserving map over independent tasks; results merge serially."""
    n = thread_count(threads)
    items = list(items)
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


def _hash_array(arr):
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


@dataclass
class ElementRecord:
    """Everything the store remembers about one element's last recompute."""

    T: int
    age: int
    contrib: object
    table: object = field(default=None, repr=False)  # fine mode
    mu: object = field(default=None, repr=False)  # coarse/darcy modes
    cs: object = field(default=None, repr=False)  # fine mode, keep_correctors
    a_patch: np.ndarray = field(default=None, repr=False)  # coarse mode snapshot
    flux: object = field(default=None, repr=False)  # darcy flux table rows
    a_hash: str = ""


@dataclass
class LaggingStore:
    mesh: object
    iop: object
    k: int
    mode: str
    f: object
    g: object
    include_rhs: bool
    keep_correctors: bool
    records: list
    flux_builder: object = None
    n_recomputes: int = 0

    @property
    def n_elems(self):
        return len(self.records)

    def ages(self):
        return np.array([r.age for r in self.records], dtype=np.int64)

    def corrector_sets(self):
        return [r.cs for r in self.records]

    def contributions(self):
        return [r.contrib for r in self.records]


@dataclass
class StepResult:
    n: int
    alpha: np.ndarray
    indicators: np.ndarray  # (n_elems, 3): e_u, e_f, e_g (sqrt(E_*) in coarse modes)
    recomputed: np.ndarray  # bool per element
    fraction: float
    wall_ms: float
    energy_err: float = None
    l2_coarse_err: float = None
    K: object = field(default=None, repr=False)
    b: np.ndarray = field(default=None, repr=False)

    def recomputed_elements(self):
        return np.nonzero(self.recomputed)[0]


def _build_record(store, T, age, a_now, lam_now, memo):
    mesh, iop, k = store.mesh, store.iop, store.k
    p = grid.patch(mesh, T, k)
    a_patch = a_now[p.fine_elems()]
    a_hash = _hash_array(a_patch)
    if memo is not None:
        hit = memo.get((T, a_hash))
        if hit is not None:
            return replace(hit, age=age)

    cs = compute_element_correctors(
        mesh, iop, T, k, a_patch, store.f, store.g, store.include_rhs
    )
    contrib = element_contribution(mesh, cs)
    table = indicator.build_product_table(mesh, cs, store.f, store.g)
    cs.release_assembly()

    rec = ElementRecord(T=T, age=age, contrib=contrib, a_hash=a_hash)
    if store.mode == "fine":
        rec.table = table
        if store.keep_correctors:
            rec.cs = cs
    elif store.mode == "coarse":
        rec.mu = indicator.extract_mu_table(mesh, table)
        rec.a_patch = a_patch
    else:  # darcy
        mu = indicator.extract_mu_table(mesh, table)
        mu.lam = np.asarray(lam_now, dtype=float)[mu.cells]
        rec.mu = mu
        if store.flux_builder is not None:
            rec.flux = store.flux_builder(mesh, cs, store.f, store.g)
    if memo is not None:
        memo[(T, a_hash)] = rec
    return rec


def recompute_elements(store, elems, a_now, lam_now=None, age=0, threads=None, memo=None):
    """Recompute the listed elements against the current coefficient."""
    elems = [int(T) for T in np.atleast_1d(np.asarray(elems, dtype=np.int64))]
    if not elems:
        return
    a_now = fem.coeff_values(a_now)
    if store.mode == "darcy" and lam_now is None:
        raise ConfigError("darcy mode needs the current per-cell mobility")
    recs = parallel_map(
        lambda T: _build_record(store, T, age, a_now, lam_now, memo), elems, threads
    )
    for rec in recs:
        store.records[rec.T] = rec
    store.n_recomputes += len(recs)


def init_store(
    mesh,
    iop,
    a0,
    f=None,
    g=None,
    k=1,
    mode="fine",
    include_rhs=True,
    keep_correctors=None,
    flux_builder=None,
    lam0=None,
    step0=0,
    threads=None,
):
    """Compute correctors for every element with the first coefficient.

    ``lam0`` (per-coarse-cell mobility) is required in darcy mode; ``step0``
    is the age stamped on the initial records.
    """
    if mode not in MODES:
        raise ConfigError(f"indicator mode must be one of {MODES}, got {mode!r}")
    if iop is None:
        iop = InterpOperator(mesh)
    if keep_correctors is None:
        keep_correctors = mode == "fine"
    if keep_correctors and mode != "fine":
        raise ConfigError("correctors can only be retained in fine indicator mode")
    store = LaggingStore(
        mesh=mesh,
        iop=iop,
        k=int(k),
        mode=mode,
        f=f,
        g=g,
        include_rhs=bool(include_rhs),
        keep_correctors=bool(keep_correctors),
        records=[None] * mesh.n_coarse_elems,
        flux_builder=flux_builder,
    )
    recompute_elements(
        store, np.arange(mesh.n_coarse_elems), a0, lam_now=lam0, age=step0, threads=threads
    )
    return store


def evaluate_indicators(store, a_now=None, lam_now=None, threads=None):
    """Per-element (e_u, e_f, e_g) against the current coefficient.

    Coarse modes return the sqrt(E_*) upper bounds in the same slots.
    """
    mesh = store.mesh
    out = np.empty((store.n_elems, 3))
    if store.mode == "darcy":
        if lam_now is None:
            raise ConfigError("darcy mode needs the current per-cell mobility")
        lam_now = np.asarray(lam_now, dtype=float).reshape(-1)
        for i, rec in enumerate(store.records):
            mu = rec.mu
            d2, ratio = indicator.darcy_delta_ratio(mu, lam_now[mu.cells])
            out[i] = indicator.coarse_indicators(mu, d2, ratio)
    elif store.mode == "coarse":
        a_now = fem.coeff_values(a_now)
        for i, rec in enumerate(store.records):
            p = grid.patch(mesh, rec.T, store.k)
            d2, ratio = indicator.generic_delta_ratio(
                p, rec.a_patch, a_now[p.fine_elems()]
            )
            out[i] = indicator.coarse_indicators(rec.mu, d2, ratio)
    else:
        a_now = fem.coeff_values(a_now)
        rows = parallel_map(
            lambda rec: indicator.fine_indicators(mesh, rec.table, a_now),
            store.records,
            threads,
        )
        out[:] = rows
    return out


def step(
    store,
    n,
    a_now=None,
    tol=0.0,
    lam_now=None,
    force_recompute=False,
    compare_squared=False,
    threads=None,
    memo=None,
    solve=True,
):
    """One adaptive step: indicate, recompute where flagged, assemble, solve.

    The recompute rule is max(e_u, e_f, e_g) >= TOL (ties recompute), so
    TOL = 0 recomputes everything. ``compare_squared`` thresholds the squared
    coarse bounds E_* instead of their square roots (no effect in fine mode).
    ``memo`` is an optional (element, coefficient-hash) -> record cache that
    lets several stores stepping through the same coefficients share solves.
    """
    t0 = time.perf_counter()
    inds = evaluate_indicators(store, a_now, lam_now, threads)
    ind_max = inds.max(axis=1)
    if force_recompute:
        flagged = np.ones(store.n_elems, dtype=bool)
    else:
        cmp_vals = ind_max**2 if (compare_squared and store.mode != "fine") else ind_max
        flagged = cmp_vals >= tol
    recompute_elements(
        store, np.nonzero(flagged)[0], a_now, lam_now, age=n, threads=threads, memo=memo
    )
    alpha = K = b = None
    if solve:
        K, b = pglod.assemble_global(
            store.mesh, store.contributions(), a_now=a_now, f=store.f, g=store.g
        )
        alpha = pglod.solve_coarse(store.mesh, K, b)
    wall_ms = (time.perf_counter() - t0) * 1e3
    return StepResult(
        n=int(n),
        alpha=alpha,
        indicators=inds,
        recomputed=flagged,
        fraction=float(flagged.mean()),
        wall_ms=wall_ms,
        K=K,
        b=b,
    )


def _coefficient_at(coefficients, n):
    if callable(coefficients):
        return fem.coeff_values(coefficients(n))
    return fem.coeff_values(coefficients[n])


def _reference_at(reference, n):
    return reference(n) if callable(reference) else reference[n]


def attach_errors(store, res, a_now, u_ref):
    """Fill the error fields of a StepResult from a fine reference solution.

    Energy error is |u_ref - u_lod|_A / |u_ref + g|_A (needs retained
    correctors); the coarse L2 error is ||I_H u_ref - alpha|| / ||I_H u_ref||,
    exact because corrector parts lie in ker I_H.
    """
    mesh = store.mesh
    P = fem.prolongation(mesh)
    ih_ref = store.iop.interpolate(u_ref)
    den = fem.l2_norm(mesh, P @ ih_ref)
    if den > 0.0:
        res.l2_coarse_err = fem.l2_norm(mesh, P @ (ih_ref - res.alpha)) / den
    if store.mode == "fine" and store.keep_correctors:
        u_lod = pglod.reconstruct(mesh, res.alpha, store.corrector_sets())
        full = u_ref if store.g is None else u_ref + np.asarray(store.g, dtype=float)
        den = fem.energy_seminorm(mesh, a_now, full)
        if den > 0.0:
            res.energy_err = fem.energy_seminorm(mesh, a_now, u_ref - u_lod) / den
    return res


def run_sequence(
    mesh,
    coefficients,
    k,
    tol,
    n_steps=None,
    f=None,
    g=None,
    mode="fine",
    include_rhs=True,
    reference=None,
    force_recompute=False,
    compare_squared=False,
    threads=None,
    memo=None,
    iop=None,
    store=None,
    on_step=None,
):
    """Drive a coefficient sequence through the adaptive loop.

    Args:
        coefficients: list of per-fine-element arrays, or a callable n -> array
            (then n_steps is required).
        reference: optional list/callable of fine reference solutions used to
            attach error columns.
        store: resume from an existing store instead of initializing with the
            first coefficient.
        on_step: callback(store, StepResult) after each step.

    Returns (store, [StepResult ...]).
    """
    if n_steps is None:
        try:
            n_steps = len(coefficients)
        except TypeError:
            raise ConfigError("n_steps is required with a coefficient generator")
    if n_steps < 1:
        raise ConfigError("the coefficient sequence is empty")
    if iop is None:
        iop = InterpOperator(mesh)
    results = []
    for n in range(n_steps):
        a_now = _coefficient_at(coefficients, n)
        if store is None:
            store = init_store(
                mesh,
                iop,
                a_now,
                f=f,
                g=g,
                k=k,
                mode=mode,
                include_rhs=include_rhs,
                step0=n,
                threads=threads,
            )
        res = step(
            store,
            n,
            a_now,
            tol,
            force_recompute=force_recompute,
            compare_squared=compare_squared,
            threads=threads,
            memo=memo,
        )
        if reference is not None:
            attach_errors(store, res, a_now, _reference_at(reference, n))
        results.append(res)
        if on_step is not None:
            on_step(store, res)
    return store, results


CHECKPOINT_META = "store.json"
CHECKPOINT_DATA = "records.npz"


def save_checkpoint(store, directory):
    """Write the store's coarse data to a directory.

    Per element: the contribution block, the mu table, the age and a hash of
    the coefficient snapshot. Fine corrector vectors and product tables are
    not persisted; loading in fine mode recomputes them from the coefficient
    provider, which reproduces them bit for bit.
    """
    os.makedirs(directory, exist_ok=True)
    arrays = {}
    meta = {
        "format": "lodadapt-checkpoint",
        "version": 1,
        "mode": store.mode,
        "k": store.k,
        "include_rhs": store.include_rhs,
        "keep_correctors": store.keep_correctors,
        "n_elems": store.n_elems,
        "n_recomputes": store.n_recomputes,
        "ages": [int(r.age) for r in store.records],
        "hashes": [r.a_hash for r in store.records],
    }
    for rec in store.records:
        T = rec.T
        arrays[f"K{T}"] = rec.contrib.K
        arrays[f"b{T}"] = rec.contrib.b
        mu = rec.mu
        if mu is None and rec.table is not None:
            mu = indicator.extract_mu_table(store.mesh, rec.table)
        if mu is not None:
            arrays[f"mu{T}"] = np.stack([mu.mu, mu.s_f, mu.s_g])
            if mu.lam is not None:
                arrays[f"lam{T}"] = mu.lam
        if rec.flux is not None:
            arrays[f"fid{T}"] = rec.flux.fids
            arrays[f"fu{T}"] = rec.flux.u
            arrays[f"ffg{T}"] = rec.flux.fg
    with open(os.path.join(directory, CHECKPOINT_META), "w") as fh:
        json.dump(meta, fh, sort_keys=True)
        fh.write("\n")
    np.savez_compressed(os.path.join(directory, CHECKPOINT_DATA), **arrays)


def load_checkpoint(
    directory,
    mesh,
    iop=None,
    coefficients=None,
    f=None,
    g=None,
    flux_builder=None,
    threads=None,
):
    """Rebuild a LaggingStore from a checkpoint directory.

    ``coefficients`` (list or callable over the ages stored in the checkpoint)
    is required outside darcy mode to rebuild the coefficient snapshots; each
    rebuilt snapshot is verified against the stored hash. Fine mode recomputes
    the correctors from those snapshots.
    """
    from .darcy import FluxTable

    with open(os.path.join(directory, CHECKPOINT_META)) as fh:
        meta = json.load(fh)
    if meta.get("format") != "lodadapt-checkpoint":
        raise ConfigError(f"{directory} is not a checkpoint directory")
    mode = meta["mode"]
    k = int(meta["k"])
    if meta["n_elems"] != mesh.n_coarse_elems:
        raise ConfigError(
            f"checkpoint has {meta['n_elems']} elements, mesh has {mesh.n_coarse_elems}"
        )
    if iop is None:
        iop = InterpOperator(mesh)
    if mode != "darcy" and coefficients is None:
        raise ConfigError(f"loading a {mode}-mode checkpoint needs the coefficients")
    data = np.load(os.path.join(directory, CHECKPOINT_DATA))
    store = LaggingStore(
        mesh=mesh,
        iop=iop,
        k=k,
        mode=mode,
        f=f,
        g=g,
        include_rhs=bool(meta["include_rhs"]),
        keep_correctors=bool(meta["keep_correctors"]),
        records=[None] * mesh.n_coarse_elems,
        flux_builder=flux_builder,
        n_recomputes=int(meta.get("n_recomputes", 0)),
    )
    ages = meta["ages"]
    hashes = meta["hashes"]
    snapshots = {}
    if mode != "darcy":
        for age in sorted(set(ages)):
            snapshots[age] = _coefficient_at(coefficients, age)

    def rebuild(T):
        from .corrector import ElementContribution

        age = int(ages[T])
        p = grid.patch(mesh, T, k)
        mlt = mesh.coarse_multi(T)
        contrib = ElementContribution(
            T=T,
            rows=p.coarse_nodes(),
            cols=grid.box_lex_indices(mlt, mlt + 1, mesh.coarse + 1),
            K=data[f"K{T}"],
            b=data[f"b{T}"],
        )
        rec = ElementRecord(T=T, age=age, contrib=contrib, a_hash=hashes[T])
        if mode == "darcy":
            # the mobility snapshot is stored outright, nothing to re-derive
            rec.mu = _mu_from_arrays(mesh, p, data[f"mu{T}"], data[f"lam{T}"])
            if f"fid{T}" in data:
                rec.flux = FluxTable(
                    T=T, fids=data[f"fid{T}"], u=data[f"fu{T}"], fg=data[f"ffg{T}"]
                )
        else:
            a_patch = snapshots[age][p.fine_elems()]
            if _hash_array(a_patch) != hashes[T]:
                raise ConfigError(
                    f"checkpoint snapshot hash mismatch for element {T}; "
                    "the coefficient sequence differs from the saved run"
                )
            if mode == "coarse":
                rec.mu = _mu_from_arrays(mesh, p, data[f"mu{T}"], None)
                rec.a_patch = a_patch
            else:
                cs = compute_element_correctors(
                    mesh, iop, T, k, a_patch, f, g, store.include_rhs
                )
                cs.release_assembly()
                rec.table = indicator.build_product_table(mesh, cs, f, g)
                if store.keep_correctors:
                    rec.cs = cs
        return rec

    recs = parallel_map(rebuild, range(mesh.n_coarse_elems), threads)
    for rec in recs:
        store.records[rec.T] = rec
    return store


def _mu_from_arrays(mesh, p, stacked, lam):
    from .indicator import MuTable

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
        mu=stacked[0],
        s_f=stacked[1],
        s_g=stacked[2],
        center_cell=center_cell,
        lam=lam,
    )
