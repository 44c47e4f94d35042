"""Experiment presets, configuration handling and the command-line entry.

`lodadapt run --preset <name> [--config file.json] [--out dir]` executes one
of the experiment kinds (kconv, tol_sweep, darcy2d, darcy3d, single_solve)
and writes CSV artifacts plus a metadata JSON that echoes the fully resolved
configuration. `lodadapt gen-field --spec file.json --out path` writes a
coefficient file. Exit codes: 0 success, 2 invalid configuration, 3 numeric
failure.
"""

import argparse
import copy
import json
import math
import os
import sys

import numpy as np

from . import adaptive, darcy, fem, field, grid, interp, runio
from .errors import ConfigError, LodError, NumericError

__all__ = ["PRESETS", "resolve_config", "run", "gen_field", "main"]


KINDS = ("kconv", "tol_sweep", "darcy2d", "darcy3d", "single_solve")
MODES = ("fine", "coarse")
REFERENCES = ("none", "fine_fem", "coarse_fem")


def _mesh2(coarse, refine):
    return {
        "dim": 2,
        "domain": [[0.0, 1.0], [0.0, 1.0]],
        "coarse": [coarse, coarse],
        "refine": [refine, refine],
        "dirichlet_axes": [0],
    }


def _mesh3(coarse, refine):
    m = _mesh2(coarse, refine)
    m["dim"] = 3
    m["domain"].append([0.0, 1.0])
    m["coarse"].append(coarse)
    m["refine"].append(refine)
    return m


PRESETS = {
    # error decay with the patch radius (one coefficient, k = 1..4)
    "kconv-desk": {
        "kind": "kconv",
        "mesh": _mesh2(16, 16),
        "field": {"kind": "checkerboard_base", "seed": 1},
        "ks": [1, 2, 3, 4],
        "reference": "fine_fem",
        "seed": 1,
    },
    "kconv-paper": {
        "kind": "kconv",
        "mesh": _mesh2(64, 8),
        "field": {"kind": "checkerboard_base", "seed": 1},
        "ks": [1, 2, 3, 4],
        "reference": "fine_fem",
        "seed": 1,
    },
    "kconv-mini": {
        "kind": "kconv",
        "mesh": _mesh2(4, 8),
        "field": {"kind": "checkerboard_base", "seed": 1},
        "ks": [1, 2, 3],
        "reference": "fine_fem",
        "seed": 1,
    },
    # sweeping coefficient sequence, recompute tolerance sweep
    "tolsweep-desk": {
        "kind": "tol_sweep",
        "mesh": _mesh2(16, 8),
        "field": {"kind": "checkerboard_base", "seed": 1, "period": 128},
        "k": 3,
        "tols": [0.5, 0.1, 0.05, 0.01],
        "n_steps": 128,
        "reference": "fine_fem",
        "seed": 1,
    },
    "tolsweep-paper": {
        "kind": "tol_sweep",
        "mesh": _mesh2(64, 8),
        "field": {"kind": "checkerboard_base", "seed": 1, "period": 128},
        "k": 3,
        "tols": [0.5, 0.1, 0.05, 0.01],
        "n_steps": 128,
        "reference": "fine_fem",
        "seed": 1,
    },
    "tolsweep-mini": {
        "kind": "tol_sweep",
        "mesh": _mesh2(4, 4),
        "field": {"kind": "checkerboard_base", "seed": 1, "period": 128},
        "k": 2,
        "tols": [0.5, 0.05],
        "n_steps": 6,
        "reference": "fine_fem",
        "seed": 1,
    },
    # two-phase flow, 2D lognormal permeability
    "darcy2d-desk": {
        "kind": "darcy2d",
        "mesh": _mesh2(16, 8),
        "field": {"kind": "lognormal2d", "seed": 1, "stddev": 3.0, "corr_len": 0.05},
        "k": 2,
        "tol": 0.05,
        "n_steps": 200,
        "dt": 1.0 / 200.0,
        "s_b": 1.0,
        "compare": True,
        "seed": 1,
    },
    "darcy2d-paper": {
        "kind": "darcy2d",
        "mesh": _mesh2(64, 8),
        "field": {"kind": "lognormal2d", "seed": 1, "stddev": 3.0, "corr_len": 0.05},
        "k": 2,
        "tol": 0.05,
        "n_steps": 2000,
        "dt": 1.0 / 2000.0,
        "s_b": 1.0,
        "compare": True,
        "seed": 1,
    },
    "darcy2d-mini": {
        "kind": "darcy2d",
        "mesh": _mesh2(4, 4),
        "field": {"kind": "lognormal2d", "seed": 1, "stddev": 1.0, "corr_len": 0.1},
        "k": 1,
        "tol": 0.1,
        "n_steps": 4,
        "dt": 0.02,
        "s_b": 1.0,
        "compare": True,
        "seed": 1,
    },
    # two-phase flow, 3D product permeability, TOL sensitivity
    "darcy3d-desk": {
        "kind": "darcy3d",
        "mesh": _mesh3(8, 4),
        "field": {"kind": "product3d", "seed": 1},
        "runs": [
            {"k": 1, "tol": 0.1},
            {"k": 1, "tol": 0.01},
            {"k": 1, "tol": 0.001},
        ],
        "n_steps": 50,
        "dt": 1.0,
        "s_b": 0.0,
        "s0": "ball",
        "seed": 1,
    },
    "darcy3d-paper": {
        "kind": "darcy3d",
        "mesh": _mesh3(16, 8),
        "field": {"kind": "product3d", "seed": 1},
        "runs": [
            {"k": 1, "tol": 0.1},
            {"k": 2, "tol": 0.1},
            {"k": 1, "tol": 0.01},
        ],
        "n_steps": 200,
        "dt": 1.0,
        "s_b": 0.0,
        "s0": "ball",
        "seed": 1,
    },
    "darcy3d-mini": {
        "kind": "darcy3d",
        "mesh": _mesh3(4, 2),
        "field": {"kind": "product3d", "seed": 1},
        "runs": [{"k": 1, "tol": 0.1}, {"k": 1, "tol": 0.01}],
        "n_steps": 3,
        "dt": 0.5,
        "s_b": 0.0,
        "s0": "ball",
        "seed": 1,
    },
    # one coefficient, one multiscale solve, solution dump
    "single-desk": {
        "kind": "single_solve",
        "mesh": _mesh2(16, 16),
        "field": {"kind": "checkerboard_base", "seed": 1},
        "k": 2,
        "reference": "fine_fem",
        "seed": 1,
    },
    "single-mini": {
        "kind": "single_solve",
        "mesh": _mesh2(4, 4),
        "field": {"kind": "checkerboard_base", "seed": 1},
        "k": 2,
        "reference": "fine_fem",
        "seed": 1,
    },
}


def _deep_merge(base, update):
    for key, val in update.items():
        if isinstance(val, dict) and isinstance(base.get(key), dict):
            _deep_merge(base[key], val)
        else:
            base[key] = val
    return base


def resolve_config(preset=None, config_file=None, out=None):
    """Merge preset, config file and CLI overrides; fill and echo defaults."""
    cfg = {}
    if preset is not None:
        if preset not in PRESETS:
            known = ", ".join(sorted(PRESETS))
            raise ConfigError(f"unknown preset {preset!r} (known: {known})")
        cfg = copy.deepcopy(PRESETS[preset])
    if config_file is not None:
        try:
            with open(config_file) as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}")
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        _deep_merge(cfg, loaded)
    cfg["preset"] = preset
    if out is not None:
        cfg["out"] = out

    kind = cfg.get("kind")
    if kind not in KINDS:
        raise ConfigError(f"kind must be one of {KINDS}, got {kind!r}")
    cfg.setdefault("seed", 0)
    cfg.setdefault("threads", None)
    cfg.setdefault("include_rhs", True)
    cfg.setdefault("mode", "fine")
    cfg.setdefault("reference", "none")
    cfg.setdefault("out", os.path.join("runs", preset or kind))
    if "mesh" not in cfg:
        raise ConfigError("config needs a mesh section")
    mesh = cfg["mesh"]
    for key in ("domain", "coarse", "refine"):
        if key not in mesh:
            raise ConfigError(f"mesh section needs {key!r}")
    mesh.setdefault("dim", len(mesh["coarse"]))
    mesh.setdefault("dirichlet_axes", [0])
    if "field" not in cfg:
        raise ConfigError("config needs a field section")
    cfg["field"].setdefault("seed", cfg["seed"])

    if kind == "kconv":
        cfg.setdefault("ks", [1, 2, 3, 4])
        if any(int(k) < 0 for k in cfg["ks"]):
            raise ConfigError("patch radii must be >= 0")
    if kind == "tol_sweep":
        cfg.setdefault("k", 3)
        cfg.setdefault("tols", [0.5, 0.1, 0.05, 0.01])
        cfg.setdefault("n_steps", 128)
        if any(float(t) < 0 for t in cfg["tols"]):
            raise ConfigError("TOL must be >= 0")
    if kind in ("darcy2d", "darcy3d"):
        cfg.setdefault("n_steps", 200)
        cfg.setdefault("dt", 1.0 / cfg["n_steps"])
        cfg.setdefault("s_b", 1.0)
        cfg.setdefault("s0", 0.0)
        cfg.setdefault("clamp_saturation", False)
        cfg.setdefault("mode", "coarse")
        cfg["mode"] = "coarse"
        if cfg["dt"] <= 0:
            raise ConfigError("dt must be > 0")
    if kind == "darcy2d":
        cfg.setdefault("k", 2)
        cfg.setdefault("tol", 0.05)
        cfg.setdefault("compare", False)
    if kind == "darcy3d":
        cfg.setdefault("runs", [{"k": 1, "tol": 0.1}])
        for run_spec in cfg["runs"]:
            if "k" not in run_spec or "tol" not in run_spec:
                raise ConfigError("each darcy3d run needs k and tol")
    if kind == "single_solve":
        cfg.setdefault("k", 2)
        cfg.setdefault("f_const", 0.0)
        cfg.setdefault("dump_fine", False)

    if "k" in cfg and int(cfg["k"]) < 0:
        raise ConfigError("k must be >= 0")
    if "tol" in cfg and float(cfg["tol"]) < 0:
        raise ConfigError("TOL must be >= 0")
    if "n_steps" in cfg and int(cfg["n_steps"]) < 1:
        raise ConfigError("n_steps must be >= 1")
    if cfg["mode"] not in MODES + ("darcy",) and kind not in ("darcy2d", "darcy3d"):
        raise ConfigError(f"mode must be one of {MODES}")
    if cfg["reference"] not in REFERENCES:
        raise ConfigError(f"reference must be one of {REFERENCES}")
    if cfg["threads"] is not None and int(cfg["threads"]) < 1:
        raise ConfigError("threads must be >= 1")
    return cfg


def build_mesh(mc):
    try:
        return grid.build_mesh_pair(
            mc["domain"], mc["coarse"], mc["refine"], mc["dirichlet_axes"]
        )
    except ValueError as exc:
        raise ConfigError(str(exc))


def build_field(mesh, fc):
    """Instantiate the coefficient/permeability described by a field spec."""
    kind = fc.get("kind")
    seed = fc.get("seed", 0)
    if kind == "checkerboard_base":
        return field.checkerboard_base(mesh.fine, seed)
    if kind == "lognormal2d":
        return field.lognormal_field(
            mesh.fine,
            seed,
            stddev=fc.get("stddev", 3.0),
            corr_len=fc.get("corr_len", 0.05),
            method=fc.get("method", "auto"),
        )
    if kind == "product3d":
        return field.product_field_3d(mesh.fine, seed, octaves=fc.get("octaves"))
    if kind == "constant":
        return np.full(mesh.n_fine_elems, float(fc.get("value", 1.0)))
    if kind == "file":
        counts, values = field.read_field(fc["path"])
        if list(counts) != [int(c) for c in mesh.fine]:
            raise ConfigError(
                f"field file counts {list(counts)} do not match the fine mesh"
            )
        return values
    raise ConfigError(f"unknown field kind {kind!r}")


def boundary_drive(mesh):
    """The boundary extension used by every experiment: g = 1 - x_1."""
    return 1.0 - mesh.fine_node_coords()[:, 0]


def _sat_l2(mesh, a, b):
    vol = float(np.prod(mesh.H))
    d = np.asarray(a) - np.asarray(b)
    return math.sqrt(float(vol * (d * d).sum()))


def run_kconv(cfg, out):
    mesh = build_mesh(cfg["mesh"])
    a = build_field(mesh, cfg["field"])
    g = boundary_drive(mesh)
    iop = interp.InterpOperator(mesh)
    u_ref = None
    if cfg["reference"] == "fine_fem":
        u_ref = fem.solve_fine_reference(mesh, a, None, g)
    rows = []
    for k in cfg["ks"]:
        store = adaptive.init_store(
            mesh,
            iop,
            a,
            g=g,
            k=int(k),
            mode=cfg["mode"],
            include_rhs=cfg["include_rhs"],
            threads=cfg["threads"],
        )
        res = adaptive.step(store, 0, a_now=a, tol=math.inf, threads=cfg["threads"])
        if u_ref is not None:
            adaptive.attach_errors(store, res, a, u_ref)
        rows.append((int(k), res.energy_err, res.l2_coarse_err))
    runio.write_errors(os.path.join(out, "errors.csv"), rows)


def run_tol_sweep(cfg, out):
    mesh = build_mesh(cfg["mesh"])
    base = build_field(mesh, cfg["field"])
    period = int(cfg["field"].get("period", 128))
    g = boundary_drive(mesh)
    iop = interp.InterpOperator(mesh)
    n_steps = int(cfg["n_steps"])

    def coeff(n):
        return field.sweep_coefficient(base, mesh.fine, n, period=period)

    reference = None
    if cfg["reference"] == "fine_fem":
        cache = {}

        def reference(n):
            if n not in cache:
                cache[n] = fem.solve_fine_reference(mesh, coeff(n), None, g)
            return cache[n]

    for tol in cfg["tols"]:
        tol = float(tol)
        _, results = adaptive.run_sequence(
            mesh,
            coeff,
            int(cfg["k"]),
            tol,
            n_steps=n_steps,
            g=g,
            mode=cfg["mode"],
            include_rhs=cfg["include_rhs"],
            reference=reference,
            threads=cfg["threads"],
            iop=iop,
        )
        label = f"{tol:g}"
        runio.write_summary(
            os.path.join(out, f"summary_tol{label}.csv"), results, tol, cfg["k"]
        )
        runio.write_mask(os.path.join(out, f"mask_tol{label}.csv"), results)
        runio.write_indicators(
            os.path.join(out, f"indicators_tol{label}.csv"), results
        )


def run_darcy2d(cfg, out):
    mesh = build_mesh(cfg["mesh"])
    perm = build_field(mesh, cfg["field"])
    g = boundary_drive(mesh)
    iop = interp.InterpOperator(mesh)
    n_steps = int(cfg["n_steps"])
    dt = float(cfg["dt"])
    common = dict(
        s0=cfg["s0"],
        s_b=float(cfg["s_b"]),
        n_steps=n_steps,
        dt=dt,
        g=g,
        clamp_saturation=cfg["clamp_saturation"],
        threads=cfg["threads"],
        iop=iop,
    )

    last = {}

    def keep_last(info):
        last["sigma"] = info["sigma"]

    sats, stats, _ = darcy.run_upscaling(
        mesh,
        perm,
        k=int(cfg["k"]),
        tol=float(cfg["tol"]),
        pressure_solver="lod",
        include_rhs=cfg["include_rhs"],
        on_step=keep_last,
        **common,
    )
    runio.write_stats(os.path.join(out, "stats.csv"), stats, cfg["tol"], cfg["k"])
    runio.write_flux(os.path.join(out, "flux_final.csv"), mesh, last["sigma"])
    sat_dir = runio.ensure_dir(os.path.join(out, "sat"))
    for n, s in enumerate(sats):
        field.write_field(
            os.path.join(sat_dir, f"sat_{n:04d}.txt"), mesh.coarse, s
        )
    if cfg["compare"]:
        ref_sats, _, _ = darcy.run_upscaling(
            mesh, perm, pressure_solver="fine", **common
        )
        fem_sats, _, _ = darcy.run_upscaling(
            mesh, perm, pressure_solver="coarse", **common
        )
        rows = [
            (
                n,
                _sat_l2(mesh, sats[n], ref_sats[n]),
                _sat_l2(mesh, fem_sats[n], ref_sats[n]),
            )
            for n in range(1, n_steps + 1)
        ]
        runio.write_csv(
            os.path.join(out, "comparison.csv"),
            ["n", "sat_err_lod", "sat_err_fem"],
            rows,
        )


def _initial_saturation(mesh, spec):
    if spec == "ball":
        mid = mesh.coarse_midpoints()
        dist = np.linalg.norm(mid - 0.5, axis=1)
        return np.where(dist <= 0.25, 1.0, 0.0)
    return float(spec)


def run_darcy3d(cfg, out):
    mesh = build_mesh(cfg["mesh"])
    perm = build_field(mesh, cfg["field"])
    g = boundary_drive(mesh)
    iop = interp.InterpOperator(mesh)
    s0 = _initial_saturation(mesh, cfg["s0"])
    finals = []
    for run_spec in cfg["runs"]:
        k = int(run_spec["k"])
        tol = float(run_spec["tol"])
        label = f"k{k}_tol{tol:g}"
        sats, stats, _ = darcy.run_upscaling(
            mesh,
            perm,
            s0,
            float(cfg["s_b"]),
            int(cfg["n_steps"]),
            float(cfg["dt"]),
            k=k,
            tol=tol,
            g=g,
            include_rhs=cfg["include_rhs"],
            clamp_saturation=cfg["clamp_saturation"],
            threads=cfg["threads"],
            iop=iop,
        )
        runio.write_stats(os.path.join(out, f"stats_{label}.csv"), stats, tol, k)
        field.write_field(
            os.path.join(out, f"sat_final_{label}.txt"), mesh.coarse, sats[-1]
        )
        finals.append((label, sats[-1]))
    rows = []
    for i in range(len(finals)):
        for j in range(i + 1, len(finals)):
            la, sa = finals[i]
            lb, sb = finals[j]
            rows.append(
                (la, lb, _sat_l2(mesh, sa, sb), float(np.abs(sa - sb).max()))
            )
    runio.write_csv(
        os.path.join(out, "diffs.csv"), ["run_a", "run_b", "l2_diff", "linf_diff"], rows
    )


def run_single(cfg, out):
    mesh = build_mesh(cfg["mesh"])
    a = build_field(mesh, cfg["field"])
    g = boundary_drive(mesh)
    f = None
    if float(cfg["f_const"]) != 0.0:
        f = np.full(mesh.n_fine_elems, float(cfg["f_const"]))
    iop = interp.InterpOperator(mesh)
    store = adaptive.init_store(
        mesh,
        iop,
        a,
        f=f,
        g=g,
        k=int(cfg["k"]),
        mode=cfg["mode"],
        include_rhs=cfg["include_rhs"],
        threads=cfg["threads"],
    )
    res = adaptive.step(store, 0, a_now=a, tol=math.inf, threads=cfg["threads"])
    if cfg["reference"] == "fine_fem":
        u_ref = fem.solve_fine_reference(mesh, a, f, g)
        adaptive.attach_errors(store, res, a, u_ref)
    runio.write_solution(os.path.join(out, "solution.csv"), mesh, res.alpha)
    runio.write_summary(os.path.join(out, "summary.csv"), [res], 0.0, cfg["k"])
    if cfg["dump_fine"] and store.keep_correctors:
        from . import pglod

        u_fine = pglod.reconstruct(mesh, res.alpha, store.corrector_sets())
        field.write_field(
            os.path.join(out, "solution_fine.txt"), mesh.fine + 1, u_fine
        )


RUNNERS = {
    "kconv": run_kconv,
    "tol_sweep": run_tol_sweep,
    "darcy2d": run_darcy2d,
    "darcy3d": run_darcy3d,
    "single_solve": run_single,
}


def run(cfg):
    """Execute one resolved configuration; returns the output directory."""
    out = runio.ensure_dir(cfg["out"])
    if cfg["threads"] is not None:
        cfg["threads"] = int(cfg["threads"])
    runio.write_metadata(os.path.join(out, "metadata.json"), cfg)
    RUNNERS[cfg["kind"]](cfg, out)
    return out


def gen_field(spec_file, out_path):
    """Generate a coefficient from a field spec JSON and write it to a file."""
    try:
        with open(spec_file) as fh:
            spec = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read field spec: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"field spec is not valid JSON: {exc}")
    if "counts" not in spec:
        raise ConfigError("field spec needs a counts entry")
    counts = [int(c) for c in spec["counts"]]
    domain = [[0.0, 1.0]] * len(counts)
    mesh = grid.build_mesh_pair(domain, counts, [1] * len(counts), [0])
    values = build_field(mesh, spec)
    field.write_field(out_path, counts, values, binary=bool(spec.get("binary", False)))


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="lodadapt", description="adaptive multiscale solver experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute an experiment")
    p_run.add_argument("--config", help="JSON config file")
    p_run.add_argument("--preset", help="named preset to start from")
    p_run.add_argument("--out", help="output directory override")
    p_gen = sub.add_parser("gen-field", help="write a coefficient file")
    p_gen.add_argument("--spec", required=True, help="field spec JSON")
    p_gen.add_argument("--out", required=True, help="output file")
    args = parser.parse_args(argv)

    try:
        if args.command == "run":
            if args.config is None and args.preset is None:
                raise ConfigError("run needs --config and/or --preset")
            cfg = resolve_config(args.preset, args.config, args.out)
            out = run(cfg)
            print(f"wrote artifacts to {out}")
        else:
            gen_field(args.spec, args.out)
            print(f"wrote field to {args.out}")
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except LodError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
