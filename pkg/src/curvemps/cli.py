"""Command-line front end: configuration, orchestration, benchmark CSVs.

Subcommands
    map     write a mapping file and chain-locality CSVs
    ground  run a ground-state engine (chain sweep, tree variants, or ED)
    ttn     alias of ground with a tree engine default
    bench   snake-vs-hilbert comparison over a U grid or size grid
    ed      sector exact diagonalization (optionally spectrum comparison)

Flags override a plain-text ``key=value`` config file (--config); the
effective configuration is always written next to the outputs.  Exit codes:
0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .lattice import (
    LatticeSpec,
    MappingError,
    build_edges,
    hilbert_map,
    load_custom_mapping,
    locality_report,
    snake_map,
    write_locality_csvs,
    write_mapping_file,
)
from .hamiltonian import (
    FillingSpec,
    HubbardParams,
    delta_metric,
    filling_to_charges,
    mapped_terms,
    write_terms_csv,
)
from .mps import product_init, save_state
from .mpo import compile_mpo, write_bond_profile_csv
from .dmrg import (
    ConvergenceCriteria,
    DMRGConfig,
    EigensolverError,
    PAPER_SCHEDULE,
    SweepSchedule,
    ground_state,
    resume,
)
from .oracle import build_and_solve, spectrum_compare
from . import ttn as ttn_mod

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

ENGINES = ("mps_dmrg", "ttn_a", "ttn_b", "ed")


class ConfigError(ValueError):
    pass


def _fmt(x):
    return f"{x:.12g}"


def _apply_thread_cap():
    cap = os.environ.get("CURVEMPS_THREADS")
    if not cap:
        return
    try:
        n = int(cap)
    except ValueError:
        raise ConfigError(f"CURVEMPS_THREADS must be an integer, got {cap!r}")
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


# --------------------------------------------------------------------------
# argument plumbing
# --------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="key=value config file; flags override")
    p.add_argument("--lattice", help="RxC, e.g. 4x4")
    p.add_argument("--bc", choices=["obc", "pbc"])
    p.add_argument("--mapping", help="snake | hilbert | file:PATH")
    p.add_argument("--t", type=float)
    p.add_argument("--U", type=float)
    p.add_argument("--density", type=float)
    p.add_argument("--nup", type=int)
    p.add_argument("--ndown", type=int)
    p.add_argument("--schedule", help='comma list, e.g. "25,50,100"')
    p.add_argument("--trunc-tol", type=float, dest="trunc_tol")
    p.add_argument("--energy-tol", type=float, dest="energy_tol")
    p.add_argument("--engine", choices=list(ENGINES))
    p.add_argument("--out", help="output directory")
    p.add_argument("--checkpoint", help="chain-engine checkpoint file")
    p.add_argument("--jobs", type=int)
    p.add_argument("--init-noise", type=float, dest="init_noise")
    p.add_argument("--seed", type=int)


DEFAULTS = {
    "lattice": "4x4",
    "bc": "obc",
    "mapping": "hilbert",
    "t": 1.0,
    "U": 6.0,
    "density": None,
    "nup": None,
    "ndown": None,
    "schedule": ",".join(str(m) for m in PAPER_SCHEDULE),
    "trunc_tol": 1e-7,
    "energy_tol": 1e-8,
    "engine": "mps_dmrg",
    "out": "runs",
    "checkpoint": None,
    "jobs": 1,
    "init_noise": 0.2,
    "seed": 0,
    # bench / ed extras
    "u_grid": None,
    "size_grid": None,
    "k": 1,
    "compare": False,
}

_CASTS = {
    "t": float, "U": float, "density": float, "nup": int, "ndown": int,
    "trunc_tol": float, "energy_tol": float, "jobs": int,
    "init_noise": float, "seed": int, "k": int,
    "compare": lambda s: s.lower() in ("1", "true", "yes"),
}


def _load_config_file(path):
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config file {path}: {err}")
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected key=value")
        key, _, val = line.partition("=")
        key = key.strip().replace("-", "_")
        val = val.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"{path}:{ln}: unknown key {key!r}")
        cast = _CASTS.get(key, str)
        try:
            values[key] = cast(val)
        except ValueError:
            raise ConfigError(f"{path}:{ln}: bad value for {key}: {val!r}")
    return values


def _effective(args):
    """Merge defaults <- config file <- explicit flags."""
    eff = dict(DEFAULTS)
    if getattr(args, "config", None):
        eff.update(_load_config_file(args.config))
    for key in eff:
        flag = getattr(args, key, None)
        if flag is not None and flag is not False:
            eff[key] = flag
    return eff


def _parse_lattice(text):
    try:
        rows, cols = text.lower().split("x")
        return int(rows), int(cols)
    except ValueError:
        raise ConfigError(f"--lattice must be RxC, got {text!r}")


def _build_mapping(eff, spec):
    kind = eff["mapping"]
    try:
        if kind == "snake":
            return snake_map(spec)
        if kind == "hilbert":
            return hilbert_map(spec)
        if kind.startswith("file:"):
            path = kind[5:]
            return load_custom_mapping(
                Path(path).read_text().splitlines(), spec
            )
    except (MappingError, OSError) as err:
        raise ConfigError(str(err))
    raise ConfigError(f"unknown mapping {kind!r}")


def _filling(eff, spec):
    if eff["nup"] is not None or eff["ndown"] is not None:
        if eff["nup"] is None or eff["ndown"] is None:
            raise ConfigError("--nup and --ndown must be given together")
        if eff["density"] is not None:
            raise ConfigError("give either --density or --nup/--ndown")
        return FillingSpec(eff["nup"], eff["ndown"])
    density = eff["density"] if eff["density"] is not None else 1.0
    try:
        return filling_to_charges(spec, density)
    except ValueError as err:
        raise ConfigError(str(err))


def _schedule(eff):
    try:
        dims = tuple(int(x) for x in str(eff["schedule"]).split(",") if x.strip())
        return SweepSchedule(dims)
    except ValueError as err:
        raise ConfigError(f"bad schedule: {err}")


def _dmrg_config(eff):
    try:
        return DMRGConfig(
            schedule=_schedule(eff),
            criteria=ConvergenceCriteria(eff["trunc_tol"], eff["energy_tol"]),
        )
    except ValueError as err:
        raise ConfigError(str(err))


def _out_dir(eff):
    out = Path(eff["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_effective(eff, out_dir):
    with open(out_dir / "effective_config.txt", "w") as fh:
        for key in sorted(eff):
            if eff[key] is not None:
                fh.write(f"{key}={eff[key]}\n")


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_map(eff):
    rows, cols = _parse_lattice(eff["lattice"])
    try:
        spec = LatticeSpec(rows, cols, eff["bc"])
        mapping = _build_mapping(eff, spec)
    except MappingError as err:
        raise ConfigError(str(err))
    edges = build_edges(spec)
    report = locality_report(mapping, edges)
    out = _out_dir(eff)
    _write_effective(eff, out)
    with open(out / "mapping.txt", "w") as fh:
        write_mapping_file(mapping, fh)
    with open(out / "locality_metrics.csv", "w") as mfh, \
            open(out / "locality_cuts.csv", "w") as cfh:
        write_locality_csvs(report, mfh, cfh)
    print(f"mapping written to {out / 'mapping.txt'}")
    print(f"max_distance={report.max_distance} "
          f"mean_distance={_fmt(float(report.mean_distance))}")
    return EXIT_OK


def _tree_order(spec):
    import math

    if spec.n_rows != spec.n_cols:
        raise ConfigError("tree engines need a square lattice")
    k = round(math.log2(spec.n_rows))
    if 2**k != spec.n_rows or k < 1:
        raise ConfigError("tree engines need a 2^k x 2^k lattice")
    return k


def _run_engine(eff, log=print):
    """Shared engine driver; returns (record dict, out_dir)."""
    rows, cols = _parse_lattice(eff["lattice"])
    spec = LatticeSpec(rows, cols, eff["bc"])
    mapping = _build_mapping(eff, spec)
    filling = _filling(eff, spec)
    params = HubbardParams(eff["t"], eff["U"])
    terms = mapped_terms(build_edges(spec), mapping, params)
    config = _dmrg_config(eff)
    out = _out_dir(eff)
    _write_effective(eff, out)
    with open(out / "terms.csv", "w") as fh:
        write_terms_csv(terms, fh)

    engine = eff["engine"]
    t0 = time.perf_counter()
    artifacts = {"terms": str(out / "terms.csv")}
    if engine == "mps_dmrg":
        h = compile_mpo(terms, spec.n_sites)
        with open(out / "bond_profile.csv", "w") as fh:
            write_bond_profile_csv(fh, h.bond_profile)
        artifacts["bond_profile"] = str(out / "bond_profile.csv")
        ckpt = eff["checkpoint"]
        if ckpt and Path(ckpt).exists():
            res = resume(ckpt, h, config, log=log, checkpoint_path=ckpt)
        else:
            init = product_init(mapping, filling, noise=eff["init_noise"],
                                seed=eff["seed"])
            res = ground_state(init, h, config, log=log,
                               checkpoint_path=ckpt)
        save_state(res.final_state, out / "state.npz")
        artifacts["state"] = str(out / "state.npz")
    elif engine in ("ttn_a", "ttn_b"):
        import numpy as np

        from .mps import _occupation_pattern

        k = _tree_order(spec)
        build = ttn_mod.build_ttn_a if engine == "ttn_a" else ttn_mod.build_ttn_b
        try:
            topology = build(k)
        except ttn_mod.TopologyError as err:
            raise ConfigError(str(err))
        with open(out / "topology.txt", "w") as fh:
            ttn_mod.write_topology(topology, fh)
        artifacts["topology"] = str(out / "topology.txt")
        occ = _occupation_pattern(mapping, filling)
        init = ttn_mod.ttn_product_init(topology, occ)
        if eff["init_noise"] > 0:
            ttn_mod._ttn_apply_noise(
                init, eff["init_noise"],
                np.random.default_rng(eff["seed"]),
                ttn_mod._axis_maps(topology),
            )
        res = ttn_mod.ttn_ground_state(topology, terms, init, config, log=log)
    elif engine == "ed":
        charge = (filling.n_up, filling.n_down)
        ed = build_and_solve(terms, spec.n_sites, charge)
        e0 = float(ed.eigenvalues[0])

        class _EDShim:
            final_energy = e0
            energy_per_site = e0 / spec.n_sites
            sweep_records = []
            converged = True

        res = _EDShim()
    else:
        raise ConfigError(f"unknown engine {engine!r}")

    wall = time.perf_counter() - t0
    with open(out / "sweeps.csv", "w") as fh:
        fh.write("sweep,direction,max_bond,max_discarded,energy,wall_time\n")
        for r in res.sweep_records:
            fh.write(f"{r.sweep},{r.direction},{r.max_bond_used},"
                     f"{r.max_discarded:.6e},{_fmt(r.energy)},"
                     f"{r.wall_time:.3f}\n")
    with open(out / "energy.csv", "w") as fh:
        fh.write("engine,mapping,final_energy,energy_per_site,converged\n")
        fh.write(f"{engine},{eff['mapping']},{_fmt(res.final_energy)},"
                 f"{_fmt(res.energy_per_site)},{res.converged}\n")
    artifacts["sweeps"] = str(out / "sweeps.csv")
    artifacts["energy"] = str(out / "energy.csv")
    record = {
        "config": {key: eff[key] for key in sorted(eff) if eff[key] is not None},
        "final_energy": res.final_energy,
        "energy_per_site": res.energy_per_site,
        "converged": res.converged,
        "n_sweeps": len(res.sweep_records),
        "wall_time": wall,
        "artifacts": artifacts,
    }
    with open(out / "run_record.json", "w") as fh:
        json.dump(record, fh, indent=2)
    return record, out


def cmd_ground(eff):
    record, out = _run_engine(eff)
    print(f"final energy      {_fmt(record['final_energy'])}")
    print(f"energy per site   {_fmt(record['energy_per_site'])}")
    print(f"converged         {record['converged']}")
    print(f"artifacts in      {out}")
    return EXIT_OK


def _bench_point(point):
    """One (label, mapping) bench run in an isolated directory."""
    eff, label, mapping = point
    sub = dict(eff)
    sub["mapping"] = mapping
    sub["out"] = str(Path(eff["out"]) / f"{label}_{mapping}")
    record, _ = _run_engine(sub, log=None)
    return label, mapping, record["final_energy"]


def cmd_bench(eff):
    if eff["u_grid"] and eff["size_grid"]:
        raise ConfigError("give either --u-grid or --size-grid")
    points = []
    if eff["size_grid"]:
        for lat in str(eff["size_grid"]).split(","):
            sub = dict(eff)
            sub["lattice"] = lat.strip()
            points.append((sub, f"L{lat.strip()}"))
    else:
        grid = str(eff["u_grid"] or eff["U"]).split(",")
        for u in grid:
            sub = dict(eff)
            sub["U"] = float(u)
            points.append((sub, f"U{u.strip()}"))
    jobs = []
    for sub, label in points:
        for mapping in ("snake", "hilbert"):
            jobs.append((sub, label, mapping))
    results = {}
    if eff["jobs"] > 1:
        with ProcessPoolExecutor(max_workers=eff["jobs"]) as pool:
            for label, mapping, e in pool.map(_bench_point, jobs):
                results[(label, mapping)] = e
    else:
        for job in jobs:
            label, mapping, e = _bench_point(job)
            results[(label, mapping)] = e
    out = _out_dir(eff)
    _write_effective(eff, out)
    path = out / "comparison.csv"
    with open(path, "w") as fh:
        fh.write("point,E_snake,E_hilbert,delta_percent\n")
        for sub, label in points:
            es = results[(label, "snake")]
            eh = results[(label, "hilbert")]
            fh.write(f"{label},{_fmt(es)},{_fmt(eh)},"
                     f"{_fmt(delta_metric(es, eh))}\n")
    print(f"comparison written to {path}")
    return EXIT_OK


def cmd_ed(eff):
    rows, cols = _parse_lattice(eff["lattice"])
    spec = LatticeSpec(rows, cols, eff["bc"])
    filling = _filling(eff, spec)
    charge = (filling.n_up, filling.n_down)
    params = HubbardParams(eff["t"], eff["U"])
    edges = build_edges(spec)
    out = _out_dir(eff)
    _write_effective(eff, out)
    if eff["compare"]:
        ts = mapped_terms(edges, snake_map(spec), params)
        th = mapped_terms(edges, hilbert_map(spec), params)
        dev = spectrum_compare(ts, th, spec.n_sites, charge, eff["k"])
        with open(out / "spectrum_compare.csv", "w") as fh:
            fh.write("k,max_relative_deviation\n")
            fh.write(f"{eff['k']},{dev:.6e}\n")
        print(f"max relative deviation over {eff['k']} levels: {dev:.3e}")
        return EXIT_OK
    mapping = _build_mapping(eff, spec)
    terms = mapped_terms(edges, mapping, params)
    ed = build_and_solve(terms, spec.n_sites, charge, eff["k"])
    with open(out / "eigenvalues.csv", "w") as fh:
        fh.write("index,energy\n")
        for i, e in enumerate(ed.eigenvalues):
            fh.write(f"{i},{_fmt(e)}\n")
    e0 = float(ed.eigenvalues[0])
    print(f"ground energy     {_fmt(e0)}")
    print(f"energy per site   {_fmt(e0 / spec.n_sites)}")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="curvemps",
        description="Hubbard-model ground states on curve-mapped chains",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("map", cmd_map), ("ground", cmd_ground),
                     ("ttn", cmd_ground), ("bench", cmd_bench),
                     ("ed", cmd_ed)):
        p = sub.add_parser(name)
        _add_common(p)
        p.set_defaults(func=fn)
        if name == "bench":
            p.add_argument("--u-grid", dest="u_grid",
                           help='comma list of U values, e.g. "2,4,6"')
            p.add_argument("--size-grid", dest="size_grid",
                           help='comma list of lattices, e.g. "4x4,8x8"')
        if name == "ed":
            p.add_argument("--k", type=int, help="number of eigenvalues")
            p.add_argument("--compare", action="store_true", default=None,
                           help="snake-vs-hilbert spectrum comparison")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_thread_cap()
        eff = _effective(args)
        if args.command == "ttn" and getattr(args, "engine", None) is None:
            eff["engine"] = "ttn_b"
        return args.func(eff)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (EigensolverError, ArithmeticError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
