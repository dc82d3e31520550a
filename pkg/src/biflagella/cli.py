"""Command line: ``simulate``, ``sweep`` and ``check``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from .config import (DESK_PRESET, RPM, ConfigError, derived_stiffnesses, dimensionless_groups,
                     dump_config, load_config, reynolds_number)


def _load(args):
    # precedence: config file < preset < --set
    text = Path(args.config).read_text() if args.config else ""
    cfg = load_config(text)
    if getattr(args, "preset", None) == "desk":
        cfg = cfg.with_values(**DESK_PRESET)
    if args.set:
        cfg = load_config(dump_config(cfg), args.set)
    return cfg


def cmd_simulate(args) -> int:
    from .harness import run_single, write_metadata, write_series_csv

    cfg = _load(args)
    kv = {}
    if args.omega1 is not None:
        kv["omega1"] = args.omega1 * RPM
    if args.omega2 is not None:
        kv["omega2"] = args.omega2 * RPM
    if args.duration is not None:
        kv["duration"] = args.duration
    cfg = cfg.with_values(**kv)
    rec = run_single(cfg)
    out = Path(args.out)
    write_series_csv(rec, out)
    s = rec.steady
    write_metadata(out.with_suffix(".meta.json"), cfg, rec.wall_time, extra={
        "completed": rec.completed, "failure": rec.failure, "converged": rec.converged,
        "spin": rec.spin, "psi_ss_deg": None if s is None else s.psi,
        "theta_ss_deg": None if s is None else s.theta,
        "yaw_unwrapped_final_deg": rec.yaw_unwrapped_final})
    if s is None:
        print(f"wrote {out}; series too short for a steady-state estimate")
    else:
        print(f"wrote {out}; psi_ss={s.psi:.3f} deg theta_ss={s.theta:.3f} deg "
              f"converged={rec.converged} spin={rec.spin}")
    return 0 if rec.completed else 2


def cmd_sweep(args) -> int:
    from .harness import parse_range, run_sweep

    cfg = _load(args)
    w1 = parse_range(args.omega1_range)
    w2 = parse_range(args.omega2_range)
    print(f"{len(w1) * len(w2)} trials, {cfg.duration:g} s each")
    res = run_sweep(cfg, w1, w2, workers=args.workers, out_dir=args.out_dir)
    failed = [r for r in res.records if not r.completed]
    print(f"wrote {Path(args.out_dir) / 'map.csv'}; {len(failed)} failed trial(s)")
    return 0


def _self_tests(cfg) -> list[tuple[str, bool, str]]:
    """Cheap invariant checks on the configured robot."""
    from .contact import ContactModel, ContactParams
    from .elastic import ElasticModel
    from .hydro import assemble_mobility
    from .rod import build_robot

    out = []
    robot, state = build_robot(cfg)
    model = ElasticModel(robot, cfg)
    rep = model.evaluate_state(state, derivatives=1)
    out.append(("rest state is unstressed", rep.total < 1e-12 and np.abs(rep.gradient).max() < 1e-9,
                f"E={rep.total:.3g} J"))
    seg = cfg.solver.segment_length
    # the radial crank edges have the helix radius as their length
    helix_edges = np.setdiff1d(robot.elastic_edges, robot.root_edges)
    lengths = robot.rest_length[helix_edges]
    out.append(("helix edge lengths match segment length",
                bool(np.allclose(lengths, seg, rtol=1e-9)),
                f"{lengths.min() * 1e3:.3f}..{lengths.max() * 1e3:.3f} mm"))
    mob = assemble_mobility(state.x, cfg.epsilon, cfg.fluid.viscosity,
                            robot.edges[robot.elastic_edges], robot.node_voronoi)
    eig = np.linalg.eigvalsh(mob.A)
    out.append(("mobility positive-definite", bool(eig[0] > 0), f"eig {eig[0]:.3g}..{eig[-1]:.3g}"))
    cm = ContactModel(robot, ContactParams(cfg.solver.contact_stiffness, cfg.solver.contact_tolerance,
                                           cfg.helix.cross_section_radius), seg)
    c = cm.evaluate(state.x, hessian=False)
    gap = "no pair within reach" if np.isinf(c.min_distance) else f"min distance {c.min_distance * 1e3:.3f} mm"
    out.append(("no contact at rest", c.energy == 0.0, gap))
    return out


def cmd_check(args) -> int:
    cfg = _load(args)
    h = cfg.helix
    EA, EI, GJ = derived_stiffnesses(cfg.material, h.cross_section_radius)
    print(f"EA={EA:.6g} N  EI={EI:.6g} N m^2  GJ={GJ:.6g} N m^2")
    print(f"contour length {h.contour_length:.6g} m, turns {h.turns:.4g}, epsilon {cfg.epsilon:.4g} m")
    for label, w in (("omega1", cfg.omega1), ("omega2", cfg.omega2), ("max speed", cfg.max_speed)):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            re = reynolds_number(cfg.fluid.fluid_density, w, h.helix_radius, h.cross_section_radius,
                                 cfg.fluid.viscosity)
        note = f"  WARNING: {caught[0].message}" if caught else ""
        print(f"Re at {label} ({w / RPM:g} rpm) = {re:.4g}{note}")
    g = dimensionless_groups(cfg, cfg.max_speed)
    print("dimensionless groups at max speed: "
          f"viscous/bending={g[0]:.5g} separation/length={g[1]:.5g} "
          f"pitch/contour={g[2]:.5g} radius/contour={g[3]:.5g}")
    ok = True
    for name, passed, detail in _self_tests(cfg):
        ok &= passed
        print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
    if args.verbose:
        print(dump_config(cfg), end="")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="biflagella", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value config file (units allowed, e.g. 'mm')")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        sp.add_argument("--preset", choices=["desk"])

    s = sub.add_parser("simulate", help="run one trial and write its time series")
    common(s)
    s.add_argument("--omega1", type=float, help="rpm")
    s.add_argument("--omega2", type=float, help="rpm")
    s.add_argument("--duration", type=float, help="s")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    w = sub.add_parser("sweep", help="run a grid of trials and write the steady-state map")
    common(w)
    w.add_argument("--omega1-range", required=True, help="start:stop:step in rpm")
    w.add_argument("--omega2-range", required=True, help="start:stop:step in rpm")
    w.add_argument("--out-dir", required=True)
    w.add_argument("--workers", type=int)
    w.set_defaults(func=cmd_sweep)

    c = sub.add_parser("check", help="print derived quantities and run quick self-tests")
    common(c)
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        code = args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    if args.verbose:
        print(f"done in {time.perf_counter() - start:.1f} s")
    return code


if __name__ == "__main__":
    sys.exit(main())
