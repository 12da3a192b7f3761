"""Command-line entry point.

Subcommands: run, attack, matrix, check, bench, calibrate, dump-policy.
Every subcommand writes machine-readable output (CSV or line format) plus a
short human summary; identical invocations produce identical bytes.

Exit codes: 0 success / property Holds; 1 property Violated or matrix
mismatch; 2 usage or configuration errors; 3 infeasible or
non-constructible attack configurations.
"""

from __future__ import annotations

import argparse
import configparser
import random
import sys
from dataclasses import replace

from .attacks import (
    MATRIX_SCHEMES,
    run_attack,
    sweep_csv,
    sweep_error_vs_rate,
    vulnerability_matrix,
)
from .machine import EuClass, MachineConfig
from .memhier import CacheGeometry, CacheImage, CacheSet, format_set, qlru_touch
from .microprog import (
    AttackParams,
    ConstructionError,
    Gadget,
    Ordering,
    parse_program,
)
from .pipeline import NEVER, SimulationDeadlock, run
from .schemes import SchemeId
from .seccheck import (
    bench_overhead,
    calibrate,
    check_ideal,
    check_ideal_differential,
    matrix_calibrations,
    synth_suite,
)

EXIT_OK = 0
EXIT_VIOLATED = 1
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3


class ConfigError(ValueError):
    pass


_MACHINE_KEYS = {
    "fetch_width",
    "dispatch_width",
    "issue_width",
    "retire_width",
    "rob_size",
    "rs_size",
    "cdb_width",
    "l1d_mshrs",
    "branch_resolve_extra",
    "writeback_delay",
    "npeu_latency",
    "npeu_count",
    "alu_count",
    "lsu_count",
    "l1_sets",
    "l1_ways",
    "llc_sets",
    "llc_ways",
    "lat_l1",
    "lat_llc",
    "lat_mem",
}
_SCHEME_KEYS = {"id"}
_ATTACK_KEYS = {"z_len", "f_len", "fp_len", "g_len", "m", "reference_offset"}


def load_config(path: str | None) -> tuple[MachineConfig, SchemeId | None, AttackParams | None]:
    """Flat sectioned key=value file with strict unknown-key rejection."""
    cfg = MachineConfig()
    scheme: SchemeId | None = None
    params: AttackParams | None = None
    if path is None:
        return cfg, scheme, params
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path!r}")
    for section in parser.sections():
        if section not in ("machine", "scheme", "attack"):
            raise ConfigError(f"unknown config section [{section}]")
    if parser.has_section("machine"):
        items = dict(parser.items("machine"))
        unknown = set(items) - _MACHINE_KEYS
        if unknown:
            raise ConfigError(f"unknown [machine] keys: {sorted(unknown)}")
        geom_kw = {}
        for key in ("l1_sets", "l1_ways", "llc_sets", "llc_ways", "lat_l1", "lat_llc", "lat_mem"):
            if key in items:
                geom_kw[key] = int(items.pop(key))
        eu = dict(cfg.eu)
        if "npeu_latency" in items or "npeu_count" in items:
            eu["npeu"] = EuClass(
                False,
                int(items.pop("npeu_latency", eu["npeu"].latency)),
                int(items.pop("npeu_count", eu["npeu"].count)),
            )
        if "alu_count" in items:
            eu["alu"] = EuClass(True, eu["alu"].latency, int(items.pop("alu_count")))
        if "lsu_count" in items:
            eu["lsu"] = EuClass(True, eu["lsu"].latency, int(items.pop("lsu_count")))
        kw = {k: int(v) for k, v in items.items()}
        if geom_kw:
            kw["geometry"] = replace(CacheGeometry(), **geom_kw)
        kw["eu"] = eu
        cfg = cfg.with_overrides(**kw)
    if parser.has_section("scheme"):
        items = dict(parser.items("scheme"))
        unknown = set(items) - _SCHEME_KEYS
        if unknown:
            raise ConfigError(f"unknown [scheme] keys: {sorted(unknown)}")
        if "id" in items:
            scheme = SchemeId(items["id"])
    if parser.has_section("attack"):
        items = dict(parser.items("attack"))
        unknown = set(items) - _ATTACK_KEYS
        if unknown:
            raise ConfigError(f"unknown [attack] keys: {sorted(unknown)}")
        params = AttackParams(**{k: int(v) for k, v in items.items()})
    return cfg, scheme, params


def parse_secrets(text: str | None, program) -> dict[str, int] | None:
    """A bit string assigned to the program's secret slots in name order."""
    if text is None:
        return None
    names = sorted(program.secret_slots)
    if len(text) != len(names) or any(c not in "01" for c in text):
        raise ConfigError(f"secrets must be a {len(names)}-bit string for slots {names}")
    return {name: int(bit) for name, bit in zip(names, text)}


def _write(path: str, text: str) -> None:
    with open(path, "w") as f:
        f.write(text)


def cmd_run(args) -> int:
    cfg, scheme, _ = load_config(args.config)
    scheme = SchemeId(args.scheme) if args.scheme else (scheme or SchemeId.UNSAFE)
    with open(args.program) as f:
        program = parse_program(f.read())
    image = None
    if args.image:
        with open(args.image) as f:
            image = CacheImage.parse(f.read())
    secrets = parse_secrets(args.secrets, program)
    trace = run(program, cfg, scheme, secrets=secrets, image=image,
                force_correct_predictions=args.force_correct)
    if args.trace:
        _write(args.trace, trace.serialize())
    if args.occupancy:
        _write(args.occupancy, trace.occupancy_csv())
    retired = sum(1 for t in trace.op_times.values() if t["retire"] != NEVER)
    squashed = sum(1 for t in trace.op_times.values() if t["squash"] != NEVER)
    print(f"scheme={scheme.value} total_cycles={trace.total_cycles} "
          f"retired={retired} squashed={squashed} visible_accesses={len(trace.pattern)}")
    return EXIT_OK


def _auto_params(args, cfg, gadget, ordering, scheme, file_params) -> AttackParams:
    if file_params is not None:
        return file_params
    if args.no_calibrate:
        return AttackParams()
    from .seccheck import calibrate_for_matrix

    return calibrate_for_matrix(gadget, ordering, scheme, cfg)


def cmd_attack(args) -> int:
    cfg, _, file_params = load_config(args.config)
    gadget = Gadget(args.gadget)
    ordering = Ordering(args.ordering)
    scheme = SchemeId(args.scheme)
    params = _auto_params(args, cfg, gadget, ordering, scheme, file_params)
    if args.sweep_trials:
        # Plot-ready channel-quality curve: error rate vs throughput for
        # increasing trials-per-bit at the given noise level.
        trial_counts = [int(t) for t in args.sweep_trials.split(",")]
        points = sweep_error_vs_rate(
            gadget, ordering, scheme, args.noise, trial_counts, args.bits,
            seed=args.seed, cfg=cfg, params=params, workers=args.workers,
        )
        text = sweep_csv(points)
        if args.out:
            _write(args.out, text)
        print(text, end="")
        return EXIT_OK
    rng = random.Random(f"bits:{args.seed}")
    bits = [rng.randrange(2) for _ in range(args.bits)]
    res = run_attack(
        gadget,
        ordering,
        scheme,
        bits,
        trials_per_bit=args.trials,
        noise=args.noise,
        seed=args.seed,
        cfg=cfg,
        params=params,
        workers=args.workers,
    )
    header = "gadget,ordering,scheme,bits,trials,noise,error_rate,discard_rate,cycles_per_bit"
    row = (
        f"{gadget.value},{ordering.value},{scheme.value},{args.bits},{args.trials},"
        f"{args.noise},{res.error_rate:.4f},{res.discard_rate:.4f},{res.cycles_per_bit:.1f}"
    )
    if args.out:
        _write(args.out, header + "\n" + row + "\n")
    print(header)
    print(row)
    return EXIT_OK


def cmd_matrix(args) -> int:
    cfg, _, _ = load_config(args.config)
    schemes = MATRIX_SCHEMES
    if args.schemes:
        schemes = tuple(SchemeId(s) for s in args.schemes.split(","))
    cals = matrix_calibrations(cfg, schemes)
    res = vulnerability_matrix(
        cfg, seed=args.seed, bits=args.bits, trials=args.trials, schemes=schemes,
        calibrations=cals, workers=args.workers,
    )
    csv_text = "\n".join(res.csv_lines()) + "\n"
    if args.out:
        _write(args.out, csv_text)
    for line in res.table_lines():
        print(line)
    print()
    for line in res.diff_lines():
        print(line)
    ok = res.matches_reference()
    print(f"\nreference match: {'yes' if ok else 'NO'}")
    return EXIT_OK if ok else EXIT_VIOLATED


def cmd_check(args) -> int:
    cfg, scheme, _ = load_config(args.config)
    scheme = SchemeId(args.scheme) if args.scheme else (scheme or SchemeId.UNSAFE)
    with open(args.program) as f:
        program = parse_program(f.read())
    image = None
    if args.image:
        with open(args.image) as f:
            image = CacheImage.parse(f.read())
    if args.differential:
        result = check_ideal_differential(program, cfg, scheme, image=image)
    else:
        secrets = parse_secrets(args.secrets, program)
        result = check_ideal(program, cfg, scheme, secrets=secrets, image=image)
    if result.holds:
        print(f"Holds: visible pattern invariant under {scheme.value}")
        return EXIT_OK
    print(f"Violated at index {result.witness_index} ({result.label_a} vs {result.label_b})")
    for label, pattern in ((result.label_a, result.pattern_a), (result.label_b, result.pattern_b)):
        window = pattern[max(0, result.witness_index - 2) : result.witness_index + 3]
        print(f"  {label}: ...{window}...")
    return EXIT_VIOLATED


def cmd_bench(args) -> int:
    cfg, _, _ = load_config(args.config)
    if args.suite != "synth":
        raise ConfigError(f"unknown suite {args.suite!r}")
    schemes = [SchemeId(s) for s in args.schemes.split(",")]
    report = bench_overhead(synth_suite(args.seed), cfg, schemes)
    text = "\n".join(report.csv_lines()) + "\n"
    if args.out:
        _write(args.out, text)
    print(text, end="")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg, _, base = load_config(args.config)
    gadget = Gadget(args.gadget)
    ordering = Ordering(args.ordering)
    scheme = SchemeId(args.scheme)
    cal = calibrate(gadget, ordering, scheme, cfg, base=base)
    for line in cal.trace:
        print(f"# {line}")
    if args.timing_csv and gadget is Gadget.NPEU:
        # Plot-ready interference-target timing: victim issue/complete with
        # the gadget executing, inert, and physically removed.
        from .seccheck import _drop_wrong_path
        from .attacks import plan_attack

        params = cal.params or AttackParams()
        plan = plan_attack(gadget, ordering, scheme, cfg, params)
        victim = plan.program.role_ops("victim_a")[0]
        rows = ["label,victim_issue,victim_complete"]
        for label, bit in (("gadget_present", 1), ("gadget_inert", 0)):
            t = plan.victim_trace(bit)
            rows.append(f"{label},{t.times(victim, 'issue')},{t.times(victim, 'complete')}")
        pruned = _drop_wrong_path(plan.program)
        t = run(pruned.program, cfg, scheme, {"s0": 1}, plan.image, None)
        v2 = pruned.remap[victim]
        rows.append(f"gadget_removed,{t.times(v2, 'issue')},{t.times(v2, 'complete')}")
        _write(args.timing_csv, "\n".join(rows) + "\n")
    if not cal.feasible:
        print("infeasible: no stable secret differential in the searched range")
        return EXIT_INFEASIBLE
    p = cal.params
    text = (
        f"[attack]\nz_len = {p.z_len}\nf_len = {p.f_len}\nfp_len = {p.fp_len}\n"
        f"g_len = {p.g_len}\nreference_offset = {p.reference_offset}\n"
    )
    if p.m is not None:
        text += f"m = {p.m}\n"
    if args.out:
        _write(args.out, text)
    print(text, end="")
    return EXIT_OK


def cmd_dump_policy(args) -> int:
    names = args.accesses.split()
    if not names:
        raise ConfigError("empty access sequence")
    line_of: dict[str, int] = {}
    for name in names:
        if name not in line_of:
            line_of[name] = len(line_of)  # one set: consecutive synthetic tags
    display = {line: name for name, line in line_of.items()}
    cset = CacheSet(args.ways)
    print(f"# {args.ways}-way set, {len(line_of)} distinct lines")
    for name in names:
        evicted = qlru_touch(cset, line_of[name])
        note = f"  (evicted {display[evicted]})" if evicted is not None else ""
        print(f"{name:>4s} -> {format_set(cset, display)}{note}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="specsim", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="machine/scheme/attack config file")

    p = sub.add_parser("run", help="simulate one program")
    common(p)
    p.add_argument("--program", required=True)
    p.add_argument("--scheme", choices=[s.value for s in SchemeId])
    p.add_argument("--secrets", help="bit string for the program's secret slots")
    p.add_argument("--image", help="initial cache image file")
    p.add_argument("--trace", help="write the event trace here")
    p.add_argument("--occupancy", help="write per-cycle occupancy CSV here")
    p.add_argument("--force-correct", action="store_true", help="no-misspeculation oracle run")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("attack", help="run a covert-channel attack end to end")
    common(p)
    p.add_argument("--gadget", required=True, choices=[g.value for g in Gadget])
    p.add_argument("--ordering", required=True, choices=[o.value for o in Ordering])
    p.add_argument("--scheme", required=True, choices=[s.value for s in SchemeId])
    p.add_argument("--bits", type=int, default=64)
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--no-calibrate", action="store_true", help="use builder defaults")
    p.add_argument("--sweep-trials", help="comma-separated trial counts: emit the error-vs-rate curve")
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("matrix", help="reproduce the scheme vulnerability matrix")
    common(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--bits", type=int, default=32)
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--out")
    p.add_argument("--schemes", help="comma-separated scheme subset")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_matrix)

    p = sub.add_parser("check", help="non-interference check of the visible pattern")
    common(p)
    p.add_argument("--program", required=True)
    p.add_argument("--scheme", choices=[s.value for s in SchemeId])
    p.add_argument("--secrets")
    p.add_argument("--image")
    p.add_argument("--differential", action="store_true",
                   help="compare across secret assignments instead of against the oracle")
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("bench", help="defense overhead on the synthetic suite")
    common(p)
    p.add_argument("--suite", default="synth")
    p.add_argument("--schemes", default="fence-spectre,fence-futuristic")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("calibrate", help="search sender parameters for a working channel")
    common(p)
    p.add_argument("--gadget", required=True, choices=[g.value for g in Gadget])
    p.add_argument("--ordering", required=True, choices=[o.value for o in Ordering])
    p.add_argument("--scheme", required=True, choices=[s.value for s in SchemeId])
    p.add_argument("--out")
    p.add_argument("--timing-csv", help="write interference-target timing rows (npeu sender)")
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("dump-policy", help="replacement-state transcript for one set")
    p.add_argument("--ways", type=int, default=4)
    p.add_argument("--accesses", required=True, help="space-separated line names, e.g. 'L L A B'")
    p.set_defaults(fn=cmd_dump_policy)

    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except ConstructionError as e:
        print(f"not constructible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except SimulationDeadlock as e:
        print(f"simulation deadlock: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConfigError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
