"""Non-interference checker, overhead benchmarks, calibration, and the
randomized corpus."""

import pytest

from specsim.machine import MachineConfig
from specsim.memhier import CacheImage, Level
from specsim.microprog import (
    AttackLayout,
    AttackParams,
    BranchInfo,
    Gadget,
    Literal,
    MicroOp,
    MicroProgram,
    OpKind,
    Ordering,
    SecretDep,
)
from specsim.schemes import SchemeId
from specsim.attacks import plan_attack
from specsim.seccheck import (
    Benchmark,
    bench_overhead,
    calibrate,
    check_ideal,
    check_ideal_differential,
    gen_alu_dense,
    gen_branch_dense,
    gen_load_chain,
    gen_random_program,
    interference_gap,
    nospec,
    synth_suite,
)
from specsim.pipeline import run

CFG = MachineConfig()
LAY = AttackLayout(llc_sets=CFG.geometry.llc_sets)


def prog_of(*ops, secrets=None):
    p = MicroProgram(ops=list(ops), secret_slots=secrets or {})
    p.validate()
    return p


def spectre_v1_program():
    """Bounds-check bypass shape: a mispredicted branch guards a secret
    read feeding a secret-indexed load into a real (set-tracked) line."""
    ops = [
        MicroOp(0, OpKind.LOAD, addr=Literal(LAY.resolver_line)),
        MicroOp(1, OpKind.BRANCH, branch=BranchInfo(True, False, resolver=0, join=4)),
        MicroOp(2, OpKind.LOAD, addr=Literal(LAY.access_line)),
        MicroOp(3, OpKind.LOAD, src_deps=(2,), addr=SecretDep(LAY.victim_line, "s0", stride=1, k=1)),
    ]
    prog = MicroProgram(ops=ops, secret_slots={"s0": 0})
    prog.validate()
    image = CacheImage(scripts={LAY.resolver_line: Level.MEMMISS, LAY.access_line: Level.L1HIT})
    return prog, image


class TestCheckIdeal:
    def test_branchless_program_holds_under_any_scheme(self):
        p = prog_of(MicroOp(0, OpKind.LOAD, addr=Literal(LAY.victim_line)), MicroOp(1, OpKind.ALU))
        for scheme in (SchemeId.UNSAFE, SchemeId.DOM_NONTSO, SchemeId.NOINTERFERENCE):
            assert check_ideal(p, CFG, scheme).holds

    def test_spectre_v1_violates_under_unsafe(self):
        prog, image = spectre_v1_program()
        res = check_ideal(prog, CFG, SchemeId.UNSAFE, secrets={"s0": 1}, image=image)
        assert not res.holds
        assert res.witness_index is not None
        # The transient secret-indexed fill is the divergence.
        assert (LAY.victim_line + 1, "victim", "fill") in res.pattern_a

    def test_spectre_v1_holds_under_fence_futuristic(self):
        prog, image = spectre_v1_program()
        for bit in (0, 1):
            assert check_ideal(prog, CFG, SchemeId.FENCE_FUTURISTIC, secrets={"s0": bit}, image=image).holds

    def test_nospec_oracle_of_squash_free_program_is_the_run_itself(self):
        bench = gen_branch_dense(seed=9)
        e = run(bench.program, CFG, SchemeId.UNSAFE, image=bench.image)
        ns = nospec(bench.program, CFG, SchemeId.UNSAFE, image=bench.image)
        assert e.pattern_keys() == ns.pattern_keys()
        assert e.serialize() == ns.serialize()


class TestCheckDifferential:
    def test_attack_program_violated_under_vulnerable_scheme(self):
        plan = plan_attack(Gadget.NPEU, Ordering.VDVD, SchemeId.DOM_NONTSO, CFG)
        res = check_ideal_differential(plan.program, CFG, SchemeId.DOM_NONTSO, plan.image, plan.script)
        assert not res.holds
        # Witness: the victim/reference pair swaps.
        assert res.witness_index is not None

    def test_attack_program_holds_under_nointerference(self):
        plan = plan_attack(Gadget.NPEU, Ordering.VDVD, SchemeId.NOINTERFERENCE, CFG)
        assert check_ideal_differential(plan.program, CFG, SchemeId.NOINTERFERENCE, plan.image, plan.script).holds

    def test_no_secrets_holds_vacuously(self):
        p = prog_of(MicroOp(0, OpKind.ALU))
        assert check_ideal_differential(p, CFG, SchemeId.UNSAFE).holds

    def test_correct_path_secret_load_rejected(self):
        p = MicroProgram(
            ops=[MicroOp(0, OpKind.LOAD, addr=SecretDep(LAY.victim_line, "s0"))],
            secret_slots={"s0": 0},
        )
        p.validate()
        with pytest.raises(ValueError):
            check_ideal_differential(p, CFG, SchemeId.UNSAFE)

    def test_soundness_coupling_with_run_attack(self):
        # Decodable above chance at zero noise iff the differential check
        # is violated, for a sample of cells either way.
        from specsim.attacks import run_attack
        from specsim.seccheck import calibrate_for_matrix

        cases = [
            (Gadget.NPEU, Ordering.VDAD, SchemeId.MUONTRAP, True),
            (Gadget.MSHR, Ordering.VDAD, SchemeId.DOM_NONTSO, False),
            (Gadget.RS, Ordering.VIAD, SchemeId.INVISISPEC_FUTURISTIC, True),
            (Gadget.RS, Ordering.VIAD, SchemeId.SAFESPEC_WFB, False),
        ]
        bits = [0, 1] * 8
        for gadget, ordering, scheme, vulnerable in cases:
            params = calibrate_for_matrix(gadget, ordering, scheme, CFG)
            res = run_attack(gadget, ordering, scheme, bits, 1, 0.0, seed=3, cfg=CFG, params=params)
            decodes = res.error_rate < 0.25
            plan = plan_attack(gadget, ordering, scheme, CFG, params)
            diff = check_ideal_differential(plan.program, CFG, scheme, plan.image, plan.script)
            assert decodes == vulnerable
            assert diff.holds == (not vulnerable)


class TestBenchmarks:
    def test_suite_programs_are_squash_free(self):
        for bench in synth_suite(seed=5):
            t = run(bench.program, CFG, SchemeId.UNSAFE, image=bench.image)
            assert not any(e.name == "squash" for e in t.events), bench.name

    def test_fence_overhead_ordering(self):
        rep = bench_overhead(synth_suite(seed=3), CFG, [SchemeId.FENCE_SPECTRE, SchemeId.FENCE_FUTURISTIC])
        fs, ff = rep.geomean(SchemeId.FENCE_SPECTRE), rep.geomean(SchemeId.FENCE_FUTURISTIC)
        assert ff > fs > 1.0
        assert rep.slowdowns["branch_dense"][SchemeId.FENCE_SPECTRE.value] > 1.05

    def test_straight_line_alu_fence_spectre_is_free(self):
        bench = gen_alu_dense(seed=3)
        rep = bench_overhead([bench], CFG, [SchemeId.FENCE_SPECTRE])
        assert rep.slowdowns["alu_dense"][SchemeId.FENCE_SPECTRE.value] == pytest.approx(1.0)

    def test_load_chain_fence_futuristic_slows(self):
        bench = gen_load_chain(seed=3)
        rep = bench_overhead([bench], CFG, [SchemeId.FENCE_FUTURISTIC])
        assert rep.slowdowns["load_chain"][SchemeId.FENCE_FUTURISTIC.value] > 1.0

    def test_slowdown_at_least_one_for_fence_schemes(self):
        rep = bench_overhead(synth_suite(seed=7), CFG, [SchemeId.FENCE_SPECTRE, SchemeId.FENCE_FUTURISTIC])
        for per in rep.slowdowns.values():
            for ratio in per.values():
                assert ratio >= 1.0


class TestCalibrate:
    def test_npeu_under_dom_finds_positive_gap(self):
        cal = calibrate(Gadget.NPEU, Ordering.VDAD, SchemeId.DOM_NONTSO, CFG)
        assert cal.feasible
        assert cal.params.reference_offset > 0

    def test_single_mshr_is_infeasible(self):
        cal = calibrate(Gadget.MSHR, Ordering.VDAD, SchemeId.INVISISPEC_SPECTRE, CFG, base=AttackParams(m=1))
        assert not cal.feasible
        assert any("rejected" in line for line in cal.trace)

    def test_blocked_scheme_reports_sweep_trace(self):
        cal = calibrate(Gadget.MSHR, Ordering.VDAD, SchemeId.DOM_NONTSO, CFG)
        assert not cal.feasible
        assert cal.trace  # the sweep is reported

    def test_rs_frontend_stall_differential(self):
        cal = calibrate(Gadget.RS, Ordering.VIAD, SchemeId.DOM_NONTSO, CFG)
        assert cal.feasible


class TestInterferenceGap:
    def test_gap_positive_and_deterministic(self):
        g1a, g2a = interference_gap(CFG)
        g1b, g2b = interference_gap(CFG)
        assert (g1a, g2a) == (g1b, g2b)
        assert g1a > 0 and g2a > 0


class TestRandomCorpus:
    def test_programs_valid_and_runnable(self):
        for seed in range(40):
            prog, image = gen_random_program(seed)
            prog.validate()
            t = run(prog, CFG, SchemeId.UNSAFE, image=image)
            assert t.total_cycles >= 0

    def test_fence_futuristic_holds_on_sample(self):
        for seed in range(60):
            prog, image = gen_random_program(seed)
            assert check_ideal(prog, CFG, SchemeId.FENCE_FUTURISTIC, image=image).holds
