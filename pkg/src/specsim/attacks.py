"""End-to-end covert-channel harness.

The receiver turns a secret-dependent ordering of two same-set LLC accesses
into replacement state: prime the set (filler lines saturated at age 0, one
anchor line inserted last), let the victim run, then probe with a second
filler set and see which of the two interesting lines survived. The decode
table is derived by replaying prime -> victim order -> probe through the
replacement-policy model rather than hard-coded, because the two survivor
pairs fall out of the aging rules, not out of anything obvious.

Notes on the prime sequence: after "filler many times + anchor" the anchor
sits at age 1 (it fills the one free way). It reaches age 3 only once the
first subsequent miss to the set triggers the uniform aging step; no pure
access sequence over filler + anchor lands on age-0 filler with an age-3
anchor directly (aging that lifts the anchor to 3 would evict it unless a
more-leftward line also hits 3).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import random

from .machine import MachineConfig
from .memhier import CacheGeometry, CacheImage, CacheSet, Level, qlru_touch
from .microprog import (
    AttackLayout,
    AttackParams,
    AttackScript,
    Gadget,
    MicroProgram,
    Ordering,
    build_attack_program,
)
from .pipeline import ExecutionTrace, run
from .schemes import SchemeId

DISCARD = -1
PRIME_PASSES = 2  # filler passes to saturate ages at 0 (test-asserted minimum)


@dataclass(frozen=True)
class EvictionSet:
    """Same-set filler lines, one way short of the associativity."""

    lines: tuple[int, ...]
    label: str

    def validate(self, geom: CacheGeometry, exclude: tuple[int, ...]) -> None:
        if len(self.lines) != geom.llc_ways - 1:
            raise ValueError(f"{self.label}: need associativity-1 = {geom.llc_ways - 1} lines")
        sets = {geom.llc_index(x) for x in self.lines}
        if len(sets) != 1:
            raise ValueError(f"{self.label}: lines span multiple sets")
        if set(self.lines) & set(exclude):
            raise ValueError(f"{self.label}: collides with probe/anchor lines")


@dataclass(frozen=True)
class ResidencyObservation:
    a_hit: bool
    b_hit: bool


@dataclass
class AttackResult:
    decoded_bits: list[int]
    true_bits: list[int]
    error_rate: float
    discard_rate: float
    cycles_per_bit: float
    trials_per_bit: int


def prime(cset: CacheSet, evs1: tuple[int, ...], anchor: int, passes: int = PRIME_PASSES) -> CacheSet:
    """Prime a set: access the filler lines repeatedly, then the anchor."""
    if anchor in evs1:
        raise ValueError("anchor line collides with the filler set")
    if len(set(evs1)) != len(evs1):
        raise ValueError("filler lines collide with each other")
    for _ in range(passes):
        for line in evs1:
            qlru_touch(cset, line)
    qlru_touch(cset, anchor)
    return cset


def probe(cset: CacheSet, evs2: tuple[int, ...], a: int, b: int) -> ResidencyObservation:
    """Access the probe filler set, then report which of a/b survived."""
    for line in evs2:
        qlru_touch(cset, line)
    return ResidencyObservation(a_hit=cset.resident(a), b_hit=cset.resident(b))


def primed_ways(layout: AttackLayout, geom: CacheGeometry, anchor: int) -> list[tuple[int, int]]:
    cset = CacheSet(geom.llc_ways)
    prime(cset, layout.evs1, anchor)
    return [(t, a) for t, a in zip(cset.tags, cset.ages) if t is not None]


def derive_decode_table(
    layout: AttackLayout, geom: CacheGeometry, anchor: int
) -> dict[tuple[bool, bool], int]:
    """Replay prime -> victim order -> probe through the replacement model
    for both orders and map the two survivor pairs to bits. Bit 0 is the
    anchor-first order (no interference), bit 1 the reference-first order."""
    table: dict[tuple[bool, bool], int] = {}
    for bit, order in ((0, (anchor, layout.reference_line)), (1, (layout.reference_line, anchor))):
        cset = CacheSet(geom.llc_ways)
        prime(cset, layout.evs1, anchor)
        for line in order:
            qlru_touch(cset, line)
        obs = probe(cset, layout.evs2, anchor, layout.reference_line)
        key = (obs.a_hit, obs.b_hit)
        if key in table:
            raise ValueError("replacement state does not distinguish the two orders")
        table[key] = bit
    return table


def attack_image(
    gadget: Gadget,
    cfg: MachineConfig,
    layout: AttackLayout | None = None,
    m: int | None = None,
    primed: bool | None = None,
    anchor: int | None = None,
) -> CacheImage:
    """Initial cache contents for one sender: per-gadget hit/miss scripting
    of the phantom lines plus (for the ordering receivers) the primed target
    set. The RS sender's marked line starts flushed instead."""
    lay = layout or AttackLayout(llc_sets=cfg.geometry.llc_sets)
    scripts = {
        lay.resolver_line: Level.MEMMISS,
        lay.access_line: Level.L1HIT,
        lay.victim_phantom_line: Level.LLCHIT,
    }
    s = lay.secret_base
    if gadget is Gadget.NPEU:
        scripts[s] = Level.MEMMISS  # bit 0: transmitter stays slow
        scripts[s + 1] = Level.L1HIT  # bit 1: transmitter returns fast
    elif gadget is Gadget.RS:
        scripts[s] = Level.L1HIT  # bit 0: chain drains, line gets fetched
        scripts[s + 1] = Level.MEMMISS  # bit 1: chain clogs the RS
    else:
        count = m if m is not None else cfg.l1d_mshrs
        for k in range(count):
            scripts[s + k] = Level.MEMMISS
    image = CacheImage(scripts=scripts)
    if primed is None:
        primed = gadget is not Gadget.RS
    if primed:
        image.llc[lay.set_index] = primed_ways(lay, cfg.geometry, anchor if anchor is not None else lay.victim_line)
    image.validate(cfg.geometry)
    return image


def anchor_line(ordering: Ordering, layout: AttackLayout) -> int:
    """The access whose timing the gadget perturbs: the victim data line for
    VD orderings, the marked fetch line for VI orderings."""
    if ordering in (Ordering.VDVD, Ordering.VDAD):
        return layout.victim_line
    return layout.itarget_line


@dataclass
class AttackPlan:
    """Everything needed to run trials of one configured attack."""

    gadget: Gadget
    ordering: Ordering
    scheme: SchemeId
    cfg: MachineConfig
    params: AttackParams
    layout: AttackLayout
    program: MicroProgram
    script: AttackScript | None
    image: CacheImage
    anchor: int
    decode: dict[tuple[bool, bool], int] | None  # None: presence decode (RS)
    # The simulator is a pure function of its inputs, so a bit's victim
    # trace is shared across trials; only probe noise varies per trial.
    trace_cache: dict[int, ExecutionTrace] = field(default_factory=dict)

    @property
    def presence_decode(self) -> bool:
        return self.decode is None

    def victim_trace(self, bit: int) -> ExecutionTrace:
        if bit not in self.trace_cache:
            self.trace_cache[bit] = run_victim(self, bit)
        return self.trace_cache[bit]


def plan_attack(
    gadget: Gadget,
    ordering: Ordering,
    scheme: SchemeId | str,
    cfg: MachineConfig,
    params: AttackParams | None = None,
    layout: AttackLayout | None = None,
) -> AttackPlan:
    p = params or AttackParams()
    lay = layout or AttackLayout(llc_sets=cfg.geometry.llc_sets)
    scheme = SchemeId(scheme) if isinstance(scheme, str) else scheme
    program, script = build_attack_program(ordering, gadget, cfg, p, lay)
    anchor = anchor_line(ordering, lay)
    probe_pair = (anchor, lay.reference_line)
    EvictionSet(lay.evs1, "EVS1").validate(cfg.geometry, probe_pair + lay.evs2)
    EvictionSet(lay.evs2, "EVS2").validate(cfg.geometry, probe_pair + lay.evs1)
    if gadget is Gadget.RS:
        image = attack_image(gadget, cfg, lay, m=p.m)
        decode = None
    else:
        image = attack_image(gadget, cfg, lay, m=p.m, anchor=anchor)
        decode = derive_decode_table(lay, cfg.geometry, anchor)
    return AttackPlan(gadget, ordering, scheme, cfg, p, lay, program, script, image, anchor, decode)


def run_victim(plan: AttackPlan, bit: int, force_correct: bool = False) -> ExecutionTrace:
    return run(
        plan.program,
        plan.cfg,
        plan.scheme,
        secrets={"s0": bit},
        image=plan.image,
        attacker=plan.script,
        force_correct_predictions=force_correct,
    )


def _prime_probe_cost(plan: AttackPlan) -> int:
    lat = plan.cfg.geometry.lat_llc
    if plan.presence_decode:
        return 2 * lat  # flush + reload
    n = len(plan.layout.evs1) * PRIME_PASSES + 1 + len(plan.layout.evs2)
    return n * lat


def observe_trial(
    plan: AttackPlan, bit: int, rng: random.Random, noise: float, interlopers: int = 0
) -> tuple[int, int]:
    """One prime+run+probe trial; returns (decoded bit or DISCARD, cycles)."""
    trace = plan.victim_trace(bit)
    ways = trace.llc_state.get(plan.layout.set_index, ())
    cset = CacheSet(plan.cfg.geometry.llc_ways)
    for i, (tag, age) in enumerate(ways):
        cset.tags[i] = tag
        cset.ages[i] = age
    if interlopers > 0:
        pool = plan.layout.interlopers(16)
        for _ in range(interlopers):
            qlru_touch(cset, rng.choice(pool))
    if plan.presence_decode:
        present = cset.resident(plan.anchor)
        if noise > 0 and rng.random() < noise:
            present = not present
        return (0 if present else 1), trace.total_cycles
    obs = probe(cset, plan.layout.evs2, plan.anchor, plan.layout.reference_line)
    a_hit, b_hit = obs.a_hit, obs.b_hit
    if noise > 0:
        if rng.random() < noise:
            a_hit = not a_hit
        if rng.random() < noise:
            b_hit = not b_hit
    return plan.decode.get((a_hit, b_hit), DISCARD), trace.total_cycles


def _decode_bit(votes: list[int]) -> int:
    counted = [v for v in votes if v != DISCARD]
    if not counted:
        return DISCARD
    ones = sum(counted)
    zeros = len(counted) - ones
    if ones == zeros:
        return DISCARD
    return 1 if ones > zeros else 0


def run_attack(
    gadget: Gadget,
    ordering: Ordering,
    scheme: SchemeId | str,
    secret_bits: list[int],
    trials_per_bit: int,
    noise: float,
    seed: int,
    cfg: MachineConfig | None = None,
    params: AttackParams | None = None,
    layout: AttackLayout | None = None,
    interlopers: int = 0,
    workers: int = 1,
) -> AttackResult:
    """Transmit the given bits over the configured channel: per bit, run
    trials_per_bit prime/victim/probe rounds and majority-vote the decodes.
    All randomness derives from the root seed per (bit, trial); trials are
    independent simulations, so the worker count never changes the result.
    """
    cfg = cfg or MachineConfig()
    plan = plan_attack(gadget, ordering, scheme, cfg, params, layout)
    trial_cost = _prime_probe_cost(plan)

    def one(idx_bit_trial: tuple[int, int, int]) -> tuple[int, int, int, int]:
        idx, bit, trial = idx_bit_trial
        rng = random.Random(f"{seed}:{idx}:{trial}")
        decoded, cycles = observe_trial(plan, bit, rng, noise, interlopers)
        return idx, trial, decoded, cycles + trial_cost

    jobs = [(i, bit, t) for i, bit in enumerate(secret_bits) for t in range(trials_per_bit)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            raw = list(pool.map(one, jobs))
    else:
        raw = [one(j) for j in jobs]
    raw.sort()
    votes: dict[int, list[int]] = {i: [] for i in range(len(secret_bits))}
    total_cycles = 0
    for idx, _, decoded, cost in raw:
        votes[idx].append(decoded)
        total_cycles += cost
    decoded_bits = [_decode_bit(votes[i]) for i in range(len(secret_bits))]
    counted = [(d, t) for d, t in zip(decoded_bits, secret_bits) if d != DISCARD]
    errors = sum(1 for d, t in counted if d != t)
    error_rate = errors / len(counted) if counted else 0.5
    discard_rate = 1 - len(counted) / len(secret_bits) if secret_bits else 0.0
    cycles_per_bit = total_cycles / len(secret_bits) if secret_bits else 0.0
    return AttackResult(
        decoded_bits=decoded_bits,
        true_bits=list(secret_bits),
        error_rate=error_rate,
        discard_rate=discard_rate,
        cycles_per_bit=cycles_per_bit,
        trials_per_bit=trials_per_bit,
    )


# --- vulnerability matrix ----------------------------------------------------

MATRIX_SCHEMES = (
    SchemeId.INVISISPEC_SPECTRE,
    SchemeId.INVISISPEC_FUTURISTIC,
    SchemeId.DOM_NONTSO,
    SchemeId.SAFESPEC_WFB,
    SchemeId.MUONTRAP,
)

# Column groups: the two victim-only orderings share one column.
MATRIX_GROUPS: dict[str, tuple[Ordering, ...]] = {
    "vdvd+vivd": (Ordering.VDVD, Ordering.VIVD),
    "vdad": (Ordering.VDAD,),
    "viad": (Ordering.VIAD,),
}


def group_orderings(group: str, scheme: SchemeId) -> tuple[Ordering, ...]:
    """Orderings evaluated for a matrix cell. The victim-victim reordering
    attacks target designs that can have multiple unprotected accesses in
    flight; under unprotect-at-oldest schemes no such pair exists and the
    pair-reordering senders are out of scope by construction."""
    orderings = MATRIX_GROUPS[group]
    if group == "vdvd+vivd":
        from .schemes import ShadowRule, scheme_spec

        shadow = scheme_spec(scheme).shadow
        if shadow in (ShadowRule.OLDEST_LOAD, ShadowRule.FUTURISTIC):
            return (Ordering.VDVD,)
    return orderings

_ALL = set(MATRIX_SCHEMES)

# Reference ground truth for the modeled designs: which schemes each
# gadget/ordering-group defeats; None marks non-constructible cells.
REFERENCE_VULNERABLE: dict[tuple[Gadget, str], set[SchemeId] | None] = {
    (Gadget.NPEU, "vdvd+vivd"): {
        SchemeId.INVISISPEC_SPECTRE,
        SchemeId.DOM_NONTSO,
        SchemeId.SAFESPEC_WFB,
    },
    (Gadget.NPEU, "vdad"): set(_ALL),
    (Gadget.NPEU, "viad"): set(_ALL),
    (Gadget.MSHR, "vdvd+vivd"): {SchemeId.INVISISPEC_SPECTRE, SchemeId.SAFESPEC_WFB},
    (Gadget.MSHR, "vdad"): {
        SchemeId.INVISISPEC_SPECTRE,
        SchemeId.INVISISPEC_FUTURISTIC,
        SchemeId.SAFESPEC_WFB,
        SchemeId.MUONTRAP,
    },
    (Gadget.MSHR, "viad"): {
        SchemeId.INVISISPEC_SPECTRE,
        SchemeId.INVISISPEC_FUTURISTIC,
        SchemeId.SAFESPEC_WFB,
        SchemeId.MUONTRAP,
    },
    (Gadget.RS, "vdvd+vivd"): None,
    (Gadget.RS, "vdad"): None,
    (Gadget.RS, "viad"): {
        SchemeId.INVISISPEC_SPECTRE,
        SchemeId.INVISISPEC_FUTURISTIC,
        SchemeId.DOM_NONTSO,
    },
}

VULNERABLE_THRESHOLD = 0.25  # noiseless error below this marks a working channel


@dataclass
class MatrixCell:
    gadget: Gadget
    group: str
    scheme: SchemeId
    error_rate: float  # best (lowest) across the group's orderings
    vulnerable: bool


@dataclass
class MatrixResult:
    cells: list[MatrixCell]
    not_constructible: list[tuple[Gadget, str]]

    def verdicts(self) -> dict[tuple[Gadget, str], set[SchemeId]]:
        out: dict[tuple[Gadget, str], set[SchemeId]] = {}
        for c in self.cells:
            out.setdefault((c.gadget, c.group), set())
            if c.vulnerable:
                out[(c.gadget, c.group)].add(c.scheme)
        return out

    def matches_reference(self) -> bool:
        got = self.verdicts()
        for key, expected in REFERENCE_VULNERABLE.items():
            if expected is None:
                if key in got:
                    return False
                continue
            if got.get(key) != expected:
                return False
        return True

    def diff_lines(self) -> list[str]:
        out = []
        got = self.verdicts()
        for key, expected in sorted(REFERENCE_VULNERABLE.items(), key=lambda kv: (kv[0][0].value, kv[0][1])):
            gadget, group = key
            if expected is None:
                state = "ok" if key not in got else "MISMATCH"
                out.append(f"{gadget.value:5s} {group:10s} expected=- got=- [{state}]")
                continue
            actual = got.get(key, set())
            state = "ok" if actual == expected else "MISMATCH"
            exp = ",".join(sorted(s.value for s in expected)) or "-"
            act = ",".join(sorted(s.value for s in actual)) or "-"
            out.append(f"{gadget.value:5s} {group:10s} expected={exp} got={act} [{state}]")
        return out

    def table_lines(self) -> list[str]:
        """Aligned text table: rows gadgets, columns ordering groups."""
        groups = list(MATRIX_GROUPS)
        got = self.verdicts()
        header = f"{'gadget':6s} | " + " | ".join(f"{g:^34s}" for g in groups)
        out = [header, "-" * len(header)]
        for gadget in Gadget:
            cells = []
            for group in groups:
                if REFERENCE_VULNERABLE[(gadget, group)] is None:
                    cells.append(f"{'-':^34s}")
                    continue
                vul = got.get((gadget, group), set())
                text = "All" if vul == _ALL else (",".join(sorted(s.value for s in vul)) or "none")
                cells.append(f"{text:^34s}")
            out.append(f"{gadget.value:6s} | " + " | ".join(cells))
        return out

    def csv_lines(self) -> list[str]:
        out = ["gadget,ordering_group,scheme,error_rate,verdict"]
        for c in sorted(self.cells, key=lambda c: (c.gadget.value, c.group, c.scheme.value)):
            verdict = "vulnerable" if c.vulnerable else "blocked"
            out.append(f"{c.gadget.value},{c.group},{c.scheme.value},{c.error_rate:.4f},{verdict}")
        for gadget, group in sorted(self.not_constructible, key=lambda t: (t[0].value, t[1])):
            out.append(f"{gadget.value},{group},,,not_constructible")
        return out


def vulnerability_matrix(
    cfg: MachineConfig,
    seed: int,
    bits: int = 32,
    trials: int = 3,
    schemes: tuple[SchemeId, ...] = MATRIX_SCHEMES,
    calibrations: dict[tuple[Gadget, Ordering, SchemeId], AttackParams] | None = None,
    workers: int = 1,
) -> MatrixResult:
    """Run every constructible (gadget, ordering-group, scheme) attack at
    zero noise and mark cells whose decode error stays under the working
    threshold. Calibrations map each cell to sender parameters; missing
    entries use the builder defaults."""
    rng = random.Random(f"matrix:{seed}")
    secret_bits = [rng.randrange(2) for _ in range(bits)]
    cells: list[MatrixCell] = []
    skipped: list[tuple[Gadget, str]] = []
    for gadget in Gadget:
        for group in MATRIX_GROUPS:
            if REFERENCE_VULNERABLE[(gadget, group)] is None:
                skipped.append((gadget, group))
                continue
            for scheme in schemes:
                best = 1.0
                for ordering in group_orderings(group, scheme):
                    params = (calibrations or {}).get((gadget, ordering, scheme))
                    res = run_attack(
                        gadget,
                        ordering,
                        scheme,
                        secret_bits,
                        trials_per_bit=trials,
                        noise=0.0,
                        seed=seed,
                        cfg=cfg,
                        params=params,
                        workers=workers,
                    )
                    # Undecodable (all-discard) counts as chance level.
                    rate = 0.5 if res.discard_rate >= 0.5 else res.error_rate
                    best = min(best, rate)
                cells.append(MatrixCell(gadget, group, scheme, best, best < VULNERABLE_THRESHOLD))
    return MatrixResult(cells=cells, not_constructible=skipped)


# --- error-rate / throughput sweep -------------------------------------------

@dataclass
class SweepPoint:
    trials: int
    error_rate: float
    discard_rate: float
    cycles_per_bit: float

    @property
    def bits_per_mcycle(self) -> float:
        return 1e6 / self.cycles_per_bit if self.cycles_per_bit else 0.0


def sweep_error_vs_rate(
    gadget: Gadget,
    ordering: Ordering,
    scheme: SchemeId | str,
    noise: float,
    trial_counts: list[int],
    bits: int,
    seed: int,
    cfg: MachineConfig | None = None,
    params: AttackParams | None = None,
    workers: int = 1,
) -> list[SweepPoint]:
    """Error rate vs cost for increasing trials-per-bit at a fixed flip
    probability; the raw material for the channel quality curve."""
    cfg = cfg or MachineConfig()
    rng = random.Random(f"sweep:{seed}")
    secret_bits = [rng.randrange(2) for _ in range(bits)]
    points = []
    for trials in trial_counts:
        res = run_attack(
            gadget,
            ordering,
            scheme,
            secret_bits,
            trials_per_bit=trials,
            noise=noise,
            seed=seed,
            cfg=cfg,
            params=params,
            workers=workers,
        )
        points.append(SweepPoint(trials, res.error_rate, res.discard_rate, res.cycles_per_bit))
    return points


def sweep_csv(points: list[SweepPoint]) -> str:
    rows = ["trials,error_rate,discard_rate,cycles_per_bit,bits_per_mcycle"]
    for p in points:
        rows.append(
            f"{p.trials},{p.error_rate:.4f},{p.discard_rate:.4f},{p.cycles_per_bit:.1f},{p.bits_per_mcycle:.3f}"
        )
    return "\n".join(rows) + "\n"
