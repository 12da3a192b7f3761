"""Cycle-level out-of-order core.

In-order fetch/dispatch into ROB + reservation stations, age-ordered issue
to pipelined and non-pipelined units, a width-limited common data bus with
oldest-first arbitration, scripted branch prediction with squash/refetch,
in-order retirement, and the per-scheme load/fetch protection discipline.

Per-cycle phase order (fixed; ties inside a phase go by op id):
  1. MSHR fills return
  2. CDB arbitration: finished ops complete, capped at cdb_width
  3. branch resolution and squash
  4. safe transitions: deferred replacement updates, delayed-load
     re-issues, visible replays of invisibly-serviced loads
  5. attacker-core scripted accesses
  6. issue select + D-cache accesses
  7. frontend: due I-fetch replays, then fetch/dispatch + I-accesses
  8. retirement, occupancy snapshot
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .machine import MachineConfig
from .memhier import CacheImage, Level, MemHier, Requester
from .microprog import AttackScript, MicroOp, MicroProgram, OpKind
from .schemes import (
    FenceModel,
    HitPolicy,
    MissPolicy,
    SchemeId,
    SchemeSpec,
    ShadowRule,
    ShadowState,
    insert_fences,
    scheme_spec,
)


class SimulationDeadlock(RuntimeError):
    pass


_KIND_CLASS = {
    OpKind.LOAD: "lsu",
    OpKind.STORE_ADDR: "lsu",
    OpKind.ALU: "alu",
    OpKind.NPEU: "npeu",
    OpKind.BRANCH: "alu",
}

NEVER = -1


class OpRec:
    """Runtime record of one op: lifecycle timestamps plus load state."""

    __slots__ = (
        "op",
        "fetch",
        "dispatch",
        "issue",
        "complete",
        "retire",
        "squash",
        "safe",
        "resolved",
        "in_rs",
        "finish",
        "line",
        "delayed",
        "pending_replay",
        "deferred_l1_update",
        "ifetch_pending",
        "npeu_unit",
    )

    def __init__(self, op: MicroOp):
        self.op = op
        self.fetch = NEVER
        self.dispatch = NEVER
        self.issue = NEVER
        self.complete = NEVER
        self.retire = NEVER
        self.squash = NEVER
        self.safe = NEVER
        self.resolved = NEVER
        self.in_rs = False
        self.finish = NEVER  # scheduled execution end, awaiting CDB
        self.line: int | None = None
        self.delayed = False  # protected miss parked until safe
        self.pending_replay = False  # invisibly serviced, visible replay owed
        self.deferred_l1_update: int | None = None
        self.ifetch_pending = False  # protected speculative fetch, replay owed
        self.npeu_unit: int | None = None

    def reset_for_refetch(self) -> None:
        self.fetch = NEVER
        self.dispatch = NEVER
        self.issue = NEVER
        self.complete = NEVER
        self.retire = NEVER
        self.squash = NEVER
        self.safe = NEVER
        self.resolved = NEVER
        self.in_rs = False
        self.finish = NEVER
        self.line = None
        self.delayed = False
        self.pending_replay = False
        self.deferred_l1_update = None
        self.ifetch_pending = False
        self.npeu_unit = None

    def active(self) -> bool:
        return self.dispatch != NEVER and self.retire == NEVER and self.squash == NEVER


@dataclass
class TraceEvent:
    cycle: int
    name: str
    op: int | None
    extra: dict = field(default_factory=dict)

    def line_text(self) -> str:
        parts = [f"cycle={self.cycle}", f"event={self.name}"]
        if self.op is not None:
            parts.append(f"op={self.op}")
        for k in sorted(self.extra):
            parts.append(f"{k}={self.extra[k]}")
        return " ".join(parts)


@dataclass
class ExecutionTrace:
    """Everything observable about one run: the event log, per-op
    timestamps, per-cycle occupancy, the visible-access pattern, and the
    total cycle count (last retirement or squash)."""

    events: list[TraceEvent]
    op_times: dict[int, dict[str, int]]
    occupancy: list[tuple[int, int, int, int]]  # cycle, rs, mshr, eu_busy
    pattern: list  # AccessRecord list from the hierarchy
    total_cycles: int
    # Final LLC contents (non-empty sets only), for receiver probes and
    # golden set-state dumps: set index -> ((tag|None, age), ...) per way.
    llc_state: dict[int, tuple[tuple[int | None, int], ...]] = field(default_factory=dict)

    def pattern_keys(self) -> list[tuple[int, str, str]]:
        return [r.key() for r in self.pattern]

    def serialize(self) -> str:
        return "\n".join(e.line_text() for e in self.events) + "\n"

    def occupancy_csv(self) -> str:
        rows = ["cycle,rs_fill,mshr_fill,eu_busy"]
        rows += [f"{c},{r},{m},{e}" for c, r, m, e in self.occupancy]
        return "\n".join(rows) + "\n"

    def times(self, op_id: int, key: str) -> int:
        return self.op_times[op_id][key]


def run(
    program: MicroProgram,
    cfg: MachineConfig,
    scheme: SchemeId | str,
    secrets: dict[str, int] | None = None,
    image: CacheImage | None = None,
    attacker: AttackScript | list[tuple[int, int]] | None = None,
    force_correct_predictions: bool = False,
    max_cycles: int | None = None,
) -> ExecutionTrace:
    """Simulate one program to completion. Pure function of its inputs:
    identical arguments produce an identical trace, bit for bit."""
    cfg.validate()
    program.validate()
    spec = scheme_spec(scheme)
    if spec.fence_model is not None:
        program = insert_fences(program, spec.fence_model)
    engine = _Engine(program, cfg, spec, secrets, image, attacker, force_correct_predictions)
    return engine.run(max_cycles)


class _Engine:
    def __init__(
        self,
        program: MicroProgram,
        cfg: MachineConfig,
        spec: SchemeSpec,
        secrets: dict[str, int] | None,
        image: CacheImage | None,
        attacker: AttackScript | list[tuple[int, int]] | None,
        force_correct: bool,
    ):
        self.program = program
        self.cfg = cfg
        self.spec = spec
        self.secrets = program.secrets_with(secrets)
        self.hier = MemHier(cfg.geometry, cfg.l1d_mshrs, image)
        self.force_correct = force_correct
        self.recs = [OpRec(op) for op in program.ops]
        self.rob: list[int] = []
        self.fetch_pos = 0
        self.redirect_at = 0  # earliest cycle the frontend may fetch
        self.cycle = 0
        self.events: list[TraceEvent] = []
        self.occupancy: list[tuple[int, int, int, int]] = []
        self.shadow = ShadowState()
        self.fetch_shadow = ShadowState()
        self.last_progress = 0
        self.npeu_busy_until: dict[str, list[int]] = {
            name: [0] * e.count for name, e in cfg.eu.items() if not e.pipelined
        }
        self.inflight = 0  # issued, not completed (occupancy reporting)
        self.ifetch_replays: list[tuple[int, int]] = []  # (cycle, op_id)
        if attacker is None:
            self.attacker: list[tuple[int, int]] = []
        elif isinstance(attacker, AttackScript):
            self.attacker = [(attacker.offset_cycle, attacker.line)]
        else:
            self.attacker = sorted(attacker)
        self.attacker_pos = 0
        self.rs_count = 0
        self.last_drain_cycle = 0
        # (join position, branch id): fetch holds at the join while the
        # predicted-taken branch whose region ends there is unresolved.
        self.fetch_holds: list[tuple[int, int]] = []

    # -- bookkeeping ---------------------------------------------------

    def _event(self, name: str, op: int | None, **extra) -> None:
        self.events.append(TraceEvent(self.cycle, name, op, extra))
        self.last_progress = self.cycle

    def _lat_class(self, op: MicroOp) -> str | None:
        if op.kind is OpKind.NOP:
            return None
        klass = op.lat_class or _KIND_CLASS[op.kind]
        if klass not in self.cfg.eu:
            raise ValueError(f"op {op.id}: unknown EU class {klass!r}")
        return klass

    def _refresh_shadows(self) -> None:
        ub = il = ist = None
        for i in self.rob:
            r = self.recs[i]
            k = r.op.kind
            if ub is None and k is OpKind.BRANCH and r.resolved == NEVER:
                ub = i
            if il is None and k is OpKind.LOAD and r.complete == NEVER:
                il = i
            if ist is None and k is OpKind.STORE_ADDR and r.complete == NEVER:
                ist = i
            if ub is not None and il is not None and ist is not None:
                break
        for st in (self.shadow, self.fetch_shadow):
            st.oldest_unresolved_branch = ub
            st.oldest_incomplete_load = il
            st.oldest_incomplete_store = ist

    def _fence_frontier(self) -> int | None:
        """Oldest op whose trailing fence is still down."""
        for i in self.rob:
            r = self.recs[i]
            if not r.op.fence_after:
                continue
            if r.op.kind is OpKind.BRANCH:
                if r.resolved == NEVER:
                    return i
            elif r.complete == NEVER:
                return i
        return None

    def _is_safe(self, op_id: int) -> bool:
        return self.recs[op_id].safe != NEVER

    # -- phases ----------------------------------------------------------

    def run(self, max_cycles: int | None) -> ExecutionTrace:
        n = len(self.program.ops)
        deadlock_after = self.cfg.rob_size * self.cfg.max_latency()
        while True:
            if (
                self.fetch_pos >= n
                and not self.rob
                and not self.ifetch_replays
                and self.attacker_pos >= len(self.attacker)
            ):
                break
            if max_cycles is not None and self.cycle >= max_cycles:
                raise SimulationDeadlock(f"exceeded max_cycles={max_cycles}")
            if self.fetch_pos >= n and not self.rob:
                # Only scheduled external events left: jump to the next one.
                pending = [c for c, _ in self.ifetch_replays]
                if self.attacker_pos < len(self.attacker):
                    pending.append(self.attacker[self.attacker_pos][0])
                nxt = min(pending)
                if nxt > self.cycle:
                    self.cycle = nxt
                    self.last_progress = nxt
            if self.cycle - self.last_progress > deadlock_after:
                raise SimulationDeadlock(self._deadlock_diagnostic())
            self._phase_mshr_returns()
            self._phase_cdb()
            self._phase_resolve_and_squash()
            self._refresh_shadows()
            self._phase_safe_transitions()
            self._phase_attacker()
            self._phase_issue()
            self._phase_frontend()
            self._phase_retire()
            self._snapshot()
            self.cycle += 1
        return self._finish()

    def _deadlock_diagnostic(self) -> str:
        stuck = [
            f"op{i}:{self.recs[i].op.kind.value}"
            f"(issue={self.recs[i].issue},complete={self.recs[i].complete})"
            for i in self.rob[:8]
        ]
        return f"no progress since cycle {self.last_progress}; rob head: {', '.join(stuck)}"

    def _phase_mshr_returns(self) -> None:
        for m in self.hier.mshrs.release_due(self.cycle):
            self._event("mshr_free", None, line=m.line)

    def _phase_cdb(self) -> None:
        ready = [
            i
            for i in self.rob
            if self.recs[i].finish != NEVER
            and self.recs[i].finish <= self.cycle
            and self.recs[i].complete == NEVER
        ]
        ready.sort()
        for i in ready[: self.cfg.cdb_width]:
            r = self.recs[i]
            r.complete = self.cycle
            self.inflight -= 1
            self._event("complete", i)

    def _phase_resolve_and_squash(self) -> None:
        squash_branch: int | None = None
        for i in self.rob:
            r = self.recs[i]
            op = r.op
            if op.kind is not OpKind.BRANCH or r.resolved != NEVER or r.complete == NEVER:
                continue
            b = op.branch
            if b.resolver is not None:
                res = self.recs[b.resolver]
                if res.complete == NEVER or self.cycle < res.complete + self.cfg.branch_resolve_extra:
                    continue
            r.resolved = self.cycle
            self._event("resolve", i, mispredicted=int(b.mispredicted() and not self.force_correct))
            if b.mispredicted() and not self.force_correct and squash_branch is None:
                squash_branch = i
        if squash_branch is not None:
            self.squash(squash_branch)

    def squash(self, branch_id: int) -> None:
        """Kill everything younger than the branch and redirect fetch."""
        b = self.recs[branch_id].op.branch
        for i in list(self.rob):
            if i <= branch_id:
                continue
            r = self.recs[i]
            if r.in_rs:
                r.in_rs = False
                self.rs_count -= 1
            if r.finish != NEVER and r.complete == NEVER:
                self.inflight -= 1
            if r.npeu_unit is not None and self.cfg.npeu_squash_frees:
                klass = self._lat_class(r.op)
                self.npeu_busy_until[klass][r.npeu_unit] = self.cycle
            self.hier.mshrs.drop_waiter(i)
            r.squash = self.cycle
            r.delayed = False
            r.pending_replay = False
            r.deferred_l1_update = None
            r.ifetch_pending = False
            self._event("squash", i)
        self.rob = [i for i in self.rob if i <= branch_id]
        self.ifetch_replays = [(c, i) for c, i in self.ifetch_replays if i <= branch_id]
        self.fetch_holds = [(j, b) for j, b in self.fetch_holds if b <= branch_id]
        # Correct-path ops fetched down the wrong direction get refetched.
        resume = branch_id + 1 if b.actual_taken else b.join
        for i in range(resume, len(self.recs)):
            if self.recs[i].squash != NEVER:
                self.recs[i].reset_for_refetch()
        self.fetch_pos = resume
        self.redirect_at = self.cycle + 1
        self.last_drain_cycle = self.cycle

    def _phase_safe_transitions(self) -> None:
        transitioned: list[int] = []
        for i in self.rob:
            r = self.recs[i]
            if r.safe == NEVER and self.shadow.safe(self.spec.shadow, i):
                r.safe = self.cycle
                self._event("safe", i)
                if r.deferred_l1_update is not None:
                    self.hier.l1_hit_update(r.deferred_l1_update)
                    r.deferred_l1_update = None
                if r.pending_replay and r.line is not None:
                    self._visible_access(r.line, i)
                    r.pending_replay = False
                if r.delayed:
                    r.delayed = False  # parked miss: re-executes this cycle
                    self._event("reissue", i)
                if r.in_rs and self.spec.rs_hold and r.issue != NEVER:
                    r.in_rs = False
                    self.rs_count -= 1
            # Fetch-side transition for deferred I-accesses.
            if r.ifetch_pending and self.fetch_shadow.safe(self.spec.fetch_shadow, i):
                r.ifetch_pending = False
                transitioned.append(i)
        # Deferred I-accesses replay on a refetch-shaped schedule: starting
        # the cycle after the op left its fetch shadow, fetch-width per
        # cycle. They fire in the frontend phase so a replay and an actual
        # post-squash refetch of the same program point land identically.
        for idx, op_id in enumerate(sorted(transitioned)):
            when = self.cycle + 1 + idx // self.cfg.fetch_width
            self.ifetch_replays.append((when, op_id))

    def _phase_attacker(self) -> None:
        while self.attacker_pos < len(self.attacker) and self.attacker[self.attacker_pos][0] <= self.cycle:
            _, line = self.attacker[self.attacker_pos]
            self.attacker_pos += 1
            res = self.hier.llc_access(line, Requester.ATTACKER, visible=True, cycle=self.cycle)
            self._event("l2access", None, line=line, requester="attacker", result=res)

    # -- issue -----------------------------------------------------------

    def _ready(self, r: OpRec) -> bool:
        for d in r.op.src_deps:
            dep = self.recs[d]
            if dep.complete == NEVER or self.cycle < dep.complete + self.cfg.writeback_delay:
                return False
        return True

    def _earliest_ready_lb(self, op_id: int) -> int:
        """Lower bound on when an un-issued op could demand a unit; used by
        the advanced-defense look-ahead. Unknown-latency inputs (parked or
        un-issued loads) bound at next cycle."""
        r = self.recs[op_id]
        worst = self.cycle
        for d in r.op.src_deps:
            dep = self.recs[d]
            if dep.complete != NEVER:
                t = dep.complete + self.cfg.writeback_delay
            elif dep.finish != NEVER:
                t = dep.finish + self.cfg.writeback_delay
            elif dep.op.kind is OpKind.LOAD:
                t = self.cycle + 1
            else:
                klass = self._lat_class(dep.op)
                lat = self.cfg.eu[klass].latency if klass else 1
                t = self._earliest_ready_lb(d) + lat + self.cfg.writeback_delay
            worst = max(worst, t)
        return worst

    def _lookahead_blocks(self, op_id: int, klass: str) -> bool:
        """Would issuing this op now risk stalling an older op of the same
        non-pipelined class before the unit frees again?"""
        release = self.cycle + self.cfg.eu[klass].latency
        for i in self.rob:
            if i >= op_id:
                break
            r = self.recs[i]
            if r.issue != NEVER or r.op.kind is OpKind.NOP:
                continue
            if self._lat_class(r.op) != klass:
                continue
            if self._earliest_ready_lb(i) < release:
                return True
        return False

    def _phase_issue(self) -> None:
        fence_frontier = self._fence_frontier()
        candidates = [
            i
            for i in self.rob
            if self.recs[i].in_rs
            and self.recs[i].issue == NEVER
            and not self.recs[i].delayed
            and self._ready(self.recs[i])
        ]
        candidates.sort()
        issued = 0
        pipelined_used: dict[str, int] = {}
        for i in candidates:
            if issued >= self.cfg.issue_width:
                break
            if fence_frontier is not None and i > fence_frontier:
                continue
            r = self.recs[i]
            op = r.op
            klass = self._lat_class(op)
            eu = self.cfg.eu[klass]
            unit = None
            if eu.pipelined:
                if pipelined_used.get(klass, 0) >= eu.count:
                    continue
            else:
                if self.spec.npeu_lookahead and self._lookahead_blocks(i, klass):
                    continue
                busy = self.npeu_busy_until[klass]
                unit = next((u for u, until in enumerate(busy) if until <= self.cycle), None)
                if unit is None:
                    continue
            if op.kind is OpKind.LOAD:
                outcome = self._issue_load(i)
                issued += 1  # attempts consume the slot whether or not they land
                if eu.pipelined:
                    pipelined_used[klass] = pipelined_used.get(klass, 0) + 1
                if outcome != "ok":
                    continue
            else:
                r.finish = self.cycle + eu.latency
                self.inflight += 1
                issued += 1
                if eu.pipelined:
                    pipelined_used[klass] = pipelined_used.get(klass, 0) + 1
                else:
                    self.npeu_busy_until[klass][unit] = self.cycle + eu.latency
                    r.npeu_unit = unit
            r.issue = self.cycle
            if r.in_rs and not (self.spec.rs_hold and not self._is_safe(i)):
                r.in_rs = False
                self.rs_count -= 1
            self._event("issue", i)

    def _issue_load(self, op_id: int) -> str:
        """Access the D-side for a load at its issue point. Returns "ok",
        "stall" (no MSHR, retry next cycle) or "delayed" (protected miss
        parked until safe)."""
        r = self.recs[op_id]
        line = r.op.resolve_line(self.secrets)
        r.line = line
        safe = self._is_safe(op_id)
        level = self.hier.service_level(line)
        if level is Level.L1HIT:
            if safe or self.spec.hit_policy is HitPolicy.VISIBLE:
                self.hier.l1_hit_update(line)
            else:
                r.deferred_l1_update = line
            r.finish = self.cycle + self.hier.latency(level)
            self.inflight += 1
            return "ok"
        if not safe and self.spec.miss_policy is MissPolicy.DELAY:
            if not r.delayed:
                r.delayed = True
                self._event("delayed", op_id, line=line)
            return "delayed"
        lat = self.hier.latency(level)
        mshr = self.hier.mshrs.allocate(line, op_id, self.cycle, free_at=self.cycle + lat)
        if mshr is None:
            self._event("mshr_stall", op_id, line=line)
            return "stall"
        invisible = not safe and self.spec.miss_policy is MissPolicy.INVISIBLE
        if invisible:
            self.hier.llc_access(line, Requester.VICTIM, visible=False, cycle=self.cycle, op_id=op_id)
            r.pending_replay = True
        else:
            r.delayed = False
            self._visible_access(line, op_id)
        r.finish = self.cycle + lat
        self.inflight += 1
        return "ok"

    def _visible_access(self, line: int, op_id: int) -> None:
        """Perform the persistent (visible) side of a D-access now: LLC
        replacement update + pattern entry on an L1 miss, or the L1
        promotion when the line already sits in the L1."""
        if self.hier.service_level(line) is Level.L1HIT:
            self.hier.l1_hit_update(line)
            return
        res = self.hier.llc_access(line, Requester.VICTIM, visible=True, cycle=self.cycle, op_id=op_id)
        self.hier.l1_fill(line)
        self._event("l2access", op_id, line=line, requester="victim", result=res)

    def _ifetch_access(self, op_id: int) -> None:
        line = self.recs[op_id].op.iline
        assert line is not None
        if self.hier.service_level(line, icache=True) is Level.L1HIT:
            self.hier.l1_hit_update(line, icache=True)
            self._event("ifetch", op_id, line=line, level="l1i")
            return
        res = self.hier.llc_access(line, Requester.VICTIM, visible=True, cycle=self.cycle, op_id=op_id)
        self.hier.l1_fill(line, icache=True)
        self._event("l2access", op_id, line=line, requester="victim", result=res, fetch=1)

    # -- frontend ----------------------------------------------------------

    def _fetch_speculative(self, op_id: int) -> bool:
        """Is a fetch of this op covered by an unresolved speculation shadow
        right now (including ops dispatched earlier this same cycle)?"""
        self._refresh_shadows()
        return not self.fetch_shadow.safe(self.spec.fetch_shadow, op_id)

    def _phase_frontend(self) -> None:
        if self.ifetch_replays:
            due = sorted([e for e in self.ifetch_replays if e[0] <= self.cycle], key=lambda e: e[1])
            self.ifetch_replays = [e for e in self.ifetch_replays if e[0] > self.cycle]
            for _, op_id in due:
                self._ifetch_access(op_id)
        if self.cycle < self.redirect_at:
            return
        n = len(self.program.ops)
        width = min(self.cfg.fetch_width, self.cfg.dispatch_width)
        fetched = 0
        while fetched < width and self.fetch_pos < n:
            self.fetch_holds = [(j, b) for j, b in self.fetch_holds if self.recs[b].resolved == NEVER]
            if any(j == self.fetch_pos for j, _ in self.fetch_holds):
                break  # taken region ended; nothing to fetch until resolution
            op = self.program.ops[self.fetch_pos]
            needs_rs = op.kind is not OpKind.NOP
            if len(self.rob) >= self.cfg.rob_size:
                break
            # Dispatch is head-of-line: a full RS stalls fetch wholesale,
            # even for ops (markers) that will not occupy an RS slot.
            if self.rs_count >= self.cfg.rs_size:
                break
            r = self.recs[op.id]
            r.fetch = self.cycle
            r.dispatch = self.cycle
            self.rob.append(op.id)
            if needs_rs:
                r.in_rs = True
                self.rs_count += 1
            else:
                r.finish = NEVER
                r.complete = self.cycle  # markers complete at dispatch
            self._event("fetch", op.id)
            self._event("dispatch", op.id)
            if op.iline is not None:
                if self._fetch_speculative(op.id):
                    if self.spec.icache_protected:
                        r.ifetch_pending = True
                    else:
                        self._ifetch_access(op.id)
                else:
                    self._ifetch_access(op.id)
            if op.kind is OpKind.BRANCH:
                taken = op.branch.actual_taken if self.force_correct else op.branch.predicted_taken
                self.fetch_pos = op.id + 1 if taken else op.branch.join
                if taken and op.branch.taken_stream_ends:
                    self.fetch_holds.append((op.branch.join, op.id))
            else:
                self.fetch_pos += 1
            fetched += 1

    def _phase_retire(self) -> None:
        retired = 0
        while self.rob and retired < self.cfg.retire_width:
            i = self.rob[0]
            r = self.recs[i]
            if r.complete == NEVER:
                break
            if r.op.kind is OpKind.BRANCH and r.resolved == NEVER:
                break
            if r.delayed or r.pending_replay or r.ifetch_pending:
                break
            self.rob.pop(0)
            if r.in_rs:
                r.in_rs = False
                self.rs_count -= 1
            r.retire = self.cycle
            self.last_drain_cycle = self.cycle
            self._event("retire", i)
            retired += 1

    def _snapshot(self) -> None:
        eu_busy = self.inflight
        self.occupancy.append((self.cycle, self.rs_count, self.hier.mshrs.occupancy(), eu_busy))
        assert self.rs_count <= self.cfg.rs_size
        assert self.hier.mshrs.occupancy() <= self.cfg.l1d_mshrs

    def _finish(self) -> ExecutionTrace:
        op_times: dict[int, dict[str, int]] = {}
        for r in self.recs:
            op_times[r.op.id] = {
                "fetch": r.fetch,
                "dispatch": r.dispatch,
                "issue": r.issue,
                "complete": r.complete,
                "retire": r.retire,
                "squash": r.squash,
                "safe": r.safe,
                "resolved": r.resolved,
            }
        llc_state: dict[int, tuple[tuple[int | None, int], ...]] = {}
        for idx, cset in enumerate(self.hier.llc.sets):
            if any(t is not None for t in cset.tags):
                llc_state[idx] = cset.state()
        return ExecutionTrace(
            events=self.events,
            op_times=op_times,
            occupancy=self.occupancy,
            pattern=self.hier.pattern,
            total_cycles=self.last_drain_cycle if self.events else 0,
            llc_state=llc_state,
        )
