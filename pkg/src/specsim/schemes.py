"""Invisible-speculation and defense policies.

Each scheme is a bundle of flags the pipeline consults: the shadow rule
deciding when a load is still protected, what to do with a protected load's
L1 hit or miss, whether speculative instruction fetches stay invisible,
fence gating, and the advanced-defense scheduling/deallocation rules.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

from .microprog import MicroOp, MicroProgram, OpKind


class SchemeId(Enum):
    UNSAFE = "unsafe"
    DOM_SPECTRE = "dom-spectre"
    DOM_NONTSO = "dom-nontso"
    INVISISPEC_SPECTRE = "invisispec-spectre"
    INVISISPEC_FUTURISTIC = "invisispec-futuristic"
    SAFESPEC_WFB = "safespec-wfb"
    MUONTRAP = "muontrap"
    FENCE_SPECTRE = "fence-spectre"
    FENCE_FUTURISTIC = "fence-futuristic"
    NOINTERFERENCE = "nointerference"


class ShadowRule(Enum):
    """When a load counts as safe (non-speculative)."""

    ALWAYS_SAFE = "always"
    # Safe iff no older unresolved branch.
    BRANCH = "branch"
    # Safe iff older branches resolved and older store addresses resolved.
    # Older loads cast no shadow: weaker consistency models permit
    # load-load reordering, which is exactly what the reordering attacks
    # on this scheme class rely on.
    NONTSO = "nontso"
    # Safe iff no older unresolved branch and no older un-completed load
    # (unprotect only at "oldest load in the ROB").
    OLDEST_LOAD = "oldest-load"
    # Safe iff every older squash-capable op resolved: branches resolved
    # and loads completed.
    FUTURISTIC = "futuristic"


class MissPolicy(Enum):
    VISIBLE = "visible"  # no protection: normal fill
    DELAY = "delay"  # park the load, re-execute when safe
    INVISIBLE = "invisible"  # service invisibly now, visible replay when safe


class HitPolicy(Enum):
    VISIBLE = "visible"
    DEFER_UPDATE = "defer"  # forward data, buffer the replacement update


class FenceModel(Enum):
    SPECTRE = "spectre"  # fences after branches
    FUTURISTIC = "futuristic"  # fences after anything that can squash


class Classification(Enum):
    SAFE = "safe"
    PROTECTED = "protected"


@dataclass(frozen=True)
class SchemeSpec:
    id: SchemeId
    shadow: ShadowRule
    miss_policy: MissPolicy
    hit_policy: HitPolicy
    icache_protected: bool
    # Shadow rule used for fetch-side speculation (I-access visibility and
    # fence issue gating); BRANCH unless the scheme reasons about all
    # squash sources.
    fetch_shadow: ShadowRule = ShadowRule.BRANCH
    fence_model: FenceModel | None = None
    rs_hold: bool = False  # hold RS entries until safe/squash
    npeu_lookahead: bool = False  # look-ahead stall on the non-pipelined EU


_SPECS: dict[SchemeId, SchemeSpec] = {
    SchemeId.UNSAFE: SchemeSpec(
        SchemeId.UNSAFE, ShadowRule.ALWAYS_SAFE, MissPolicy.VISIBLE, HitPolicy.VISIBLE, icache_protected=False
    ),
    SchemeId.DOM_SPECTRE: SchemeSpec(
        SchemeId.DOM_SPECTRE, ShadowRule.BRANCH, MissPolicy.DELAY, HitPolicy.DEFER_UPDATE, icache_protected=False
    ),
    SchemeId.DOM_NONTSO: SchemeSpec(
        SchemeId.DOM_NONTSO, ShadowRule.NONTSO, MissPolicy.DELAY, HitPolicy.DEFER_UPDATE, icache_protected=False
    ),
    SchemeId.INVISISPEC_SPECTRE: SchemeSpec(
        SchemeId.INVISISPEC_SPECTRE,
        ShadowRule.BRANCH,
        MissPolicy.INVISIBLE,
        HitPolicy.DEFER_UPDATE,
        icache_protected=False,
    ),
    SchemeId.INVISISPEC_FUTURISTIC: SchemeSpec(
        SchemeId.INVISISPEC_FUTURISTIC,
        ShadowRule.OLDEST_LOAD,
        MissPolicy.INVISIBLE,
        HitPolicy.DEFER_UPDATE,
        icache_protected=False,
    ),
    SchemeId.SAFESPEC_WFB: SchemeSpec(
        SchemeId.SAFESPEC_WFB,
        ShadowRule.BRANCH,
        MissPolicy.INVISIBLE,
        HitPolicy.DEFER_UPDATE,
        icache_protected=True,
    ),
    SchemeId.MUONTRAP: SchemeSpec(
        SchemeId.MUONTRAP,
        ShadowRule.OLDEST_LOAD,
        MissPolicy.INVISIBLE,
        HitPolicy.DEFER_UPDATE,
        icache_protected=True,
    ),
    SchemeId.FENCE_SPECTRE: SchemeSpec(
        SchemeId.FENCE_SPECTRE,
        ShadowRule.BRANCH,
        MissPolicy.VISIBLE,
        HitPolicy.VISIBLE,
        icache_protected=True,
        fence_model=FenceModel.SPECTRE,
    ),
    SchemeId.FENCE_FUTURISTIC: SchemeSpec(
        SchemeId.FENCE_FUTURISTIC,
        ShadowRule.FUTURISTIC,
        MissPolicy.VISIBLE,
        HitPolicy.VISIBLE,
        icache_protected=True,
        fetch_shadow=ShadowRule.FUTURISTIC,
        fence_model=FenceModel.FUTURISTIC,
    ),
    SchemeId.NOINTERFERENCE: SchemeSpec(
        SchemeId.NOINTERFERENCE,
        ShadowRule.FUTURISTIC,
        MissPolicy.DELAY,
        HitPolicy.DEFER_UPDATE,
        icache_protected=True,
        fetch_shadow=ShadowRule.FUTURISTIC,
        rs_hold=True,
        npeu_lookahead=True,
    ),
}


def scheme_spec(scheme: SchemeId | str) -> SchemeSpec:
    if isinstance(scheme, str):
        scheme = SchemeId(scheme)
    return _SPECS[scheme]


def all_scheme_ids() -> list[SchemeId]:
    return list(_SPECS)


class ShadowState:
    """O(1)-per-query shadow predicates over a per-cycle summary.

    The pipeline refreshes the three frontiers once per cycle: the oldest
    unresolved branch, the oldest un-completed load, and the oldest
    un-completed store-address op. Safety of op i under each rule is then
    a comparison against those ids.
    """

    __slots__ = ("oldest_unresolved_branch", "oldest_incomplete_load", "oldest_incomplete_store")

    def __init__(self):
        self.oldest_unresolved_branch: int | None = None
        self.oldest_incomplete_load: int | None = None
        self.oldest_incomplete_store: int | None = None

    @staticmethod
    def _older(frontier: int | None, op_id: int) -> bool:
        return frontier is not None and frontier < op_id

    def safe(self, rule: ShadowRule, op_id: int) -> bool:
        if rule is ShadowRule.ALWAYS_SAFE:
            return True
        if self._older(self.oldest_unresolved_branch, op_id):
            return False
        if rule is ShadowRule.BRANCH:
            return True
        if rule is ShadowRule.NONTSO:
            return not self._older(self.oldest_incomplete_store, op_id)
        if rule is ShadowRule.OLDEST_LOAD:
            return not self._older(self.oldest_incomplete_load, op_id)
        if rule is ShadowRule.FUTURISTIC:
            return not self._older(self.oldest_incomplete_load, op_id) and not self._older(
                self.oldest_incomplete_store, op_id
            )
        raise AssertionError(rule)


def classify_load(shadow: ShadowState, op_id: int, spec: SchemeSpec) -> Classification:
    """Safe means the load's cache access may be performed visibly."""
    return Classification.SAFE if shadow.safe(spec.shadow, op_id) else Classification.PROTECTED


def insert_fences(program: MicroProgram, model: FenceModel) -> MicroProgram:
    """Mark fence points: after every branch (Spectre model) or after every
    squash-capable op, branches and loads here (Futuristic model). A fence
    lets younger ops enter the ROB but blocks their issue until the op
    before the fence is non-speculative. Idempotent."""
    fenced_kinds = {OpKind.BRANCH} if model is FenceModel.SPECTRE else {OpKind.BRANCH, OpKind.LOAD}
    new_ops: list[MicroOp] = []
    for op in program.ops:
        if op.kind in fenced_kinds and not op.fence_after:
            op = replace(op, fence_after=True)
        new_ops.append(op)
    out = MicroProgram(
        ops=new_ops,
        secret_slots=dict(program.secret_slots),
        annotations=dict(program.annotations),
    )
    out.validate()
    return out
