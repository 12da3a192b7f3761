"""Machine configuration: widths, queue sizes, execution-unit table,
bus and MSHR capacities, cache geometry and latencies."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .memhier import CacheGeometry


@dataclass(frozen=True)
class EuClass:
    pipelined: bool
    latency: int
    count: int


def default_eu_table() -> dict[str, EuClass]:
    return {
        "alu": EuClass(pipelined=True, latency=1, count=4),
        "npeu": EuClass(pipelined=False, latency=16, count=1),
        "lsu": EuClass(pipelined=True, latency=1, count=2),
    }


@dataclass(frozen=True)
class MachineConfig:
    fetch_width: int = 4
    dispatch_width: int = 4
    issue_width: int = 4
    retire_width: int = 4
    rob_size: int = 192
    rs_size: int = 40
    eu: dict[str, EuClass] = field(default_factory=default_eu_table)
    cdb_width: int = 4
    l1d_mshrs: int = 4
    branch_resolve_extra: int = 1
    writeback_delay: int = 1
    geometry: CacheGeometry = field(default_factory=CacheGeometry)
    # Sensitivity knobs (see docs): behavior of a non-pipelined unit whose
    # op is squashed mid-execution, and the advanced-defense NPEU policy.
    npeu_squash_frees: bool = True
    noninterference_npeu_policy: str = "lookahead"

    def validate(self) -> None:
        for name in (
            "fetch_width",
            "dispatch_width",
            "issue_width",
            "retire_width",
            "rob_size",
            "rs_size",
            "cdb_width",
            "l1d_mshrs",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        nonpipe = [n for n, e in self.eu.items() if not e.pipelined]
        if len(nonpipe) != 1:
            raise ValueError("exactly one EU class must be non-pipelined")
        npeu = self.eu[nonpipe[0]]
        if npeu.latency < 2:
            raise ValueError("the non-pipelined EU class needs latency >= 2")
        for name, e in self.eu.items():
            if e.latency < 1 or e.count < 1:
                raise ValueError(f"eu class {name} has invalid latency/count")

    @property
    def npeu_class(self) -> str:
        for name, e in self.eu.items():
            if not e.pipelined:
                return name
        raise ValueError("no non-pipelined EU class configured")

    def max_latency(self) -> int:
        return max(max(e.latency for e in self.eu.values()), self.geometry.lat_mem)

    def with_overrides(self, **kw) -> MachineConfig:
        cfg = replace(self, **kw)
        cfg.validate()
        return cfg
