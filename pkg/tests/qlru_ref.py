"""Independent reference model of QLRU_H11_M1_R0_U0 for cross-checking.

Deliberately naive: the set is a list of [tag, age] pairs indexed by way,
and each policy rule is applied as its own literal step. This file must
stay independent of specsim.memhier; tests diff the two implementations.
"""

from __future__ import annotations

EMPTY = None


def new_set(ways):
    return [[EMPTY, 0] for _ in range(ways)]


def ref_hit(ways, line):
    for w in ways:
        if w[0] == line:
            if w[1] == 3:
                w[1] = 1
            elif w[1] == 2:
                w[1] = 1
            elif w[1] == 1:
                w[1] = 0
            elif w[1] == 0:
                w[1] = 0
            return
    raise AssertionError("ref_hit on absent line")


def ref_age_until_candidate(ways):
    # U0: increment every age, one step at a time, until some age is 3.
    steps = 0
    while not any(w[1] == 3 for w in ways):
        for w in ways:
            w[1] += 1
        steps += 1
        assert steps <= 3, "aging ran away"
    return steps


def ref_insert(ways, line):
    for w in ways:
        if w[0] == line:
            raise AssertionError("ref_insert of resident line")
    for w in ways:  # R0: leftmost free way first
        if w[0] is EMPTY:
            w[0] = line
            w[1] = 1  # M1
            return None
    ref_age_until_candidate(ways)
    for w in ways:  # R0: leftmost age-3 way
        if w[1] == 3:
            evicted = w[0]
            w[0] = line
            w[1] = 1  # M1
            return evicted
    raise AssertionError("no eviction candidate")


def ref_access(ways, line):
    """Hit if present, else insert. Returns the evicted line or None."""
    if any(w[0] == line for w in ways):
        ref_hit(ways, line)
        return None
    return ref_insert(ways, line)


def ref_state(ways):
    return tuple((w[0], w[1]) for w in ways)


def replay(ways_count, accesses):
    ways = new_set(ways_count)
    for line in accesses:
        ref_access(ways, line)
    return ways
