"""Mergeable value types: the join-semilattice algebra the row store is built on.

Every type here is a state-based CRDT. merge() is commutative, associative and
idempotent, and operations return new states instead of mutating the receiver.
Callers are responsible for issuing fresh stamps and version counters; the
types themselves only enforce the lattice rules.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import InsufficientRights, KindMismatch

Scalar = int | str | bool

# Version vectors are stored as sorted tuples of (replica, count) so that
# register entries stay hashable. Zero counts are dropped.
Version = tuple[tuple[str, int], ...]


def render_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "null"
    if isinstance(value, tuple):
        return "(" + ",".join(render_scalar(v) for v in value) + ")"
    return str(value)


def make_version(counts: Mapping[str, int]) -> Version:
    return tuple(sorted((r, int(c)) for r, c in counts.items() if c))


def version_counts(version: Version) -> dict[str, int]:
    return dict(version)


def version_leq(a: Version, b: Version) -> bool:
    bc = dict(b)
    return all(c <= bc.get(r, 0) for r, c in a)


def version_dominates(a: Version, b: Version) -> bool:
    """True when a strictly dominates b."""
    return a != b and version_leq(b, a)


@dataclass(frozen=True, order=True)
class EventStamp:
    """Logical timestamp ordered lexicographically by (counter, replica)."""

    counter: int
    replica: str

    def canon(self) -> str:
        return f"{self.counter}.{self.replica}"


@dataclass(frozen=True)
class LwwRegister:
    """Register keeping the single value with the greatest stamp."""

    value: object = None
    stamp: EventStamp = EventStamp(0, "")

    @classmethod
    def bottom(cls) -> "LwwRegister":
        return cls()

    def assign(self, value, stamp: EventStamp) -> "LwwRegister":
        # The caller guarantees the stamp is fresh (greater than any it issued).
        return LwwRegister(value, stamp)

    def merge(self, other: "LwwRegister") -> "LwwRegister":
        if other.stamp > self.stamp:
            return other
        if other.stamp < self.stamp:
            return self
        # Equal stamps only happen for identical writes; break ties on the
        # rendered value anyway so merge stays total and commutative.
        return self if render_scalar(self.value) >= render_scalar(other.value) else other

    def canon(self) -> str:
        return f"lww({render_scalar(self.value)}@{self.stamp.canon()})"


@dataclass(frozen=True)
class MvRegister:
    """Multi-value register: an antichain of (value, version) entries.

    Concurrent assignments all survive a merge; causally dominated entries
    are discarded.
    """

    entries: frozenset[tuple[object, Version]] = frozenset()

    @classmethod
    def bottom(cls) -> "MvRegister":
        return cls()

    def values(self) -> list:
        return sorted((e[0] for e in self.entries), key=render_scalar)

    def max_versions(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for _, ver in self.entries:
            for r, c in ver:
                if c > out.get(r, 0):
                    out[r] = c
        return out

    def assign(
        self,
        value,
        observed: Mapping[str, int],
        writer: str,
        counter: int | None = None,
    ) -> "MvRegister":
        """Write value with a version that dominates everything in observed.

        counter, when given, must be a never-reused per-writer sequence
        number; otherwise the writer component is bumped past observed.
        """
        counts = dict(observed)
        counts[writer] = counter if counter is not None else counts.get(writer, 0) + 1
        version = make_version(counts)
        kept = {e for e in self.entries if not version_leq(e[1], version)}
        kept.add((value, version))
        return MvRegister(frozenset(kept))

    def merge(self, other: "MvRegister") -> "MvRegister":
        pool = self.entries | other.entries
        kept = {
            e
            for e in pool
            if not any(version_dominates(f[1], e[1]) for f in pool)
        }
        return MvRegister(frozenset(kept))

    def canon(self) -> str:
        parts = sorted(
            f"{render_scalar(v)}@" + ",".join(f"{r}.{c}" for r, c in ver)
            for v, ver in self.entries
        )
        return "mv{" + "|".join(parts) + "}"


FLAG_INSERTED = "I"
FLAG_DELETED = "D"
FLAG_TOUCHED = "T"
_FLAGS = (FLAG_INSERTED, FLAG_DELETED, FLAG_TOUCHED)


@dataclass(frozen=True)
class VisibilityRegister:
    """Multi-value register over the row liveness flags I, D and T."""

    reg: MvRegister = field(default_factory=MvRegister)

    @classmethod
    def bottom(cls) -> "VisibilityRegister":
        return cls()

    def flags(self) -> frozenset[str]:
        return frozenset(self.reg.values())

    def max_versions(self) -> dict[str, int]:
        return self.reg.max_versions()

    def assign(
        self,
        flag: str,
        observed: Mapping[str, int],
        writer: str,
        counter: int | None = None,
    ) -> "VisibilityRegister":
        if flag not in _FLAGS:
            raise ValueError(f"unknown visibility flag {flag!r}")
        return VisibilityRegister(self.reg.assign(flag, observed, writer, counter))

    def merge(self, other: "VisibilityRegister") -> "VisibilityRegister":
        return VisibilityRegister(self.reg.merge(other.reg))

    def canon(self) -> str:
        return "vis" + self.reg.canon()[2:]


@dataclass
class AdditiveCounter:
    """Counter merging concurrent deltas by summing per-replica contributions.

    Each replica owns its own entry in incs and decs; both maps are monotone,
    so merge is a pointwise maximum and no delta is ever lost or doubled.
    """

    incs: dict[str, int] = field(default_factory=dict)
    decs: dict[str, int] = field(default_factory=dict)

    @classmethod
    def bottom(cls) -> "AdditiveCounter":
        return cls()

    def value(self) -> int:
        return sum(self.incs.values()) - sum(self.decs.values())

    def add(self, replica: str, delta: int) -> "AdditiveCounter":
        incs = dict(self.incs)
        decs = dict(self.decs)
        if delta > 0:
            incs[replica] = incs.get(replica, 0) + delta
        elif delta < 0:
            decs[replica] = decs.get(replica, 0) - delta
        return AdditiveCounter(incs, decs)

    def slice_for(self, replica: str) -> "AdditiveCounter":
        """Partial state carrying only the components this replica writes."""
        incs = {replica: self.incs[replica]} if replica in self.incs else {}
        decs = {replica: self.decs[replica]} if replica in self.decs else {}
        return AdditiveCounter(incs, decs)

    def merge(self, other: "AdditiveCounter") -> "AdditiveCounter":
        return AdditiveCounter(
            _max_map(self.incs, other.incs),
            _max_map(self.decs, other.decs),
        )

    def canon(self) -> str:
        return (
            "add(+{"
            + _canon_map(self.incs)
            + "}-{"
            + _canon_map(self.decs)
            + "})"
        )


@dataclass(frozen=True)
class Bound:
    """One-sided numeric bound: value stays >= limit (lower) or <= limit (upper)."""

    direction: str  # "lower" or "upper"
    limit: int

    def admits(self, value: int) -> bool:
        if self.direction == "lower":
            return value >= self.limit
        return value <= self.limit

    def canon(self) -> str:
        op = ">=" if self.direction == "lower" else "<="
        return f"{op}{self.limit}"


@dataclass
class BoundedCounter:
    """Escrow counter that can never cross its bound, without coordination.

    Head-room against the bound is split into per-replica rights. Consuming
    (moving toward the bound) spends local rights; moving away creates new
    ones. Rights can be shipped between replicas. Every map entry is written
    by exactly one replica and only grows, so merge is a pointwise maximum.
    """

    bound: Bound
    grants: dict[str, int] = field(default_factory=dict)
    transfers: dict[tuple[str, str], int] = field(default_factory=dict)
    used: dict[str, int] = field(default_factory=dict)

    @classmethod
    def bottom(cls, bound: Bound) -> "BoundedCounter":
        return cls(bound)

    @classmethod
    def create(
        cls,
        bound: Bound,
        initial: int,
        replicas: Sequence[str],
        creator: str,
    ) -> "BoundedCounter":
        """Allocate the initial head-room evenly, remainder to the creator."""
        if bound.direction == "lower":
            headroom = initial - bound.limit
        else:
            headroom = bound.limit - initial
        if headroom < 0:
            raise ValueError(f"initial value {initial} violates bound {bound.canon()}")
        ids = sorted(set(replicas) | {creator})
        share = headroom // len(ids)
        grants = {r: share for r in ids}
        grants[creator] += headroom - share * len(ids)
        return cls(bound, {r: g for r, g in grants.items() if g}, {}, {})

    def rights(self, replica: str) -> int:
        out = self.grants.get(replica, 0)
        for (src, dst), amount in self.transfers.items():
            if dst == replica:
                out += amount
            if src == replica:
                out -= amount
        return out

    def consumed(self, replica: str) -> int:
        return self.used.get(replica, 0)

    def free(self, replica: str) -> int:
        return self.rights(replica) - self.consumed(replica)

    def total_rights(self) -> int:
        return sum(self.grants.values())

    def value(self) -> int:
        net = sum(self.grants.values()) - sum(self.used.values())
        if self.bound.direction == "lower":
            return self.bound.limit + net
        return self.bound.limit - net

    def consume(self, replica: str, amount: int) -> "BoundedCounter":
        """Spend rights at replica, moving the value toward the bound."""
        if amount <= 0:
            raise ValueError("consume amount must be positive")
        if amount > self.free(replica):
            raise InsufficientRights(
                f"{replica} holds {self.free(replica)} free rights, needs {amount}"
            )
        used = dict(self.used)
        used[replica] = used.get(replica, 0) + amount
        return BoundedCounter(self.bound, dict(self.grants), dict(self.transfers), used)

    def replenish(self, replica: str, amount: int) -> "BoundedCounter":
        """Move the value away from the bound, creating fresh rights here."""
        if amount <= 0:
            raise ValueError("replenish amount must be positive")
        grants = dict(self.grants)
        grants[replica] = grants.get(replica, 0) + amount
        return BoundedCounter(self.bound, grants, dict(self.transfers), dict(self.used))

    def transfer(self, src: str, dst: str, amount: int) -> "BoundedCounter":
        """Ship free rights from src to dst. Total rights are conserved."""
        if amount <= 0:
            raise ValueError("transfer amount must be positive")
        if src == dst:
            raise ValueError("transfer needs two distinct replicas")
        if amount > self.free(src):
            raise InsufficientRights(
                f"{src} holds {self.free(src)} free rights, cannot ship {amount}"
            )
        transfers = dict(self.transfers)
        transfers[(src, dst)] = transfers.get((src, dst), 0) + amount
        return BoundedCounter(self.bound, dict(self.grants), transfers, dict(self.used))

    def consumption_units(self, delta: int) -> int:
        """Rights needed to apply a signed delta under this bound."""
        if self.bound.direction == "lower":
            return max(0, -delta)
        return max(0, delta)

    def apply_delta(self, replica: str, delta: int) -> "BoundedCounter":
        if delta == 0:
            return self
        units = self.consumption_units(delta)
        if units:
            return self.consume(replica, units)
        return self.replenish(replica, abs(delta))

    def slice_for(self, replica: str) -> "BoundedCounter":
        """Partial state carrying only components this replica writes."""
        grants = {replica: self.grants[replica]} if replica in self.grants else {}
        used = {replica: self.used[replica]} if replica in self.used else {}
        transfers = {k: v for k, v in self.transfers.items() if k[0] == replica}
        return BoundedCounter(self.bound, grants, transfers, used)

    def merge(self, other: "BoundedCounter") -> "BoundedCounter":
        if self.bound != other.bound:
            raise KindMismatch(
                f"cannot merge counters bounded by {self.bound.canon()} and {other.bound.canon()}"
            )
        return BoundedCounter(
            self.bound,
            _max_map(self.grants, other.grants),
            _max_map(self.transfers, other.transfers),
            _max_map(self.used, other.used),
        )

    def canon(self) -> str:
        t = ",".join(
            f"{s}>{d}:{v}" for (s, d), v in sorted(self.transfers.items()) if v
        )
        return (
            f"bc[{self.bound.canon()}]"
            + "(g{" + _canon_map(self.grants) + "}"
            + "t{" + t + "}"
            + "u{" + _canon_map(self.used) + "})"
        )


MergeValue = LwwRegister | MvRegister | AdditiveCounter | BoundedCounter | VisibilityRegister


def merge(a: MergeValue, b: MergeValue) -> MergeValue:
    """Merge two states of the same kind; KindMismatch otherwise."""
    if type(a) is not type(b):
        raise KindMismatch(f"cannot merge {type(a).__name__} with {type(b).__name__}")
    return a.merge(b)


def canon(value: MergeValue) -> str:
    return value.canon()


def _max_map(a: Mapping, b: Mapping) -> dict:
    out = dict(a)
    for k, v in b.items():
        if v > out.get(k, v - 1):
            out[k] = v
    return out


def _canon_map(m: Mapping) -> str:
    return ",".join(f"{k}:{v}" for k, v in sorted(m.items()) if v)
