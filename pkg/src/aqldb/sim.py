"""Deterministic multi-replica simulation.

A Cluster wires several replicas to one lock coordinator and a set of
reliable but arbitrarily delayed channels. Everything is driven from a
single thread, so runs are reproducible: scripted scenarios, exhaustive
delivery-order enumeration, and a seeded fuzzer all build on the same
event runner.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field

from . import schema as sch
from .crdt import AdditiveCounter, BoundedCounter, render_scalar
from .engine import (
    Replica,
    Store,
    ViewContext,
    constraint_violations,
    dump_all,
    dump_table,
    integrity_violations,
    is_visible,
    render_dump,
)
from .errors import AqlError, ScenarioError
from .txn import CausalClock, CommitRecord, LockManager, TxStatus

OBSERVER = "observer"


class Cluster:
    """Replicas, channels and partitions under one deterministic roof."""

    def __init__(self, catalog: sch.Catalog, replica_ids):
        self.catalog = catalog
        self.replica_ids = sorted(replica_ids)
        self.locks = LockManager(self.replica_ids, hooks=self)
        self.replicas = {
            rid: Replica(rid, catalog, self.replica_ids, self.locks, hooks=self)
            for rid in self.replica_ids
        }
        # Per-destination queues; messages survive partitions, delivery waits.
        self.queues: dict[str, list[CommitRecord]] = {rid: [] for rid in self.replica_ids}
        self.groups: dict[str, int] = {rid: 0 for rid in self.replica_ids}
        self.log: list[CommitRecord] = []
        self.deliveries = 0

    # ---- hooks the engine and lock manager call back into

    def reachable(self, a: str, b: str) -> bool:
        return a == b or self.groups[a] == self.groups[b]

    def catch_up(self, rid: str, sources) -> bool:
        """Deliver to rid until it has seen everything sources committed."""
        target = CausalClock()
        for s in sources:
            if s == rid:
                continue
            if not self.reachable(rid, s):
                return False
            target.merge(self.replicas[s].clock)
        self.pump(rid)
        return self.replicas[rid].clock.dominates(target)

    def request_rights(self, rid: str, table: str, pk, column: str, needed: int) -> bool:
        """Pull bounded-counter rights toward rid from reachable donors."""
        remaining = needed
        donors = sorted(
            (d for d in self.replica_ids if d != rid and self.reachable(rid, d)),
            key=lambda d: (-self.replicas[d].donatable(table, pk, column), d),
        )
        for donor in donors:
            if remaining <= 0:
                break
            available = self.replicas[donor].donatable(table, pk, column)
            if available <= 0:
                continue
            amount = min(available, remaining)
            record = self.replicas[donor].transfer_rights(table, pk, column, rid, amount)
            self._broadcast(record)
            remaining -= amount
        self.pump(rid)
        return remaining <= 0

    # ---- cluster operations

    def replica(self, rid: str) -> Replica:
        if rid not in self.replicas:
            raise ScenarioError(f"unknown replica {rid}")
        return self.replicas[rid]

    def commit(self, tx) -> CommitRecord:
        record = self.replica(tx.origin).commit(tx)
        self._broadcast(record)
        return record

    def _broadcast(self, record: CommitRecord) -> None:
        self.log.append(record)
        for dst in self.replica_ids:
            if dst != record.origin:
                self.queues[dst].append(record)

    def pump(self, rid: str) -> int:
        """Deliver every queued record rid can causally accept right now."""
        rep = self.replica(rid)
        delivered = 0
        progressed = True
        while progressed:
            progressed = False
            keep = []
            for record in self.queues[rid]:
                if rep.delivered(record):
                    progressed = True
                    continue
                if self.reachable(rid, record.origin) and rep.ready(record):
                    rep.deliver(record)
                    delivered += 1
                    progressed = True
                else:
                    keep.append(record)
            self.queues[rid] = keep
        self.deliveries += delivered
        return delivered

    def deliver_all(self) -> int:
        return sum(self.pump(rid) for rid in self.replica_ids)

    def partition(self, groups: list[list[str]]) -> None:
        mapping: dict[str, int] = {}
        for index, group in enumerate(groups):
            for rid in group:
                if rid not in self.replicas:
                    raise ScenarioError(f"unknown replica {rid} in partition")
                if rid in mapping:
                    raise ScenarioError(f"replica {rid} listed in two partition groups")
                mapping[rid] = index
        extra = len(groups)
        for rid in self.replica_ids:
            if rid not in mapping:
                mapping[rid] = extra
                extra += 1
        self.groups = mapping

    def heal(self) -> None:
        self.groups = {rid: 0 for rid in self.replica_ids}

    def quiesce(self) -> None:
        self.heal()
        self.deliver_all()

    def dumps(self, rid: str) -> dict[str, list[str]]:
        return dump_all(self.replica(rid).store, self.catalog)

    def converged(self) -> bool:
        canons = {store_canon(rep.store) for rep in self.replicas.values()}
        return len(canons) == 1


def store_canon(store: Store) -> str:
    """Canonical text of a whole store, independent of insertion order."""
    lines = []
    for table in sorted(store.tables):
        for pk in sorted(store.tables[table], key=render_scalar):
            row = store.tables[table][pk]
            parts = [f"{table}/{render_scalar(pk)}"]
            for col in sorted(row.cells):
                parts.append(f"{col}={row.cells[col].canon()}")
            parts.append(f"vis={row.visibility.canon()}")
            parts.append(f"gen={row.generation}")
            for col in sorted(row.fk_shadows):
                parts.append(f"ref.{col}={row.fk_shadows[col].canon()}")
            lines.append(" ".join(parts))
    return "\n".join(lines)


# --------------------------------------------------------------------------
# events and the shared runner

VALID_FLAGS = {"I", "D", "T"}


@dataclass
class Event:
    kind: str
    args: dict
    line: int = 0

    def render(self) -> str:
        a = self.args
        if self.kind == "begin":
            return f"begin {a['txid']} @{a['rid']}"
        if self.kind == "stmt":
            expect = f" expect {a['expect']}" if a.get("expect") else ""
            return f"stmt {a['txid']}{expect}: {a['sql']}"
        if self.kind in ("commit", "abort"):
            expect = f" expect {a['expect']}" if a.get("expect") else ""
            return f"{self.kind} {a['txid']}{expect}"
        if self.kind == "deliver":
            return "deliver_all" if a.get("rid") is None else f"deliver @{a['rid']}"
        if self.kind == "partition":
            return "partition " + " | ".join(" ".join(g) for g in a["groups"])
        if self.kind == "heal":
            return "heal"
        if self.kind == "txblock":
            expect = f" expect {a['expect']}" if a.get("expect") else ""
            head = f"tx {a['txid']} @{a['rid']}{expect} {{"
            return "\n".join([head] + [f"  {s}" for s in a["stmts"]] + ["}"])
        if self.kind == "assert_table":
            head = f"assert table @{a['rid']} {a['table']} {{"
            return "\n".join([head] + [f"  {line}" for line in a["lines"]] + ["}"])
        if self.kind == "assert_visible":
            word = "visible" if a["expected"] else "invisible"
            return f"assert {word} @{a['rid']} {a['table']} {sch._literal_ddl(a['pk'])}"
        if self.kind == "assert_flags":
            flags = ",".join(sorted(a["flags"]))
            return f"assert flags @{a['rid']} {a['table']} {sch._literal_ddl(a['pk'])} {{{flags}}}"
        if self.kind == "assert_outcome":
            return f"assert outcome {a['txid']} {a['outcome']}"
        if self.kind == "assert_converged":
            return "assert converged"
        raise ScenarioError(f"cannot render event kind {self.kind}")


@dataclass
class Scenario:
    name: str
    replicas: list[str]
    schema_text: str
    events: list[Event]

    def catalog(self) -> sch.Catalog:
        return sch.parse_schema_text(self.schema_text)


@dataclass
class Report:
    name: str
    steps: list[dict] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)
    commits: int = 0
    aborts: int = 0
    deliveries: int = 0

    @property
    def ok(self) -> bool:
        return not self.failures

    def step(self, line: int, action: str, ok: bool, detail: str = "") -> None:
        self.steps.append({"line": line, "action": action, "ok": ok, "detail": detail})
        if not ok:
            where = f"line {line}: " if line else ""
            self.failures.append(f"{where}{action}: {detail}" if detail else f"{where}{action}")

    def render(self) -> str:
        lines = [f"{self.name}: {'PASS' if self.ok else 'FAIL'}"]
        for s in self.steps:
            mark = "ok  " if s["ok"] else "FAIL"
            text = f"  {mark} line {s['line']:>3}  {s['action']}"
            if s["detail"] and not s["ok"]:
                text += f"  [{s['detail']}]"
            lines.append(text)
        lines.append(
            f"  commits={self.commits} aborts={self.aborts} deliveries={self.deliveries}"
        )
        return "\n".join(lines)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "ok": self.ok,
            "steps": self.steps,
            "failures": self.failures,
            "commits": self.commits,
            "aborts": self.aborts,
            "deliveries": self.deliveries,
        }


class Runner:
    """Applies events to a cluster and audits invariants after each one."""

    def __init__(
        self,
        catalog: sch.Catalog,
        replica_ids,
        name: str = "run",
        check_invariants: bool = True,
        lenient: bool = False,
    ):
        self.cluster = Cluster(catalog, replica_ids)
        self.catalog = catalog
        self.txs: dict[str, object] = {}
        self.outcomes: dict[str, str] = {}
        self.report = Report(name)
        self.check_invariants = check_invariants
        self.lenient = lenient
        # committed delta per additive cell: (table, pk, column) -> int
        self.ledger: dict[tuple, int] = {}

    # ---- event dispatch

    def apply(self, event: Event) -> None:
        handler = getattr(self, f"_ev_{event.kind}", None)
        if handler is None:
            raise ScenarioError(f"line {event.line}: unknown event kind {event.kind}")
        handler(event)
        if self.check_invariants:
            self._audit(event)

    def run(self, events) -> Report:
        for event in events:
            self.apply(event)
        self.report.deliveries = self.cluster.deliveries
        return self.report

    def _tx(self, event: Event):
        txid = event.args["txid"]
        tx = self.txs.get(txid)
        if tx is None and not self.lenient:
            raise ScenarioError(f"line {event.line}: unknown transaction {txid}")
        return tx

    def _ev_begin(self, event: Event) -> None:
        rid, txid = event.args["rid"], event.args["txid"]
        if txid in self.txs:
            if self.lenient:
                return
            raise ScenarioError(f"line {event.line}: transaction {txid} already exists")
        self.txs[txid] = self.cluster.replica(rid).begin(txid)
        self.outcomes[txid] = "active"
        self.report.step(event.line, f"begin {txid} @{rid}", True)

    def _ev_stmt(self, event: Event) -> None:
        tx = self._tx(event)
        if tx is None or tx.status is not TxStatus.ACTIVE:
            if self.lenient:
                return
            raise ScenarioError(f"line {event.line}: transaction not active")
        sql = event.args["sql"]
        expect = event.args.get("expect")
        ok, detail, raised = self._outcome(
            expect, lambda: self.cluster.replica(tx.origin).execute(tx, sql)
        )
        if raised is not None:
            self.outcomes[tx.txid] = raised
            self.report.aborts += 1
        self.report.step(event.line, f"stmt {tx.txid}: {sql}", ok or self.lenient, detail)

    def _ev_commit(self, event: Event) -> None:
        tx = self._tx(event)
        if tx is None or tx.status is not TxStatus.ACTIVE:
            if self.lenient:
                return
            raise ScenarioError(f"line {event.line}: transaction not active")
        expect = event.args.get("expect")
        ok, detail, raised = self._outcome(expect, lambda: self._commit(tx))
        if raised is not None:
            self.outcomes[tx.txid] = raised
            self.report.aborts += 1
        self.report.step(event.line, f"commit {tx.txid}", ok or self.lenient, detail)

    def _ev_abort(self, event: Event) -> None:
        tx = self._tx(event)
        if tx is None:
            return
        if tx.status is TxStatus.ACTIVE:
            self.cluster.replica(tx.origin).abort(tx)
            self.outcomes[tx.txid] = "aborted"
            self.report.aborts += 1
        self.report.step(event.line, f"abort {tx.txid}", True)

    def _commit(self, tx) -> None:
        self.cluster.commit(tx)
        self.outcomes[tx.txid] = "committed"
        self.report.commits += 1
        self._record_ledger(tx)

    def _ev_txblock(self, event: Event) -> None:
        rid = event.args["rid"]
        txid = event.args["txid"]
        expect = event.args.get("expect")
        stmts = event.args["stmts"]
        rep = self.cluster.replica(rid)
        tx = rep.begin(txid)
        self.txs[txid] = tx
        raised = None
        for sql in stmts:
            try:
                rep.execute(tx, sql)
            except AqlError as err:
                raised = err
                break
        if raised is None:
            try:
                self._commit(tx)
            except AqlError as err:
                raised = err
        if raised is not None:
            self.outcomes[txid] = raised.kind
            self.report.aborts += 1
        if expect is None:
            ok = raised is None
            detail = f"unexpected {raised.kind}: {raised}" if raised else ""
        elif raised is None:
            ok, detail = False, f"expected {expect}, transaction committed"
        else:
            ok = raised.kind == expect
            detail = "" if ok else f"expected {expect}, got {raised.kind}: {raised}"
        self.report.step(event.line, f"tx {txid} @{rid}", ok, detail)

    def _ev_deliver(self, event: Event) -> None:
        rid = event.args.get("rid")
        n = self.cluster.deliver_all() if rid is None else self.cluster.pump(rid)
        self.report.step(event.line, "deliver_all" if rid is None else f"deliver @{rid}", True, f"{n} records")

    def _ev_partition(self, event: Event) -> None:
        self.cluster.partition(event.args["groups"])
        self.report.step(event.line, event.render(), True)

    def _ev_heal(self, event: Event) -> None:
        self.cluster.heal()
        self.report.step(event.line, "heal", True)

    def _ev_assert_table(self, event: Event) -> None:
        rid, table = event.args["rid"], event.args["table"]
        want = list(event.args["lines"])
        got = dump_table(self.cluster.replica(rid).store, self.catalog, table)
        ok = got == want
        detail = "" if ok else f"want {want!r}, got {got!r}"
        self.report.step(event.line, f"assert table @{rid} {table}", ok, detail)

    def _ev_assert_visible(self, event: Event) -> None:
        rid, table, pk = event.args["rid"], event.args["table"], event.args["pk"]
        expected = event.args["expected"]
        ctx = ViewContext(self.cluster.replica(rid).store, self.catalog)
        verdict = is_visible(ctx, table, pk)
        ok = verdict.visible == expected
        detail = "" if ok else (
            f"want visible={expected}, got {verdict.visible} ({verdict.cause.value})"
        )
        word = "visible" if expected else "invisible"
        self.report.step(
            event.line, f"assert {word} @{rid} {table} {render_scalar(pk)}", ok, detail
        )

    def _ev_assert_flags(self, event: Event) -> None:
        rid, table, pk = event.args["rid"], event.args["table"], event.args["pk"]
        want = set(event.args["flags"])
        row = self.cluster.replica(rid).store.row(table, pk)
        got = set(row.visibility.flags()) if row is not None else set()
        ok = got == want
        detail = "" if ok else f"want {sorted(want)}, got {sorted(got)}"
        self.report.step(
            event.line, f"assert flags @{rid} {table} {render_scalar(pk)}", ok, detail
        )

    def _ev_assert_outcome(self, event: Event) -> None:
        txid, want = event.args["txid"], event.args["outcome"]
        got = self.outcomes.get(txid, "unknown transaction")
        ok = got == want
        detail = "" if ok else f"want {want}, got {got}"
        self.report.step(event.line, f"assert outcome {txid}", ok, detail)

    def _ev_assert_converged(self, event: Event) -> None:
        ok = self.cluster.converged()
        detail = ""
        if not ok:
            dumps = {rid: self.cluster.dumps(rid) for rid in self.cluster.replica_ids}
            detail = f"replica states differ: {dumps!r}"
        self.report.step(event.line, "assert converged", ok, detail)

    @staticmethod
    def _outcome(expect: str | None, action) -> tuple[bool, str, str | None]:
        """Run action; compare what it raised against the expected kind."""
        try:
            action()
        except AqlError as err:
            if expect is None:
                return False, f"unexpected {err.kind}: {err}", err.kind
            if err.kind != expect:
                return False, f"expected {expect}, got {err.kind}: {err}", err.kind
            return True, "", err.kind
        if expect is not None:
            return False, f"expected {expect}, nothing raised", None
        return True, "", None

    # ---- invariants

    def _record_ledger(self, tx) -> None:
        for (table, pk), write in tx.buffer.items():
            schema = self.catalog.tables.get(table)
            if schema is None:
                continue
            for col, delta in write.deltas.items():
                if schema.column(col).modifier is sch.Modifier.ADDITIVE:
                    key = (table, pk, col)
                    self.ledger[key] = self.ledger.get(key, 0) + delta

    def _audit(self, event: Event) -> None:
        for problem in self.cluster.locks.safety_violations():
            self.report.step(event.line, "lock safety", False, problem)
        for rid in self.cluster.replica_ids:
            store = self.cluster.replica(rid).store
            for problem in integrity_violations(store, self.catalog):
                self.report.step(event.line, f"integrity at {rid}", False, problem)
            for problem in constraint_violations(store, self.catalog):
                self.report.step(event.line, f"constraints at {rid}", False, problem)

    def finish(self) -> Report:
        """Abort leftovers, heal, deliver everything, check convergence."""
        for tx in list(self.txs.values()):
            if tx.status is TxStatus.ACTIVE:
                self.cluster.replica(tx.origin).abort(tx)
                self.outcomes[tx.txid] = "aborted"
        self.cluster.quiesce()
        self._audit(Event("heal", {}, 0))
        if not self.cluster.converged():
            self.report.step(0, "convergence after quiesce", False, "replica states differ")
        for rid, queue in self.cluster.queues.items():
            undelivered = [r for r in queue if not self.cluster.replica(rid).delivered(r)]
            if undelivered:
                self.report.step(
                    0, "eventual delivery", False,
                    f"{len(undelivered)} records still queued for {rid}",
                )
        self._check_ledger()
        self.report.deliveries = self.cluster.deliveries
        return self.report

    def _check_ledger(self) -> None:
        for (table, pk, col), expected in sorted(self.ledger.items()):
            for rid in self.cluster.replica_ids:
                row = self.cluster.replica(rid).store.row(table, pk)
                cell = row.cells.get(col) if row is not None else None
                if not isinstance(cell, (AdditiveCounter, BoundedCounter)):
                    self.report.step(
                        0, "counter ledger", False,
                        f"{table}/{render_scalar(pk)}.{col} missing at {rid}",
                    )
                    continue
                if cell.value() != expected:
                    self.report.step(
                        0, "counter ledger", False,
                        f"{table}/{render_scalar(pk)}.{col} at {rid}: "
                        f"value {cell.value()}, committed deltas sum to {expected}",
                    )
                if isinstance(cell, BoundedCounter):
                    spread = sum(cell.rights(r) for r in self.cluster.replica_ids)
                    if spread != cell.total_rights():
                        self.report.step(
                            0, "rights conservation", False,
                            f"{table}/{render_scalar(pk)}.{col} at {rid}: "
                            f"rights spread {spread} != total {cell.total_rights()}",
                        )


# --------------------------------------------------------------------------
# scenario scripts

def parse_scenario(text: str, name: str = "scenario") -> Scenario:
    lines = text.splitlines()
    replicas: list[str] | None = None
    schema_text: str | None = None
    events: list[Event] = []
    i = 0

    def fail(line_no: int, message: str):
        raise ScenarioError(f"{name} line {line_no}: {message}")

    def block(start: int, what: str, comments: bool = True) -> tuple[list[str], int]:
        """Collect raw lines until a lone closing brace.

        comments=False keeps lines verbatim; expected-dump rows may
        legitimately contain a # character.
        """
        body = []
        j = start
        while j < len(lines):
            candidate = _strip_comment(lines[j]) if comments else lines[j]
            if candidate.strip() == "}":
                return body, j + 1
            body.append(candidate)
            j += 1
        fail(start, f"unterminated {what} block")

    def replica_ref(line_no: int, word: str) -> str:
        if not word.startswith("@"):
            fail(line_no, f"expected @replica, got {word!r}")
        return word[1:]

    def scalar(line_no: int, text: str):
        try:
            return sch.parse_literal(text)
        except AqlError as err:
            fail(line_no, f"bad key literal {text!r}: {err}")

    while i < len(lines):
        line_no = i + 1
        stripped = _strip_comment(lines[i]).strip()
        if not stripped:
            i += 1
            continue
        words = stripped.split()
        head = words[0].lower()

        if head == "replicas":
            if len(words) < 2:
                fail(line_no, "replicas needs at least one id")
            replicas = words[1:]
            i += 1
        elif head == "schema":
            if not stripped.endswith("{"):
                fail(line_no, "schema must open a { block")
            body, i = block(i + 1, "schema")
            schema_text = "\n".join(body)
        elif head == "tx":
            # tx <txid> @<replica> [expect <ErrorKind>] { ... }
            # The body may be inline on one line or span until a lone }.
            if "{" not in stripped:
                fail(line_no, "tx must open a { block")
            header_text, _, tail = stripped.partition("{")
            header = header_text.split()[1:]
            if len(header) < 2:
                fail(line_no, "usage: tx <txid> @<replica> [expect <ErrorKind>] {")
            txid, rid = header[0], replica_ref(line_no, header[1])
            expect = None
            rest = header[2:]
            if rest:
                if len(rest) != 2 or rest[0].lower() != "expect":
                    fail(line_no, "tx header takes only: expect <ErrorKind>")
                expect = rest[1]
            if tail.strip().endswith("}"):
                body = [tail.strip()[:-1]]
                i += 1
            elif tail.strip():
                fail(line_no, "tx body must follow { on the same line or start on the next")
            else:
                body, i = block(i + 1, "tx")
            stmts = [piece for chunk in body for piece in _split_statements(chunk)]
            events.append(
                Event("txblock", {"rid": rid, "txid": txid, "expect": expect, "stmts": stmts}, line_no)
            )
        elif head == "begin":
            if len(words) != 3:
                fail(line_no, "usage: begin <txid> @<replica>")
            events.append(
                Event("begin", {"txid": words[1], "rid": replica_ref(line_no, words[2])}, line_no)
            )
            i += 1
        elif head == "stmt":
            # stmt <txid> [expect <ErrorKind>]: <statement>
            before, sep, sql = stripped.partition(":")
            if not sep or not sql.strip():
                fail(line_no, "usage: stmt <txid> [expect <ErrorKind>]: <statement>")
            fields = before.split()
            if len(fields) == 2:
                expect = None
            elif len(fields) == 4 and fields[2].lower() == "expect":
                expect = fields[3]
            else:
                fail(line_no, "usage: stmt <txid> [expect <ErrorKind>]: <statement>")
            events.append(
                Event(
                    "stmt",
                    {"txid": fields[1], "expect": expect, "sql": sql.strip().rstrip(";")},
                    line_no,
                )
            )
            i += 1
        elif head in ("commit", "abort"):
            if len(words) not in (2, 4):
                fail(line_no, f"usage: {head} <txid> [expect <ErrorKind>]")
            expect = None
            if len(words) == 4:
                if words[2].lower() != "expect":
                    fail(line_no, f"usage: {head} <txid> [expect <ErrorKind>]")
                expect = words[3]
            events.append(Event(head, {"txid": words[1], "expect": expect}, line_no))
            i += 1
        elif head == "deliver_all":
            events.append(Event("deliver", {"rid": None}, line_no))
            i += 1
        elif head == "deliver":
            if len(words) != 2:
                fail(line_no, "usage: deliver_all | deliver @<replica>")
            events.append(Event("deliver", {"rid": replica_ref(line_no, words[1])}, line_no))
            i += 1
        elif head == "partition":
            groups = [g.split() for g in stripped[len("partition"):].split("|")]
            groups = [g for g in groups if g]
            if len(groups) < 2:
                fail(line_no, "partition needs at least two groups separated by |")
            events.append(Event("partition", {"groups": groups}, line_no))
            i += 1
        elif head == "heal":
            events.append(Event("heal", {}, line_no))
            i += 1
        elif head == "assert":
            if len(words) < 2:
                fail(line_no, "empty assert")
            what = words[1].lower()
            if what == "converged":
                events.append(Event("assert_converged", {}, line_no))
                i += 1
            elif what == "table":
                if len(words) != 5 or words[4] != "{":
                    fail(line_no, "usage: assert table @<replica> <table> { ... }")
                body, i = block(i + 1, "assert table", comments=False)
                rows = [b.strip() for b in body if b.strip()]
                events.append(
                    Event(
                        "assert_table",
                        {"rid": replica_ref(line_no, words[2]), "table": words[3], "lines": rows},
                        line_no,
                    )
                )
            elif what in ("visible", "invisible"):
                parts = stripped.split(None, 4)
                if len(parts) != 5:
                    fail(line_no, f"usage: assert {what} @<replica> <table> <key>")
                events.append(
                    Event(
                        "assert_visible",
                        {
                            "rid": replica_ref(line_no, parts[2]),
                            "table": parts[3],
                            "pk": scalar(line_no, parts[4]),
                            "expected": what == "visible",
                        },
                        line_no,
                    )
                )
                i += 1
            elif what == "flags":
                parts = stripped.split(None, 4)
                if len(parts) != 5 or "{" not in parts[4]:
                    fail(line_no, "usage: assert flags @<replica> <table> <key> {I,D}")
                key_text, _, flag_text = parts[4].rpartition("{")
                flag_text = flag_text.rstrip().rstrip("}")
                flags = [f.strip() for f in flag_text.split(",") if f.strip()]
                bad = [f for f in flags if f not in VALID_FLAGS]
                if bad:
                    fail(line_no, f"unknown flags {bad}")
                events.append(
                    Event(
                        "assert_flags",
                        {
                            "rid": replica_ref(line_no, parts[2]),
                            "table": parts[3],
                            "pk": scalar(line_no, key_text.strip()),
                            "flags": flags,
                        },
                        line_no,
                    )
                )
                i += 1
            elif what == "outcome":
                if len(words) != 4:
                    fail(line_no, "usage: assert outcome <txid> <committed|aborted|ErrorKind>")
                events.append(
                    Event("assert_outcome", {"txid": words[2], "outcome": words[3]}, line_no)
                )
                i += 1
            else:
                fail(line_no, f"unknown assert form {what!r}")
        else:
            fail(line_no, f"unknown directive {words[0]!r}")

    if replicas is None:
        raise ScenarioError(f"{name}: missing replicas directive")
    if schema_text is None:
        raise ScenarioError(f"{name}: missing schema block")
    scenario = Scenario(name, replicas, schema_text, events)
    _validate_scenario(scenario)
    return scenario


def _validate_scenario(scenario: Scenario) -> None:
    """Statements must parse and events must reference declared replicas."""
    try:
        catalog = scenario.catalog()
    except AqlError as err:
        raise ScenarioError(f"{scenario.name}: bad schema: {err}") from err
    declared = set(scenario.replicas)
    for event in scenario.events:
        rid = event.args.get("rid")
        if rid is not None and rid not in declared:
            raise ScenarioError(
                f"{scenario.name} line {event.line}: undeclared replica {rid}"
            )
        for g in event.args.get("groups", []):
            for member in g:
                if member not in declared:
                    raise ScenarioError(
                        f"{scenario.name} line {event.line}: undeclared replica {member}"
                    )
        sqls = event.args["stmts"] if event.kind == "txblock" else (
            [event.args["sql"]] if event.kind == "stmt" else []
        )
        for sql in sqls:
            try:
                sch.parse_statement(sql, catalog)
            except AqlError as err:
                raise ScenarioError(
                    f"{scenario.name} line {event.line}: bad statement {sql!r}: {err}"
                ) from err


def _strip_comment(line: str) -> str:
    in_string = False
    for idx, ch in enumerate(line):
        if ch == "'":
            in_string = not in_string
        elif ch == "#" and not in_string:
            return line[:idx]
    return line


def _split_statements(chunk: str) -> list[str]:
    """Split on semicolons that sit outside string literals."""
    parts: list[str] = []
    buf: list[str] = []
    in_string = False
    for ch in chunk:
        if ch == "'":
            in_string = not in_string
        if ch == ";" and not in_string:
            parts.append("".join(buf))
            buf = []
        else:
            buf.append(ch)
    parts.append("".join(buf))
    return [p.strip() for p in parts if p.strip()]


def run_scenario(scenario: Scenario, check_invariants: bool = True) -> Report:
    runner = Runner(
        scenario.catalog(),
        scenario.replicas,
        name=scenario.name,
        check_invariants=check_invariants,
    )
    runner.run(scenario.events)
    return runner.report


def load_scenario(path: str) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    name = path.replace("\\", "/").rsplit("/", 1)[-1]
    if name.endswith(".aqlsim"):
        name = name[: -len(".aqlsim")]
    return parse_scenario(text, name)


# --------------------------------------------------------------------------
# delivery-order independence

def causal_orders(records: list[CommitRecord], limit: int | None = None) -> list[list[CommitRecord]]:
    """Every delivery order of the records that respects causality.

    The input must be causally downward closed, which any prefix of a
    cluster log is.
    """
    recs = records[:limit] if limit is not None else list(records)

    def ready(rec: CommitRecord, clock: dict[str, int]) -> bool:
        if clock.get(rec.origin, 0) != rec.seq - 1:
            return False
        return all(
            clock.get(q, 0) >= c for q, c in rec.clock.counts.items() if q != rec.origin
        )

    orders: list[list[int]] = []

    def walk(chosen: list[int], remaining: set[int], clock: dict[str, int]) -> None:
        if not remaining:
            orders.append(list(chosen))
            return
        for idx in sorted(remaining):
            rec = recs[idx]
            if not ready(rec, clock):
                continue
            clock[rec.origin] = rec.seq
            chosen.append(idx)
            walk(chosen, remaining - {idx}, clock)
            chosen.pop()
            clock[rec.origin] = rec.seq - 1

    walk([], set(range(len(recs))), {})
    return [[recs[i] for i in order] for order in orders]


def replay_records(records, catalog: sch.Catalog, replica_ids) -> Replica:
    """Apply commit records, in the given order, to a fresh observer."""
    observer = Replica(OBSERVER, catalog, replica_ids, LockManager(replica_ids))
    for record in records:
        observer.deliver(record)
    return observer


def enumerate_orders(
    records, catalog: sch.Catalog, replica_ids, limit: int | None = 4
) -> tuple[int, set[str]]:
    """Replay every causal order of a log prefix at an observer replica.

    Returns (number of orders, set of distinct canonical dumps); order
    independence holds when the set has exactly one element.
    """
    dumps: set[str] = set()
    orders = causal_orders(records, limit)
    for order in orders:
        observer = replay_records(order, catalog, replica_ids)
        dumps.add(render_dump(dump_all(observer.store, catalog)))
    return len(orders), dumps


# --------------------------------------------------------------------------
# fuzzing

FUZZ_SCHEMA = """
CREATE UPDATE_WINS TABLE Artists (
  Name VARCHAR PRIMARY KEY,
  Active BOOLEAN LWW,
  Plays INT ADDITIVE
);
CREATE UPDATE_WINS TABLE Albums (
  Title VARCHAR PRIMARY KEY,
  Artist VARCHAR LWW FOREIGN KEY UPDATE_WINS REFERENCES Artists (Name),
  Stock INT ADDITIVE CHECK (Stock >= 0),
  Genre VARCHAR MULTI_VALUE
);
CREATE DELETE_WINS TABLE Reviews (
  Id INT PRIMARY KEY,
  Album VARCHAR LWW FOREIGN KEY DELETE_WINS REFERENCES Albums (Title) ON DELETE CASCADE,
  Stars INT LWW CHECK (Stars >= 1 AND Stars <= 5)
);
CREATE TABLE Accounts (
  Owner VARCHAR PRIMARY KEY,
  Balance INT ADDITIVE CHECK (Balance >= 0)
);
"""

_ARTISTS = ("Sam", "Ana", "Lee", "Kim")
_ALBUMS = ("A1", "A2", "A3", "A4")
_GENRES = ("rock", "jazz", "folk")
_ACCOUNTS = ("acct1", "acct2")


@dataclass
class FuzzConfig:
    seed: int = 0
    replicas: int = 3
    events: int = 60
    schema_text: str = FUZZ_SCHEMA
    check_invariants: bool = True
    max_open: int = 4


@dataclass
class FuzzOutcome:
    config: FuzzConfig
    trace: list[Event]
    report: Report
    minimized: list[Event] | None = None

    @property
    def ok(self) -> bool:
        return self.report.ok

    def trace_text(self) -> str:
        events = self.minimized if self.minimized is not None else self.trace
        return "\n".join(e.render() for e in events)


def _gen_statement(rng: random.Random) -> str:
    artist = rng.choice(_ARTISTS)
    album = rng.choice(_ALBUMS)
    genre = rng.choice(_GENRES)
    account = rng.choice(_ACCOUNTS)
    makers = (
        lambda: f"INSERT INTO Artists VALUES ('{artist}', {rng.choice(('TRUE', 'FALSE'))}, {rng.randrange(4)})",
        lambda: f"INSERT INTO Albums VALUES ('{album}', '{artist}', {rng.randrange(5)}, '{genre}')",
        lambda: f"INSERT INTO Reviews VALUES ({rng.randrange(1, 7)}, '{album}', {rng.randrange(1, 6)})",
        lambda: f"INSERT INTO Accounts VALUES ('{account}', {rng.randrange(11)})",
        lambda: f"UPDATE Artists SET Active = {rng.choice(('TRUE', 'FALSE'))} WHERE Name = '{artist}'",
        lambda: f"UPDATE Artists SET Plays = Plays + {rng.randrange(1, 5)} WHERE Name = '{artist}'",
        lambda: f"UPDATE Albums SET Stock = Stock {rng.choice('+-')} {rng.randrange(1, 4)} WHERE Title = '{album}'",
        lambda: f"UPDATE Albums SET Genre = '{genre}' WHERE Title = '{album}'",
        lambda: f"UPDATE Albums SET Artist = '{artist}' WHERE Title = '{album}'",
        lambda: f"UPDATE Reviews SET Stars = {rng.randrange(7)} WHERE Id = {rng.randrange(1, 7)}",
        lambda: f"UPDATE Accounts SET Balance = Balance - {rng.randrange(1, 5)} WHERE Owner = '{account}'",
        lambda: f"UPDATE Accounts SET Balance = Balance + {rng.randrange(1, 5)} WHERE Owner = '{account}'",
        lambda: f"DELETE FROM Artists WHERE Name = '{artist}'",
        lambda: f"DELETE FROM Albums WHERE Title = '{album}'",
        lambda: f"DELETE FROM Reviews WHERE Id = {rng.randrange(1, 7)}",
        lambda: f"SELECT * FROM {rng.choice(('Artists', 'Albums', 'Reviews', 'Accounts'))}",
    )
    return rng.choice(makers)()


def _gen_events(config: FuzzConfig, rng: random.Random, rids: list[str], runner: Runner) -> list[Event]:
    """Generate and apply events one at a time; choices depend on run state."""
    trace: list[Event] = []
    counter = 0
    partitioned = False

    def emit(kind: str, args: dict) -> None:
        nonlocal partitioned
        event = Event(kind, args, len(trace) + 1)
        trace.append(event)
        runner.apply(event)
        if kind == "partition":
            partitioned = True
        elif kind == "heal":
            partitioned = False

    for _ in range(config.events):
        open_txs = [
            txid for txid, tx in runner.txs.items() if tx.status is TxStatus.ACTIVE
        ]
        choices: list[tuple[int, str]] = []
        if len(open_txs) < config.max_open:
            choices.append((20, "begin"))
        if open_txs:
            choices.extend(((45, "stmt"), (20, "commit"), (5, "abort")))
        choices.append((15, "deliver"))
        if partitioned:
            choices.append((12, "heal"))
        elif len(rids) > 1:
            choices.append((6, "partition"))
        total = sum(w for w, _ in choices)
        pick = rng.randrange(total)
        kind = "deliver"
        for weight, candidate in choices:
            if pick < weight:
                kind = candidate
                break
            pick -= weight

        if kind == "begin":
            counter += 1
            emit("begin", {"rid": rng.choice(rids), "txid": f"t{counter}"})
        elif kind == "stmt":
            emit("stmt", {"txid": rng.choice(open_txs), "sql": _gen_statement(rng), "expect": None})
        elif kind == "commit":
            emit("commit", {"txid": rng.choice(open_txs), "expect": None})
        elif kind == "abort":
            emit("abort", {"txid": rng.choice(open_txs)})
        elif kind == "deliver":
            rid = None if rng.random() < 0.3 else rng.choice(rids)
            emit("deliver", {"rid": rid})
        elif kind == "partition":
            cut = rng.randrange(1, len(rids))
            shuffled = rids[:]
            rng.shuffle(shuffled)
            emit("partition", {"groups": [sorted(shuffled[:cut]), sorted(shuffled[cut:])]})
        else:
            emit("heal", {})
    return trace


def fuzz(config: FuzzConfig, shrink: bool = True) -> FuzzOutcome:
    """One seeded random run; the report carries any invariant breakage."""
    rng = random.Random(config.seed)
    rids = [f"r{i + 1}" for i in range(config.replicas)]
    catalog = sch.parse_schema_text(config.schema_text)
    runner = Runner(
        catalog, rids, name=f"fuzz-{config.seed}",
        check_invariants=config.check_invariants, lenient=True,
    )
    trace = _gen_events(config, rng, rids, runner)
    runner.finish()
    outcome = FuzzOutcome(config, trace, runner.report)
    if not outcome.ok and shrink:
        outcome.minimized = minimize(config, trace)
    return outcome


def replay_trace(config: FuzzConfig, trace: list[Event]) -> Report:
    """Re-run a recorded trace; used to confirm and minimize failures."""
    rids = [f"r{i + 1}" for i in range(config.replicas)]
    catalog = sch.parse_schema_text(config.schema_text)
    runner = Runner(
        catalog, rids, name="replay",
        check_invariants=config.check_invariants, lenient=True,
    )
    runner.run(trace)
    runner.finish()
    return runner.report


def minimize(config: FuzzConfig, trace: list[Event]) -> list[Event]:
    """Greedy one-at-a-time shrink keeping the trace failing."""
    current = list(trace)
    changed = True
    while changed:
        changed = False
        for i in range(len(current)):
            candidate = current[:i] + current[i + 1:]
            if not replay_trace(config, candidate).ok:
                current = candidate
                changed = True
                break
    return current


def fuzz_many(
    seeds, replicas: int = 3, events: int = 60, schema_text: str = FUZZ_SCHEMA
) -> list[FuzzOutcome]:
    out = []
    for seed in seeds:
        config = FuzzConfig(seed=seed, replicas=replicas, events=events, schema_text=schema_text)
        out.append(fuzz(config))
    return out


def report_json(report: Report) -> str:
    return json.dumps(report.to_json(), indent=2, sort_keys=True)
