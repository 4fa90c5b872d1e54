"""Replica engine: visibility, statements, constraints, folding, ids."""

import itertools

import pytest

import aqldb.schema as sch
from aqldb.crdt import VisibilityRegister
from aqldb.engine import (
    Cause,
    Replica,
    Store,
    ViewContext,
    dump_all,
    dump_table,
    integrity_violations,
    is_visible,
)
from aqldb.errors import (
    CheckViolation,
    DuplicateKey,
    FkParentMissing,
    FkRestrict,
    RowNotFound,
    ValidationError,
)
from aqldb.txn import LockManager

MUSIC = """
CREATE UPDATE_WINS TABLE Artists (
  Name VARCHAR PRIMARY KEY,
  Active BOOLEAN LWW,
  Plays INT ADDITIVE
);
CREATE UPDATE_WINS TABLE Albums (
  Title VARCHAR PRIMARY KEY,
  Artist VARCHAR LWW FOREIGN KEY UPDATE_WINS REFERENCES Artists (Name) ON DELETE CASCADE,
  Genre VARCHAR MULTI_VALUE
);
CREATE UPDATE_WINS TABLE Reviews (
  Id INT PRIMARY KEY,
  Album VARCHAR LWW FOREIGN KEY UPDATE_WINS REFERENCES Albums (Title) ON DELETE CASCADE,
  Stars INT LWW CHECK (Stars >= 1 AND Stars <= 5)
);
CREATE UPDATE_WINS TABLE Accounts (
  Owner VARCHAR PRIMARY KEY,
  Balance INT ADDITIVE CHECK (Balance >= 0)
);
CREATE TABLE Plain (
  Id INT PRIMARY KEY,
  Note VARCHAR
);
"""


def make_group(schema_text=MUSIC, rids=("r1", "r2")):
    catalog = sch.parse_schema_text(schema_text)
    locks = LockManager(rids)
    return {rid: Replica(rid, catalog, rids, locks) for rid in rids}, catalog


def run(rep, *statements):
    tx = rep.begin()
    out = None
    for s in statements:
        out = rep.execute(tx, s)
    return rep.commit(tx), out


def sync(records, *reps):
    for rep in reps:
        for record in records:
            if not rep.delivered(record):
                rep.deliver(record)


# ---------------------------------------------------------------------------
# visibility truth table over all flag subsets and row policies


def build_flag_row(store: Store, table: str, pk, flags):
    """Give a row the exact flag set by concurrent single-flag writes."""
    row = store.ensure(table, pk)
    vis = VisibilityRegister.bottom()
    for i, flag in enumerate(sorted(flags)):
        one = VisibilityRegister.bottom().assign(flag, {}, f"w{i}")
        vis = vis.merge(one)
    row.visibility = vis
    return row


POLICY_TABLES = {
    sch.Policy.UPDATE_WINS: "CREATE UPDATE_WINS TABLE T (K VARCHAR PRIMARY KEY, V INT LWW);",
    sch.Policy.DELETE_WINS: "CREATE DELETE_WINS TABLE T (K VARCHAR PRIMARY KEY, V INT LWW);",
    sch.Policy.NO_CONCURRENCY: "CREATE TABLE T (K VARCHAR PRIMARY KEY, V INT);",
}

ALL_FLAG_SETS = [
    frozenset(c) for n in range(4) for c in itertools.combinations("IDT", n)
]


@pytest.mark.parametrize("policy", sorted(POLICY_TABLES, key=lambda p: p.value))
@pytest.mark.parametrize("flags", ALL_FLAG_SETS, ids=lambda f: "".join(sorted(f)) or "none")
def test_visibility_truth_table(policy, flags):
    catalog = sch.parse_schema_text(POLICY_TABLES[policy])
    store = Store()
    build_flag_row(store, "T", "k", flags)
    verdict = is_visible(ViewContext(store, catalog), "T", "k")

    # independent statement of the rule: a row lives unless it has no
    # flags at all, or the deletes win over what else it has
    if not flags:
        expected = False
    elif policy is sch.Policy.UPDATE_WINS:
        expected = flags != {"D"}
    else:
        expected = "D" not in flags
    assert verdict.visible == expected, (policy, set(flags), verdict)
    if not flags:
        assert verdict.cause is Cause.MISSING


def test_visibility_cause_distinguishes_delete_kinds():
    catalog = sch.parse_schema_text(POLICY_TABLES[sch.Policy.UPDATE_WINS])
    store = Store()
    build_flag_row(store, "T", "k", {"D"})
    assert is_visible(ViewContext(store, catalog), "T", "k").cause is Cause.ONLY_D

    catalog = sch.parse_schema_text(POLICY_TABLES[sch.Policy.DELETE_WINS])
    store = Store()
    build_flag_row(store, "T", "k", {"I", "D"})
    assert is_visible(ViewContext(store, catalog), "T", "k").cause is Cause.ANY_D


# ---------------------------------------------------------------------------
# statement execution on a single replica


class TestBasicStatements:
    def test_insert_select(self):
        reps, _ = make_group()
        r1 = reps["r1"]
        run(r1, "INSERT INTO Artists VALUES ('Sam', TRUE, 3)")
        _, rows = run(r1, "SELECT * FROM Artists")
        assert rows == [{"Name": "Sam", "Active": True, "Plays": 3}]

    def test_update_lww_and_additive(self):
        reps, catalog = make_group()
        r1 = reps["r1"]
        run(r1, "INSERT INTO Artists VALUES ('Sam', TRUE, 3)")
        run(
            r1,
            "UPDATE Artists SET Active = FALSE WHERE Name = 'Sam'",
            "UPDATE Artists SET Plays = Plays + 4 WHERE Name = 'Sam'",
        )
        assert dump_table(r1.store, catalog, "Artists") == ["Sam,false,7"]

    def test_delete_hides_row(self):
        reps, catalog = make_group()
        r1 = reps["r1"]
        run(r1, "INSERT INTO Artists VALUES ('Sam', TRUE, 0)")
        run(r1, "DELETE FROM Artists WHERE Name = 'Sam'")
        assert dump_table(r1.store, catalog, "Artists") == []
        assert not is_visible(r1.committed_ctx(), "Artists", "Sam").visible

    def test_update_without_match(self):
        reps, _ = make_group()
        r1 = reps["r1"]
        tx = r1.begin()
        with pytest.raises(RowNotFound):
            r1.execute(tx, "UPDATE Artists SET Active = TRUE WHERE Name = 'Ghost'")

    def test_statement_error_aborts_tx(self):
        reps, _ = make_group()
        r1 = reps["r1"]
        tx = r1.begin()
        with pytest.raises(RowNotFound):
            r1.execute(tx, "DELETE FROM Artists WHERE Name = 'Ghost'")
        with pytest.raises(ValidationError):
            r1.execute(tx, "SELECT * FROM Artists")

    def test_snapshot_isolation_within_tx(self):
        reps, _ = make_group()
        r1 = reps["r1"]
        run(r1, "INSERT INTO Artists VALUES ('Sam', TRUE, 0)")
        tx = r1.begin()
        # another transaction commits while tx is open
        run(r1, "UPDATE Artists SET Active = FALSE WHERE Name = 'Sam'")
        rows = r1.execute(tx, "SELECT Active FROM Artists WHERE Name = 'Sam'")
        assert rows == [{"Active": True}]

    def test_own_writes_visible_in_tx(self):
        reps, _ = make_group()
        r1 = reps["r1"]
        tx = r1.begin()
        r1.execute(tx, "INSERT INTO Artists VALUES ('Sam', TRUE, 2)")
        r1.execute(tx, "UPDATE Artists SET Plays = Plays + 1 WHERE Name = 'Sam'")
        rows = r1.execute(tx, "SELECT Plays FROM Artists WHERE Name = 'Sam'")
        assert rows == [{"Plays": 3}]


class TestInsertSemantics:
    def test_duplicate_on_strict_table(self):
        reps, _ = make_group()
        r1 = reps["r1"]
        run(r1, "INSERT INTO Plain VALUES (1, 'a')")
        tx = r1.begin()
        with pytest.raises(DuplicateKey):
            r1.execute(tx, "INSERT INTO Plain VALUES (1, 'b')")

    def test_mergeable_insert_upserts(self):
        reps, catalog = make_group()
        r1 = reps["r1"]
        run(r1, "INSERT INTO Artists VALUES ('Sam', TRUE, 3)")
        gen_before = r1.store.row("Artists", "Sam").generation
        run(r1, "INSERT INTO Artists VALUES ('Sam', FALSE, 2)")
        # later write wins the register, the counter adds, incarnation keeps
        assert dump_table(r1.store, catalog, "Artists") == ["Sam,false,5"]
        assert r1.store.row("Artists", "Sam").generation == gen_before

    def test_reinsert_after_delete_bumps_generation(self):
        reps, _ = make_group()
        r1 = reps["r1"]
        run(r1, "INSERT INTO Artists VALUES ('Sam', TRUE, 0)")
        assert r1.store.row("Artists", "Sam").generation == 1
        run(r1, "DELETE FROM Artists WHERE Name = 'Sam'")
        run(r1, "INSERT INTO Artists VALUES ('Sam', FALSE, 0)")
        assert r1.store.row("Artists", "Sam").generation == 2
        assert is_visible(r1.committed_ctx(), "Artists", "Sam").visible

    def test_insert_missing_parent(self):
        reps, _ = make_group()
        r1 = reps["r1"]
        tx = r1.begin()
        with pytest.raises(FkParentMissing):
            r1.execute(tx, "INSERT INTO Albums VALUES ('A1', 'Nobody', 'rock')")


class TestReferences:
    def test_cascade_depth_two(self):
        reps, catalog = make_group()
        r1 = reps["r1"]
        run(
            r1,
            "INSERT INTO Artists VALUES ('Sam', TRUE, 0)",
            "INSERT INTO Albums VALUES ('A1', 'Sam', 'rock')",
            "INSERT INTO Reviews VALUES (1, 'A1', 5)",
        )
        run(r1, "DELETE FROM Artists WHERE Name = 'Sam'")
        assert dump_all(r1.store, catalog)["Albums"] == []
        assert dump_all(r1.store, catalog)["Reviews"] == []

    def test_restrict_without_cascade(self):
        text = """
        CREATE UPDATE_WINS TABLE P (K VARCHAR PRIMARY KEY, V INT LWW);
        CREATE UPDATE_WINS TABLE C (
          K VARCHAR PRIMARY KEY,
          R VARCHAR LWW FOREIGN KEY UPDATE_WINS REFERENCES P (K)
        );
        """
        reps, _ = make_group(text)
        r1 = reps["r1"]
        run(r1, "INSERT INTO P VALUES ('p', 1)", "INSERT INTO C VALUES ('c', 'p')")
        tx = r1.begin()
        with pytest.raises(FkRestrict):
            r1.execute(tx, "DELETE FROM P WHERE K = 'p'")

    def test_update_can_move_reference(self):
        reps, catalog = make_group()
        r1 = reps["r1"]
        run(
            r1,
            "INSERT INTO Artists VALUES ('Sam', TRUE, 0)",
            "INSERT INTO Artists VALUES ('Ana', TRUE, 0)",
            "INSERT INTO Albums VALUES ('A1', 'Sam', 'rock')",
        )
        run(r1, "UPDATE Albums SET Artist = 'Ana' WHERE Title = 'A1'")
        assert dump_table(r1.store, catalog, "Albums") == ["A1,Ana,rock"]
        # the album is no longer pinned to Sam: Sam's delete spares it
        run(r1, "DELETE FROM Artists WHERE Name = 'Sam'")
        assert dump_table(r1.store, catalog, "Albums") == ["A1,Ana,rock"]
        # but it now follows Ana out through the cascade
        run(r1, "DELETE FROM Artists WHERE Name = 'Ana'")
        assert dump_table(r1.store, catalog, "Albums") == []

    def test_update_to_missing_parent(self):
        reps, _ = make_group()
        r1 = reps["r1"]
        run(
            r1,
            "INSERT INTO Artists VALUES ('Sam', TRUE, 0)",
            "INSERT INTO Albums VALUES ('A1', 'Sam', 'rock')",
        )
        tx = r1.begin()
        with pytest.raises(FkParentMissing):
            r1.execute(tx, "UPDATE Albums SET Artist = 'Nobody' WHERE Title = 'A1'")

    def test_insert_touches_ancestor_chain(self):
        reps, _ = make_group()
        r1 = reps["r1"]
        run(
            r1,
            "INSERT INTO Artists VALUES ('Sam', TRUE, 0)",
            "INSERT INTO Albums VALUES ('A1', 'Sam', 'rock')",
        )
        tx = r1.begin()
        r1.execute(tx, "INSERT INTO Reviews VALUES (1, 'A1', 4)")
        # both the direct parent and the grandparent get a keep-alive flag
        assert tx.buffer[("Albums", "A1")].flag[0] == "T"
        assert tx.buffer[("Artists", "Sam")].flag[0] == "T"


class TestChecks:
    def test_static_check_on_insert(self):
        reps, _ = make_group()
        r1 = reps["r1"]
        run(r1, "INSERT INTO Artists VALUES ('Sam', TRUE, 0)")
        run(r1, "INSERT INTO Albums VALUES ('A1', 'Sam', 'rock')")
        tx = r1.begin()
        with pytest.raises(CheckViolation):
            r1.execute(tx, "INSERT INTO Reviews VALUES (1, 'A1', 6)")

    def test_static_check_on_update(self):
        reps, _ = make_group()
        r1 = reps["r1"]
        run(
            r1,
            "INSERT INTO Artists VALUES ('Sam', TRUE, 0)",
            "INSERT INTO Albums VALUES ('A1', 'Sam', 'rock')",
            "INSERT INTO Reviews VALUES (1, 'A1', 4)",
        )
        tx = r1.begin()
        with pytest.raises(CheckViolation):
            r1.execute(tx, "UPDATE Reviews SET Stars = 0 WHERE Id = 1")

    def test_bounded_creation_must_sit_in_bound(self):
        reps, _ = make_group()
        r1 = reps["r1"]
        tx = r1.begin()
        with pytest.raises(CheckViolation):
            r1.execute(tx, "INSERT INTO Accounts VALUES ('a', -1)")

    def test_bounded_over_consumption_is_retryable(self):
        reps, _ = make_group()
        r1 = reps["r1"]
        run(r1, "INSERT INTO Accounts VALUES ('a', 4)")
        tx = r1.begin()
        with pytest.raises(CheckViolation) as err:
            # 4 of head-room exist but half belong to the other replica
            r1.execute(tx, "UPDATE Accounts SET Balance = Balance - 3 WHERE Owner = 'a'")
        assert err.value.retryable

    def test_bounded_consumption_within_local_rights(self):
        reps, catalog = make_group()
        r1 = reps["r1"]
        run(r1, "INSERT INTO Accounts VALUES ('a', 4)")
        run(r1, "UPDATE Accounts SET Balance = Balance - 2 WHERE Owner = 'a'")
        assert dump_table(r1.store, catalog, "Accounts") == ["a,2"]

    def test_reservations_count_other_open_txs(self):
        reps, _ = make_group()
        r1 = reps["r1"]
        run(r1, "INSERT INTO Accounts VALUES ('a', 4)")  # r1 holds 2 rights
        t1, t2 = r1.begin(), r1.begin()
        r1.execute(t1, "UPDATE Accounts SET Balance = Balance - 2 WHERE Owner = 'a'")
        with pytest.raises(CheckViolation):
            r1.execute(t2, "UPDATE Accounts SET Balance = Balance - 1 WHERE Owner = 'a'")
        r1.abort(t1)
        t3 = r1.begin()
        r1.execute(t3, "UPDATE Accounts SET Balance = Balance - 1 WHERE Owner = 'a'")
        r1.commit(t3)


# ---------------------------------------------------------------------------
# two replicas, manual record exchange


class TestTwoReplicas:
    def test_deliver_is_idempotent_and_ordered(self):
        reps, _ = make_group()
        r1, r2 = reps["r1"], reps["r2"]
        rec1, _ = run(r1, "INSERT INTO Artists VALUES ('Sam', TRUE, 0)")
        rec2, _ = run(r1, "UPDATE Artists SET Plays = Plays + 1 WHERE Name = 'Sam'")
        assert not r2.ready(rec2)  # rec1 first
        r2.deliver(rec1)
        assert r2.deliver(rec2)
        assert not r2.deliver(rec2)  # duplicate is a no-op
        with pytest.raises(ValidationError):
            r2.deliver(rec2.__class__(  # gap: seq 4 cannot apply
                origin="r1", seq=4, txid="x", clock=rec2.clock, lamport=9, deltas=[],
            ))

    def test_stale_reference_invisible_everywhere(self):
        text = """
        CREATE UPDATE_WINS TABLE P (K VARCHAR PRIMARY KEY, V INT LWW);
        CREATE UPDATE_WINS TABLE C (
          K VARCHAR PRIMARY KEY,
          R VARCHAR LWW FOREIGN KEY DELETE_WINS REFERENCES P (K)
        );
        """
        reps, catalog = make_group(text)
        r1, r2 = reps["r1"], reps["r2"]
        rec, _ = run(r1, "INSERT INTO P VALUES ('p', 1)")
        sync([rec], r2)

        # r1 re-incarnates p while r2 references the first incarnation
        a, _ = run(r1, "DELETE FROM P WHERE K = 'p'")
        b, _ = run(r1, "INSERT INTO P VALUES ('p', 2)")
        c, _ = run(r2, "INSERT INTO C VALUES ('c', 'p')")
        sync([a, b], r2)
        sync([c], r1)

        for rep in (r1, r2):
            assert is_visible(rep.committed_ctx(), "P", "p").visible
            verdict = is_visible(rep.committed_ctx(), "C", "c")
            assert not verdict.visible
            assert verdict.cause is Cause.PARENT_VERSION_STALE
            assert dump_table(rep.store, catalog, "C") == []

    def test_matching_generation_keeps_child(self):
        text = """
        CREATE UPDATE_WINS TABLE P (K VARCHAR PRIMARY KEY, V INT LWW);
        CREATE UPDATE_WINS TABLE C (
          K VARCHAR PRIMARY KEY,
          R VARCHAR LWW FOREIGN KEY DELETE_WINS REFERENCES P (K)
        );
        """
        reps, _ = make_group(text)
        r1, r2 = reps["r1"], reps["r2"]
        rec, _ = run(r1, "INSERT INTO P VALUES ('p', 1)")
        sync([rec], r2)
        c, _ = run(r2, "INSERT INTO C VALUES ('c', 'p')")
        sync([c], r1)
        assert is_visible(r1.committed_ctx(), "C", "c").visible

    def test_integrity_checker_accepts_converged_stores(self):
        reps, catalog = make_group()
        r1, r2 = reps["r1"], reps["r2"]
        recs = [
            run(r1, "INSERT INTO Artists VALUES ('Sam', TRUE, 1)")[0],
            run(r1, "INSERT INTO Albums VALUES ('A1', 'Sam', 'rock')")[0],
        ]
        sync(recs, r2)
        for rep in (r1, r2):
            assert integrity_violations(rep.store, catalog) == []


# ---------------------------------------------------------------------------
# identifier generation


class TestIds:
    def test_prefixed_ids_unique_across_replicas(self):
        reps, _ = make_group(rids=("r1", "r2", "r3"))
        seen = set()
        for rep in reps.values():
            for _ in range(10_000):
                seen.add(rep.next_unique_id())
        assert len(seen) == 30_000

    def test_sequential_ids_gap_free_single_site(self):
        reps, _ = make_group()
        r1 = reps["r1"]
        got = []
        for _ in range(5):
            tx = r1.begin()
            got.append(r1.next_sequential_id(tx, "order"))
            r1.commit(tx)
        assert got == [1, 2, 3, 4, 5]

    def test_sequential_ids_roll_back_with_abort(self):
        reps, _ = make_group()
        r1 = reps["r1"]
        tx = r1.begin()
        assert r1.next_sequential_id(tx, "order") == 1
        r1.abort(tx)
        tx = r1.begin()
        assert r1.next_sequential_id(tx, "order") == 1
        r1.commit(tx)
