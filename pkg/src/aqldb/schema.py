"""Parser and validator for the AQL dialect.

Covers CREATE TABLE with per-table and per-column concurrency annotations,
plus the INSERT / UPDATE / DELETE / SELECT statement forms the engine
executes. Keywords are case-insensitive, identifiers are case-sensitive.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum

from .crdt import Bound, Scalar
from .errors import AqlSyntaxError, ValidationError


class Policy(Enum):
    UPDATE_WINS = "UPDATE_WINS"
    DELETE_WINS = "DELETE_WINS"
    NO_CONCURRENCY = "NO_CONCURRENCY"


class Modifier(Enum):
    LWW = "LWW"
    MULTI_VALUE = "MULTI_VALUE"
    ADDITIVE = "ADDITIVE"
    NONE = "NONE"


class Datatype(Enum):
    INT = "INT"
    VARCHAR = "VARCHAR"
    BOOLEAN = "BOOLEAN"

    def admits(self, value) -> bool:
        if self is Datatype.BOOLEAN:
            return isinstance(value, bool)
        if self is Datatype.INT:
            return isinstance(value, int) and not isinstance(value, bool)
        return isinstance(value, str)


COMPARISON_OPS = ("<", "<=", ">", ">=", "=", "<>")


@dataclass(frozen=True)
class CheckAtom:
    column: str
    op: str
    value: Scalar


@dataclass(frozen=True)
class PrimaryKey:
    pass


@dataclass(frozen=True)
class Check:
    atoms: tuple[CheckAtom, ...]


@dataclass(frozen=True)
class ForeignKey:
    table: str
    column: str
    policy: Policy = Policy.NO_CONCURRENCY
    cascade: bool = False


ConstraintDef = PrimaryKey | Check | ForeignKey


@dataclass
class ColumnDef:
    name: str
    datatype: Datatype
    modifier: Modifier = Modifier.NONE
    constraints: tuple[ConstraintDef, ...] = ()

    @property
    def is_primary_key(self) -> bool:
        return any(isinstance(c, PrimaryKey) for c in self.constraints)

    @property
    def checks(self) -> list[Check]:
        return [c for c in self.constraints if isinstance(c, Check)]

    @property
    def foreign_key(self) -> ForeignKey | None:
        for c in self.constraints:
            if isinstance(c, ForeignKey):
                return c
        return None

    def check_atoms(self) -> list[CheckAtom]:
        return [a for chk in self.checks for a in chk.atoms]


@dataclass
class TableSchema:
    name: str
    row_policy: Policy
    columns: list[ColumnDef]

    @property
    def primary_key(self) -> str:
        for col in self.columns:
            if col.is_primary_key:
                return col.name
        raise ValidationError(f"table {self.name} has no primary key")

    def column(self, name: str) -> ColumnDef:
        for col in self.columns:
            if col.name == name:
                return col
        raise ValidationError(f"table {self.name} has no column {name}")

    def has_column(self, name: str) -> bool:
        return any(col.name == name for col in self.columns)

    @property
    def foreign_keys(self) -> list[tuple[str, ForeignKey]]:
        return [(c.name, c.foreign_key) for c in self.columns if c.foreign_key]

    @property
    def non_pk_columns(self) -> list[ColumnDef]:
        return [c for c in self.columns if not c.is_primary_key]


@dataclass
class Catalog:
    tables: dict[str, TableSchema] = field(default_factory=dict)

    def add(self, schema: TableSchema) -> None:
        if schema.name in self.tables:
            raise ValidationError(f"table {schema.name} defined twice")
        self.tables[schema.name] = schema

    def table(self, name: str) -> TableSchema:
        if name not in self.tables:
            raise ValidationError(f"unknown table {name}")
        return self.tables[name]

    def referencing(self, table: str) -> list[tuple[str, str, ForeignKey]]:
        """Foreign keys pointing at table, as (child table, column, fk)."""
        out = []
        for child in self.tables.values():
            for col, fk in child.foreign_keys:
                if fk.table == table:
                    out.append((child.name, col, fk))
        return out


def concurrent_insert_allowed(schema: TableSchema) -> bool:
    """Concurrent inserts of one key merge only when every non-PK column has
    a concurrency modifier and the table is not NO_CONCURRENCY."""
    if schema.row_policy is Policy.NO_CONCURRENCY:
        return False
    return all(c.modifier is not Modifier.NONE for c in schema.non_pk_columns)


def additive_bound(col: ColumnDef) -> Bound | None:
    """The single bound a check constraint puts on an additive column."""
    atoms = col.check_atoms()
    if not atoms:
        return None
    atom = atoms[0]
    if atom.op == ">=":
        return Bound("lower", atom.value)
    if atom.op == ">":
        return Bound("lower", atom.value + 1)
    if atom.op == "<=":
        return Bound("upper", atom.value)
    return Bound("upper", atom.value - 1)


# --------------------------------------------------------------------------
# statements

@dataclass
class Where:
    column: str
    op: str
    value: Scalar

    def is_pk_lookup(self, schema: TableSchema) -> bool:
        return self.op == "=" and self.column == schema.primary_key


@dataclass
class SetAssign:
    column: str
    value: Scalar


@dataclass
class DeltaAssign:
    column: str
    delta: int


@dataclass
class Insert:
    table: str
    values: dict[str, Scalar]


@dataclass
class Update:
    table: str
    assignments: list[SetAssign | DeltaAssign]
    where: Where | None


@dataclass
class Delete:
    table: str
    where: Where | None


@dataclass
class Select:
    table: str
    columns: list[str] | None  # None means *
    where: Where | None


Statement = Insert | Update | Delete | Select


# --------------------------------------------------------------------------
# tokenizer

_TOKEN_RE = re.compile(
    r"""(?P<ws>\s+)
      | (?P<string>'(?:[^']|'')*')
      | (?P<int>\d+)
      | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
      | (?P<op><=|>=|<>|[<>=])
      | (?P<sym>[(),;*+\-])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> list[Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise AqlSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append(Token(kind, m.group(), pos))
        pos = m.end()
    tokens.append(Token("eof", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.idx = 0

    def peek(self) -> Token:
        return self.tokens[self.idx]

    def take(self) -> Token:
        tok = self.tokens[self.idx]
        if tok.kind != "eof":
            self.idx += 1
        return tok

    def error(self, expected: str) -> AqlSyntaxError:
        tok = self.peek()
        got = tok.text or "end of input"
        return AqlSyntaxError(f"unexpected {got!r}", tok.pos, expected)

    def at_keyword(self, *words: str) -> bool:
        tok = self.peek()
        return tok.kind == "ident" and tok.text.upper() in words

    def accept_keyword(self, *words: str) -> str | None:
        if self.at_keyword(*words):
            return self.take().text.upper()
        return None

    def expect_keyword(self, word: str) -> None:
        if not self.accept_keyword(word):
            raise self.error(word)

    def expect_sym(self, sym: str) -> None:
        tok = self.peek()
        if (tok.kind in ("sym", "op")) and tok.text == sym:
            self.take()
            return
        raise self.error(repr(sym))

    def accept_sym(self, sym: str) -> bool:
        tok = self.peek()
        if (tok.kind in ("sym", "op")) and tok.text == sym:
            self.take()
            return True
        return False

    def ident(self, what: str) -> str:
        tok = self.peek()
        if tok.kind != "ident":
            raise self.error(what)
        return self.take().text

    def literal(self) -> Scalar:
        tok = self.peek()
        if tok.kind == "string":
            self.take()
            return tok.text[1:-1].replace("''", "'")
        if tok.kind == "int":
            self.take()
            return int(tok.text)
        if tok.kind == "sym" and tok.text == "-":
            self.take()
            num = self.peek()
            if num.kind != "int":
                raise self.error("integer literal")
            self.take()
            return -int(num.text)
        if self.at_keyword("TRUE"):
            self.take()
            return True
        if self.at_keyword("FALSE"):
            self.take()
            return False
        raise self.error("literal")

    def comparison_op(self) -> str:
        tok = self.peek()
        if tok.kind == "op" and tok.text in COMPARISON_OPS:
            self.take()
            return tok.text
        raise self.error("comparison operator")


# --------------------------------------------------------------------------
# DDL

_POLICY_WORDS = ("UPDATE_WINS", "DELETE_WINS")


def parse_ddl(text: str, catalog: Catalog | None = None) -> TableSchema:
    """Parse one CREATE TABLE statement and validate it against catalog."""
    p = _Parser(text)
    schema = _parse_create(p, catalog or Catalog())
    p.accept_sym(";")
    if p.peek().kind != "eof":
        raise p.error("end of statement")
    return schema


def parse_schema_text(text: str) -> Catalog:
    """Parse a sequence of CREATE TABLE statements into a catalog."""
    p = _Parser(text)
    catalog = Catalog()
    while p.peek().kind != "eof":
        catalog.add(_parse_create(p, catalog))
        while p.accept_sym(";"):
            pass
    return catalog


def parse_literal(text: str) -> Scalar:
    """Parse a standalone scalar literal ('Sam', 42, -3, TRUE)."""
    p = _Parser(text)
    value = p.literal()
    if p.peek().kind != "eof":
        raise p.error("end of literal")
    return value


def _parse_create(p: _Parser, catalog: Catalog) -> TableSchema:
    p.expect_keyword("CREATE")
    policy = Policy.NO_CONCURRENCY
    word = p.accept_keyword(*_POLICY_WORDS)
    if word:
        policy = Policy(word)
    p.expect_keyword("TABLE")
    name = p.ident("table name")
    p.expect_sym("(")
    columns = [_parse_column(p)]
    while p.accept_sym(","):
        columns.append(_parse_column(p))
    p.expect_sym(")")
    schema = TableSchema(name, policy, columns)
    _validate_schema(schema, catalog)
    return schema


def _parse_column(p: _Parser) -> ColumnDef:
    name = p.ident("column name")
    dt = p.accept_keyword("INT", "VARCHAR", "BOOLEAN")
    if not dt:
        raise p.error("datatype")
    datatype = Datatype(dt)
    modifier = Modifier.NONE
    word = p.accept_keyword("LWW", "MULTI_VALUE", "ADDITIVE")
    if word:
        modifier = Modifier(word)
    constraints: list[ConstraintDef] = []
    while True:
        if p.accept_keyword("PRIMARY"):
            p.expect_keyword("KEY")
            constraints.append(PrimaryKey())
        elif p.accept_keyword("CHECK"):
            constraints.append(_parse_check(p))
        elif p.accept_keyword("FOREIGN"):
            p.expect_keyword("KEY")
            constraints.append(_parse_foreign_key(p))
        else:
            break
    return ColumnDef(name, datatype, modifier, tuple(constraints))


def _parse_check(p: _Parser) -> Check:
    p.expect_sym("(")
    atoms = [_parse_check_atom(p)]
    while p.accept_keyword("AND"):
        atoms.append(_parse_check_atom(p))
    p.expect_sym(")")
    return Check(tuple(atoms))


def _parse_check_atom(p: _Parser) -> CheckAtom:
    column = p.ident("column name")
    op = p.comparison_op()
    value = p.literal()
    return CheckAtom(column, op, value)


def _parse_foreign_key(p: _Parser) -> ForeignKey:
    policy = Policy.NO_CONCURRENCY
    word = p.accept_keyword(*_POLICY_WORDS)
    if word:
        policy = Policy(word)
    p.expect_keyword("REFERENCES")
    table = p.ident("table name")
    p.expect_sym("(")
    column = p.ident("column name")
    p.expect_sym(")")
    cascade = False
    if p.accept_keyword("ON"):
        p.expect_keyword("DELETE")
        p.expect_keyword("CASCADE")
        cascade = True
    return ForeignKey(table, column, policy, cascade)


def _validate_schema(schema: TableSchema, catalog: Catalog) -> None:
    seen: set[str] = set()
    pk_count = 0
    for col in schema.columns:
        if col.name in seen:
            raise ValidationError(f"duplicate column {col.name} in {schema.name}")
        seen.add(col.name)
        if col.is_primary_key:
            pk_count += 1
    if pk_count != 1:
        raise ValidationError(
            f"table {schema.name} needs exactly one PRIMARY KEY column, found {pk_count}"
        )

    for col in schema.columns:
        if col.is_primary_key and col.modifier is not Modifier.NONE:
            raise ValidationError(
                f"primary key column {schema.name}.{col.name} cannot carry a modifier"
            )
        if col.modifier is Modifier.ADDITIVE and col.datatype is not Datatype.INT:
            raise ValidationError(
                f"ADDITIVE requires INT, column {schema.name}.{col.name} is {col.datatype.value}"
            )
        _validate_checks(schema, col)
        fk = col.foreign_key
        if fk is not None:
            if col.modifier is Modifier.ADDITIVE:
                raise ValidationError(
                    f"foreign key column {schema.name}.{col.name} cannot be ADDITIVE"
                )
            target = catalog.table(fk.table) if fk.table != schema.name else schema
            if not target.has_column(fk.column):
                raise ValidationError(
                    f"foreign key target {fk.table}.{fk.column} does not exist"
                )
            if target.primary_key != fk.column:
                raise ValidationError(
                    f"foreign key must reference the primary key of {fk.table}"
                )
            if target.column(fk.column).datatype is not col.datatype:
                raise ValidationError(
                    f"foreign key column {schema.name}.{col.name} type differs from {fk.table}.{fk.column}"
                )


def _validate_checks(schema: TableSchema, col: ColumnDef) -> None:
    atoms = col.check_atoms()
    for atom in atoms:
        if atom.column != col.name:
            raise ValidationError(
                f"check on {schema.name}.{col.name} may only constrain that column"
            )
        if not col.datatype.admits(atom.value):
            raise ValidationError(
                f"check constant {atom.value!r} does not match {col.datatype.value}"
            )
    if col.modifier is Modifier.ADDITIVE and atoms:
        if len(atoms) != 1:
            raise ValidationError(
                f"additive column {schema.name}.{col.name} takes a single bound"
            )
        if atoms[0].op not in ("<", "<=", ">", ">="):
            raise ValidationError(
                f"additive column {schema.name}.{col.name} needs a one-sided bound"
            )


# --------------------------------------------------------------------------
# statements

def parse_statement(text: str, catalog: Catalog) -> Statement:
    p = _Parser(text)
    if p.accept_keyword("INSERT"):
        stmt = _parse_insert(p, catalog)
    elif p.accept_keyword("UPDATE"):
        stmt = _parse_update(p, catalog)
    elif p.accept_keyword("DELETE"):
        stmt = _parse_delete(p, catalog)
    elif p.accept_keyword("SELECT"):
        stmt = _parse_select(p, catalog)
    else:
        raise p.error("INSERT, UPDATE, DELETE or SELECT")
    p.accept_sym(";")
    if p.peek().kind != "eof":
        raise p.error("end of statement")
    return stmt


def _parse_insert(p: _Parser, catalog: Catalog) -> Insert:
    p.expect_keyword("INTO")
    table = p.ident("table name")
    schema = catalog.table(table)
    columns: list[str] | None = None
    if p.accept_sym("("):
        columns = [p.ident("column name")]
        while p.accept_sym(","):
            columns.append(p.ident("column name"))
        p.expect_sym(")")
    p.expect_keyword("VALUES")
    p.expect_sym("(")
    values = [p.literal()]
    while p.accept_sym(","):
        values.append(p.literal())
    p.expect_sym(")")

    names = columns if columns is not None else [c.name for c in schema.columns]
    if len(names) != len(values):
        raise ValidationError(
            f"insert into {table} lists {len(names)} columns but {len(values)} values"
        )
    mapping: dict[str, Scalar] = {}
    for name, value in zip(names, values):
        col = schema.column(name)
        if name in mapping:
            raise ValidationError(f"column {name} listed twice")
        if not col.datatype.admits(value):
            raise ValidationError(
                f"value {value!r} does not match {table}.{name} ({col.datatype.value})"
            )
        mapping[name] = value
    missing = [c.name for c in schema.columns if c.name not in mapping]
    if missing:
        raise ValidationError(f"insert into {table} must cover columns {missing}")
    return Insert(table, mapping)


def _parse_update(p: _Parser, catalog: Catalog) -> Update:
    table = p.ident("table name")
    schema = catalog.table(table)
    p.expect_keyword("SET")
    assignments = [_parse_assignment(p, schema)]
    while p.accept_sym(","):
        assignments.append(_parse_assignment(p, schema))
    where = _parse_where(p, schema)
    return Update(table, assignments, where)


def _parse_assignment(p: _Parser, schema: TableSchema) -> SetAssign | DeltaAssign:
    name = p.ident("column name")
    col = schema.column(name)
    if col.is_primary_key:
        raise ValidationError(f"primary key column {name} cannot be assigned")
    p.expect_sym("=")
    # Delta form: col = col + k or col = col - k, only for additive columns.
    tok = p.peek()
    if tok.kind == "ident" and tok.text.upper() not in ("TRUE", "FALSE"):
        ref = p.ident("column name")
        if ref != name:
            raise ValidationError(
                f"assignment to {name} may only reference {name} itself"
            )
        sign = 1
        if p.accept_sym("+"):
            sign = 1
        elif p.accept_sym("-"):
            sign = -1
        else:
            raise p.error("'+' or '-'")
        amount = p.peek()
        if amount.kind != "int":
            raise p.error("integer literal")
        p.take()
        if col.modifier is not Modifier.ADDITIVE:
            raise ValidationError(f"column {name} is not ADDITIVE, use {name} = value")
        return DeltaAssign(name, sign * int(amount.text))
    value = p.literal()
    if col.modifier is Modifier.ADDITIVE:
        raise ValidationError(
            f"additive column {name} must be updated as {name} = {name} + k"
        )
    if not col.datatype.admits(value):
        raise ValidationError(
            f"value {value!r} does not match {schema.name}.{name} ({col.datatype.value})"
        )
    return SetAssign(name, value)


def _parse_delete(p: _Parser, catalog: Catalog) -> Delete:
    p.expect_keyword("FROM")
    table = p.ident("table name")
    schema = catalog.table(table)
    return Delete(table, _parse_where(p, schema))


def _parse_select(p: _Parser, catalog: Catalog) -> Select:
    columns: list[str] | None
    if p.accept_sym("*"):
        columns = None
    else:
        columns = [p.ident("column name")]
        while p.accept_sym(","):
            columns.append(p.ident("column name"))
    p.expect_keyword("FROM")
    table = p.ident("table name")
    schema = catalog.table(table)
    if columns is not None:
        for name in columns:
            schema.column(name)
    return Select(table, columns, _parse_where(p, schema))


def _parse_where(p: _Parser, schema: TableSchema) -> Where | None:
    if not p.accept_keyword("WHERE"):
        if p.peek().kind == "eof" or p.peek().text == ";":
            return None
        raise p.error("WHERE or end of statement")
    column = p.ident("column name")
    col = schema.column(column)
    op = p.comparison_op()
    value = p.literal()
    if not col.datatype.admits(value):
        raise ValidationError(
            f"where constant {value!r} does not match {schema.name}.{column}"
        )
    return Where(column, op, value)


# --------------------------------------------------------------------------
# printing

def to_ddl(schema: TableSchema) -> str:
    policy = "" if schema.row_policy is Policy.NO_CONCURRENCY else schema.row_policy.value + " "
    cols = ", ".join(_column_ddl(c) for c in schema.columns)
    return f"CREATE {policy}TABLE {schema.name} ({cols})"


def catalog_to_ddl(catalog: Catalog) -> str:
    return ";\n".join(to_ddl(t) for t in catalog.tables.values()) + ";"


def _column_ddl(col: ColumnDef) -> str:
    parts = [col.name, col.datatype.value]
    if col.modifier is not Modifier.NONE:
        parts.append(col.modifier.value)
    for c in col.constraints:
        if isinstance(c, PrimaryKey):
            parts.append("PRIMARY KEY")
        elif isinstance(c, Check):
            cond = " AND ".join(
                f"{a.column} {a.op} {_literal_ddl(a.value)}" for a in c.atoms
            )
            parts.append(f"CHECK ({cond})")
        elif isinstance(c, ForeignKey):
            fkp = "" if c.policy is Policy.NO_CONCURRENCY else c.policy.value + " "
            suffix = " ON DELETE CASCADE" if c.cascade else ""
            parts.append(f"FOREIGN KEY {fkp}REFERENCES {c.table} ({c.column}){suffix}")
    return " ".join(parts)


def _literal_ddl(value: Scalar) -> str:
    if isinstance(value, bool):
        return "TRUE" if value else "FALSE"
    if isinstance(value, int):
        return str(value)
    return "'" + value.replace("'", "''") + "'"
