"""JDL (Job Description Language) parsing, rendering and the monitoring rewrite.

A JDL document is an ordered sequence of ``Name = value;`` statements.  The
grammar covers the attribute shapes that job descriptions of this style
actually use:

    document   = { statement }
    statement  = NAME "=" value ";"
    value      = String | Number | StringList | Expression | TokenRun
    String     = '"' chars '"'                 (backslash escapes " and \\)
    Number     = [ "+" | "-" ] DIGIT+
    StringList = "{" [ String { "," String } ] "}"
    Expression = opaque text up to the statement's ";" (kept byte-identical)
    TokenRun   = bare whitespace-separated tokens up to the ";"

``#`` starts a comment running to end of line; comments are recognized
between tokens and between statements, not inside a raw Expression/TokenRun
value.  Typographic quotes and dashes are normalized to ASCII before
tokenizing, so documents pasted from papers or word processors parse cleanly.

Classification of a raw (unquoted, unbraced) value: a pure integer is a
Number; text containing any of ``( ) " ,`` is an Expression; anything else is
a TokenRun.  A single-token TokenRun that looks like an integer therefore
re-parses as a Number; callers that care use Number in the first place.

The monitoring rewrite replaces the executable with the wrapper, prepends the
wrapper to the input sandbox, ensures an update period, and packs the job
credentials plus the original command line into the Arguments token run:

    Arguments = -id=<job_id> -password=<pw> -site=<site> -atm=<url> <orig exe> <orig args...>;
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterator, Optional, Union

WRAPPER_EXECUTABLE = "atm-wrapper"
DEFAULT_RETRY_COUNT = 10

# Typographic characters that show up in copy-pasted job descriptions.
_NORMALIZE = str.maketrans({
    "“": '"', "”": '"', "„": '"', "‟": '"',
    "‘": "'", "’": "'",
    "–": "-", "—": "-", "−": "-",
})

_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_INT_RE = re.compile(r"[+-]?[0-9]+\Z")
# Characters that would change how a bare token re-parses.
_TOKEN_FORBIDDEN = set('(){}",;#') | set(" \t\r\n")


class JdlError(Exception):
    """Base class for JDL problems."""


class JdlSyntaxError(JdlError):
    def __init__(self, line: int, column: int, expected: str, found: str = ""):
        self.line = line
        self.column = column
        self.expected = expected
        self.found = found
        detail = f", found {found!r}" if found else ""
        super().__init__(f"line {line}, column {column}: expected {expected}{detail}")


class DuplicateAttribute(JdlError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"duplicate attribute {name!r}")


class MissingExecutable(JdlError):
    def __init__(self):
        super().__init__("document has no Executable attribute")


class AlreadyWrapped(JdlError):
    def __init__(self):
        super().__init__(f"Executable is already {WRAPPER_EXECUTABLE!r}")


@dataclass(frozen=True)
class JdlString:
    value: str


@dataclass(frozen=True)
class JdlNumber:
    value: int


@dataclass(frozen=True)
class JdlStringList:
    values: tuple[str, ...]


@dataclass(frozen=True)
class JdlTokenRun:
    tokens: tuple[str, ...]

    def __post_init__(self):
        for tok in self.tokens:
            if not tok or any(c in _TOKEN_FORBIDDEN for c in tok):
                raise ValueError(f"invalid bare token {tok!r}")


@dataclass(frozen=True)
class JdlExpression:
    text: str


JdlValue = Union[JdlString, JdlNumber, JdlStringList, JdlTokenRun, JdlExpression]


@dataclass(frozen=True)
class JdlDocument:
    """Ordered attribute map; value objects are immutable, so are documents."""

    attributes: tuple[tuple[str, JdlValue], ...] = ()

    def __post_init__(self):
        names = [name for name, _ in self.attributes]
        seen = set()
        for name in names:
            if name in seen:
                raise DuplicateAttribute(name)
            seen.add(name)

    def get(self, name: str) -> Optional[JdlValue]:
        for attr, value in self.attributes:
            if attr == name:
                return value
        return None

    def __contains__(self, name: str) -> bool:
        return self.get(name) is not None

    def __iter__(self) -> Iterator[tuple[str, JdlValue]]:
        return iter(self.attributes)

    def __len__(self) -> int:
        return len(self.attributes)

    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.attributes)

    def set(self, name: str, value: JdlValue) -> "JdlDocument":
        """Replace ``name`` in place, or append it if absent."""
        if name in self:
            return JdlDocument(tuple(
                (attr, value if attr == name else old)
                for attr, old in self.attributes
            ))
        return JdlDocument(self.attributes + ((name, value),))

    def insert_before(self, anchor: str, name: str, value: JdlValue) -> "JdlDocument":
        """Insert a new attribute just before ``anchor`` (append if anchor absent)."""
        if name in self:
            raise DuplicateAttribute(name)
        out: list[tuple[str, JdlValue]] = []
        inserted = False
        for attr, old in self.attributes:
            if attr == anchor and not inserted:
                out.append((name, value))
                inserted = True
            out.append((attr, old))
        if not inserted:
            out.append((name, value))
        return JdlDocument(tuple(out))

    def insert_after(self, anchor: str, name: str, value: JdlValue) -> "JdlDocument":
        """Insert a new attribute just after ``anchor`` (append if anchor absent)."""
        if name in self:
            raise DuplicateAttribute(name)
        out: list[tuple[str, JdlValue]] = []
        inserted = False
        for attr, old in self.attributes:
            out.append((attr, old))
            if attr == anchor and not inserted:
                out.append((name, value))
                inserted = True
        if not inserted:
            out.append((name, value))
        return JdlDocument(tuple(out))

    def remove(self, name: str) -> "JdlDocument":
        return JdlDocument(tuple(
            (attr, value) for attr, value in self.attributes if attr != name
        ))


@dataclass(frozen=True)
class RewriteParams:
    """Credentials and knobs injected into a job description by the rewrite."""

    job_id: str
    password: str
    site: str
    atm_url: str
    retry_count: int = DEFAULT_RETRY_COUNT

    def __post_init__(self):
        for field_name in ("job_id", "password", "site", "atm_url"):
            value = getattr(self, field_name)
            if not value:
                raise ValueError(f"{field_name} must be non-empty")
            if any(c in _TOKEN_FORBIDDEN for c in value):
                raise ValueError(f"{field_name} contains characters unsafe in a token run: {value!r}")
        if self.retry_count < 1:
            raise ValueError("retry_count must be >= 1")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

class _Scanner:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.line = 1
        self.col = 1

    def eof(self) -> bool:
        return self.pos >= len(self.text)

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def advance(self) -> str:
        ch = self.text[self.pos]
        self.pos += 1
        if ch == "\n":
            self.line += 1
            self.col = 1
        else:
            self.col += 1
        return ch

    def error(self, expected: str) -> JdlSyntaxError:
        found = self.peek() if not self.eof() else "end of input"
        return JdlSyntaxError(self.line, self.col, expected, found)

    def skip_layout(self):
        """Skip whitespace and # comments."""
        while not self.eof():
            ch = self.peek()
            if ch in " \t\r\n":
                self.advance()
            elif ch == "#":
                while not self.eof() and self.peek() != "\n":
                    self.advance()
            else:
                return

    def take_name(self) -> str:
        m = _NAME_RE.match(self.text, self.pos)
        if not m:
            raise self.error("attribute name")
        for _ in range(m.end() - self.pos):
            self.advance()
        return m.group(0)

    def expect(self, ch: str):
        if self.peek() != ch:
            raise self.error(repr(ch))
        self.advance()

    def take_string(self) -> str:
        self.expect('"')
        out: list[str] = []
        while True:
            if self.eof():
                raise self.error("closing '\"'")
            ch = self.advance()
            if ch == '"':
                return "".join(out)
            if ch == "\n":
                raise JdlSyntaxError(self.line, self.col, "closing '\"' before end of line")
            if ch == "\\":
                if self.eof():
                    raise self.error("escaped character")
                nxt = self.advance()
                if nxt not in ('"', "\\"):
                    raise JdlSyntaxError(self.line, self.col, "escape of '\"' or '\\\\'", nxt)
                out.append(nxt)
            else:
                out.append(ch)

    def take_string_list(self) -> tuple[str, ...]:
        self.expect("{")
        values: list[str] = []
        self.skip_layout()
        if self.peek() == "}":
            self.advance()
            return ()
        while True:
            self.skip_layout()
            values.append(self.take_string())
            self.skip_layout()
            ch = self.peek()
            if ch == ",":
                self.advance()
            elif ch == "}":
                self.advance()
                return tuple(values)
            else:
                raise self.error("',' or '}'")

    def take_raw_value(self) -> str:
        """Consume opaque text up to the terminating ';' at paren depth zero.

        Quotes inside the raw text protect semicolons and parentheses, so
        expressions like Member(other.Env,"a;b") stay intact.
        """
        start = self.pos
        depth = 0
        in_string = False
        while not self.eof():
            ch = self.peek()
            if in_string:
                if ch == '"':
                    in_string = False
                self.advance()
            elif ch == '"':
                in_string = True
                self.advance()
            elif ch == "(":
                depth += 1
                self.advance()
            elif ch == ")":
                depth -= 1
                self.advance()
            elif ch == ";" and depth == 0:
                return self.text[start:self.pos]
            else:
                self.advance()
        raise self.error("';'")


def _classify_raw(raw: str, scanner: _Scanner) -> JdlValue:
    stripped = raw.strip()
    if not stripped:
        raise scanner.error("a value before ';'")
    if _INT_RE.match(stripped):
        return JdlNumber(int(stripped))
    if any(c in stripped for c in '(){}",'):
        return JdlExpression(stripped)
    return JdlTokenRun(tuple(stripped.split()))


def parse_jdl(text: str) -> JdlDocument:
    """Parse JDL text into an ordered document.

    Raises JdlSyntaxError with line/column on malformed input and
    DuplicateAttribute when a name repeats.
    """
    scanner = _Scanner(text.translate(_NORMALIZE))
    attributes: list[tuple[str, JdlValue]] = []
    seen: set[str] = set()
    while True:
        scanner.skip_layout()
        if scanner.eof():
            return JdlDocument(tuple(attributes))
        name = scanner.take_name()
        if name in seen:
            raise DuplicateAttribute(name)
        seen.add(name)
        scanner.skip_layout()
        scanner.expect("=")
        scanner.skip_layout()
        ch = scanner.peek()
        if ch == '"':
            value: JdlValue = JdlString(scanner.take_string())
            scanner.skip_layout()
        elif ch == "{":
            value = JdlStringList(scanner.take_string_list())
            scanner.skip_layout()
        else:
            value = _classify_raw(scanner.take_raw_value(), scanner)
        scanner.expect(";")
        attributes.append((name, value))


# ---------------------------------------------------------------------------
# Renderer
# ---------------------------------------------------------------------------

def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"')


def render_value(value: JdlValue) -> str:
    if isinstance(value, JdlString):
        return f'"{_escape(value.value)}"'
    if isinstance(value, JdlNumber):
        return str(value.value)
    if isinstance(value, JdlStringList):
        return "{" + ",".join(f'"{_escape(v)}"' for v in value.values) + "}"
    if isinstance(value, JdlTokenRun):
        return " ".join(value.tokens)
    if isinstance(value, JdlExpression):
        return value.text
    raise TypeError(f"not a JDL value: {value!r}")


def render_jdl(doc: JdlDocument) -> str:
    """Render one ``name = value;`` statement per line; empty document renders ''. """
    if not doc.attributes:
        return ""
    return "".join(f"{name} = {render_value(value)};\n" for name, value in doc)


# ---------------------------------------------------------------------------
# Monitoring rewrite
# ---------------------------------------------------------------------------

def _value_tokens(value: JdlValue) -> tuple[str, ...]:
    """Original Executable/Arguments values as bare tokens for the new Arguments."""
    if isinstance(value, JdlTokenRun):
        return value.tokens
    if isinstance(value, JdlString):
        return tuple(value.value.split())
    if isinstance(value, JdlNumber):
        return (str(value.value),)
    raise JdlError(f"cannot flatten {type(value).__name__} into argument tokens")


def rewrite_for_monitoring(original: JdlDocument, params: RewriteParams) -> JdlDocument:
    """Return the wrapped version of ``original``.

    Fails with MissingExecutable when the document lacks an Executable and
    AlreadyWrapped when applied to its own output.
    """
    executable = original.get("Executable")
    if executable is None:
        raise MissingExecutable()
    if executable == JdlString(WRAPPER_EXECUTABLE):
        raise AlreadyWrapped()

    doc = original.set("Executable", JdlString(WRAPPER_EXECUTABLE))

    sandbox = doc.get("InputSandbox")
    if sandbox is None:
        doc = doc.insert_after("Executable", "InputSandbox",
                               JdlStringList((WRAPPER_EXECUTABLE,)))
    elif isinstance(sandbox, JdlStringList):
        doc = doc.set("InputSandbox",
                      JdlStringList((WRAPPER_EXECUTABLE,) + sandbox.values))
    else:
        raise JdlError("InputSandbox must be a brace-enclosed string list")

    flags = (
        f"-id={params.job_id}",
        f"-password={params.password}",
        f"-site={params.site}",
        f"-atm={params.atm_url}",
    )
    tail = _value_tokens(executable)
    arguments = doc.get("Arguments")
    if arguments is not None:
        tail = tail + _value_tokens(arguments)
    # set() replaces an existing Arguments in place and appends one otherwise
    doc = doc.set("Arguments", JdlTokenRun(flags + tail))

    if "RetryCount" not in doc:
        doc = doc.insert_before("Arguments", "RetryCount", JdlNumber(params.retry_count))
    return doc


_FLAG_RE = re.compile(r"-(id|password|site|atm)=(.*)\Z")


def split_wrapper_arguments(tokens: tuple[str, ...]) -> tuple[dict[str, str], tuple[str, ...]]:
    """Split a rewritten Arguments token run into (flags, command tokens).

    Flags stop at the first token that is not ``-name=value``; the remainder
    is the original executable followed by its arguments.
    """
    flags: dict[str, str] = {}
    rest = list(tokens)
    while rest:
        m = _FLAG_RE.match(rest[0])
        if not m:
            break
        flags[m.group(1)] = m.group(2)
        rest.pop(0)
    return flags, tuple(rest)


def validate_monitoring_jdl(doc: JdlDocument) -> list[str]:
    """Return violations of the monitoring-rewrite contract; [] means wrapped."""
    violations: list[str] = []

    executable = doc.get("Executable")
    if executable != JdlString(WRAPPER_EXECUTABLE):
        violations.append(f'Executable: expected "{WRAPPER_EXECUTABLE}"')

    sandbox = doc.get("InputSandbox")
    if not isinstance(sandbox, JdlStringList) or WRAPPER_EXECUTABLE not in sandbox.values:
        violations.append(f'InputSandbox: must contain "{WRAPPER_EXECUTABLE}"')

    retry = doc.get("RetryCount")
    if not isinstance(retry, JdlNumber) or retry.value < 1:
        violations.append("RetryCount: must be present and >= 1")

    arguments = doc.get("Arguments")
    if not isinstance(arguments, JdlTokenRun):
        violations.append("Arguments: must be a bare token run")
    else:
        flags, _ = split_wrapper_arguments(arguments.tokens)
        for flag in ("id", "password", "site"):
            if not flags.get(flag):
                violations.append(f"Arguments: missing -{flag}=<value> flag")
    return violations
