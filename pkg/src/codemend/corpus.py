"""C function corpus: extraction from source files, pairing vulnerable and
repaired versions via sidecar metadata, and a synthetic pair generator.

Extraction is desk-scale, not a compiler: comments and string/char literals
are first blanked to same-length spaces (newlines preserved, so offsets and
line numbers survive), then a function-start pattern is matched at brace
depth zero and the body is walked to its closing brace.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass

from .errors import ExtractionError, ValidationError


@dataclass
class ExtractedFunction:
    code: str
    name: str
    line_start: int


@dataclass
class Fragment:
    """A function fragment with a stable id, as referenced by sidecar metadata."""

    frag_id: str
    code: str
    source_file: str = ""
    line_start: int = 1


@dataclass
class FunctionPair:
    """A vulnerable function, its repair (if known), and its annotations."""

    vulnerable_code: str
    repaired_code: str | None = None
    description: str | None = None
    comment: str | None = None
    source_file: str = ""
    line_start: int = 1
    template: str | None = None  # set for synthetic pairs


@dataclass
class PairingReport:
    pairs: int = 0
    with_fix: int = 0
    without_fix: int = 0
    unreferenced_fragments: int = 0


_CONTROL_WORDS = frozenset(
    {"if", "for", "while", "switch", "do", "else", "return", "sizeof", "case"}
)

# type tokens (identifiers separated by whitespace and/or '*'), then the
# function name, an argument list free of ';' and braces, the opening brace
_SIG_RE = re.compile(
    r"\b(?:[A-Za-z_][A-Za-z0-9_]*[ \t\n*]+)+"
    r"([A-Za-z_][A-Za-z0-9_]*)[ \t\n]*\(([^;{}]*)\)[ \t\n]*\{"
)


def neutralize(text: str) -> str:
    """Blank comments and string/char literal contents (delimiters included)
    to spaces, keeping newlines, so the result has the same length and line
    structure as the input."""
    out = list(text)
    n = len(text)
    i = 0
    NORMAL, LINE, BLOCK, LIT = range(4)
    state = NORMAL
    quote = ""
    while i < n:
        c = text[i]
        if state == NORMAL:
            if c == "/" and i + 1 < n and text[i + 1] == "/":
                out[i] = out[i + 1] = " "
                state = LINE
                i += 2
            elif c == "/" and i + 1 < n and text[i + 1] == "*":
                out[i] = out[i + 1] = " "
                state = BLOCK
                i += 2
            elif c == '"' or c == "'":
                out[i] = " "
                quote = c
                state = LIT
                i += 1
            else:
                i += 1
        elif state == LINE:
            if c == "\n":
                state = NORMAL
            else:
                out[i] = " "
            i += 1
        elif state == BLOCK:
            if c == "*" and i + 1 < n and text[i + 1] == "/":
                out[i] = out[i + 1] = " "
                state = NORMAL
                i += 2
            else:
                if c != "\n":
                    out[i] = " "
                i += 1
        else:  # LIT
            if c == "\\" and i + 1 < n:
                out[i] = " "
                if text[i + 1] != "\n":
                    out[i + 1] = " "
                i += 2
            elif c == quote:
                out[i] = " "
                state = NORMAL
                i += 1
            else:
                if c != "\n":
                    out[i] = " "
                i += 1
    return "".join(out)


def extract_functions(text: str) -> list[ExtractedFunction]:
    """Find complete top-level function definitions in a C translation unit.

    Returns the original source span of each function (signature through
    closing brace) with its 1-based starting line. A function whose opening
    brace never closes raises ExtractionError naming that line. A stray
    closing brace at file scope (as produced by unbalanced preprocessor
    branches) is tolerated: depth clamps at zero.
    """
    neutral = neutralize(text)
    depth_before = [0] * (len(neutral) + 1)
    d = 0
    for i, c in enumerate(neutral):
        depth_before[i] = d
        if c == "{":
            d += 1
        elif c == "}":
            d = max(0, d - 1)
    depth_before[len(neutral)] = d

    results = []
    for m in _SIG_RE.finditer(neutral):
        if depth_before[m.start()] != 0:
            continue
        name = m.group(1)
        if name in _CONTROL_WORDS:
            continue
        line_start = text.count("\n", 0, m.start()) + 1
        open_pos = m.end() - 1
        depth = 1
        j = open_pos + 1
        while j < len(neutral) and depth > 0:
            if neutral[j] == "{":
                depth += 1
            elif neutral[j] == "}":
                depth -= 1
            j += 1
        if depth != 0:
            raise ExtractionError(
                f"unbalanced braces in function '{name}' starting at line {line_start}"
            )
        results.append(ExtractedFunction(code=text[m.start() : j], name=name, line_start=line_start))
    return results


def _check_balanced(code: str, what: str) -> None:
    neutral = neutralize(code)
    d = 0
    for c in neutral:
        if c == "{":
            d += 1
        elif c == "}":
            d -= 1
        if d < 0:
            raise ValidationError(f"{what}: unbalanced '}}'")
    if d != 0:
        raise ValidationError(f"{what}: unbalanced braces")


def pair_functions(
    fragments: list[Fragment], metadata: list[dict]
) -> tuple[list[FunctionPair], PairingReport]:
    """Join extracted fragments with sidecar rows.

    Each metadata row holds {"vul_id", "fix_id", "description", "comment"};
    fix_id may be null for vulnerabilities with no known repair. A row
    referencing a missing fragment id, or whose vulnerable and repaired code
    are textually identical, raises ValidationError.
    """
    by_id = {f.frag_id: f for f in fragments}
    if len(by_id) != len(fragments):
        raise ValidationError("duplicate fragment ids")
    referenced = set()
    pairs = []
    report = PairingReport()
    for row_no, row in enumerate(metadata):
        vul_id = row.get("vul_id")
        if vul_id is None:
            raise ValidationError(f"metadata row {row_no}: missing vul_id")
        if vul_id not in by_id:
            raise ValidationError(f"metadata row {row_no}: unknown vul_id {vul_id!r}")
        vul = by_id[vul_id]
        referenced.add(vul_id)
        _check_balanced(vul.code, f"fragment {vul_id}")
        fix_id = row.get("fix_id")
        repaired = None
        if fix_id is not None:
            if fix_id not in by_id:
                raise ValidationError(f"metadata row {row_no}: unknown fix_id {fix_id!r}")
            referenced.add(fix_id)
            repaired = by_id[fix_id].code
            _check_balanced(repaired, f"fragment {fix_id}")
            if repaired == vul.code:
                raise ValidationError(
                    f"metadata row {row_no}: vulnerable and repaired code are identical"
                )
            report.with_fix += 1
        else:
            report.without_fix += 1
        pairs.append(
            FunctionPair(
                vulnerable_code=vul.code,
                repaired_code=repaired,
                description=row.get("description"),
                comment=row.get("comment"),
                source_file=vul.source_file,
                line_start=vul.line_start,
            )
        )
    report.pairs = len(pairs)
    report.unreferenced_fragments = len(fragments) - len(referenced)
    return pairs, report


# --- synthetic pair generation -------------------------------------------

_VERBS = ["handle", "parse", "copy", "read", "load", "scan", "fill", "pack",
          "emit", "store", "merge", "apply", "decode", "format", "route"]
_NOUNS = ["msg", "packet", "frame", "record", "entry", "line", "field",
          "token", "chunk", "block", "item", "header", "reply", "event"]
_BUF_NAMES = ["buf", "tmp", "local", "stage", "scratch", "dest"]
_PTR_NAMES = ["src", "input", "data", "arg", "text", "raw"]
_IDX_NAMES = ["i", "j", "k", "idx", "pos"]
_STRUCT_NAMES = ["packet", "record", "node", "conn", "request", "session"]
_FIELD_NAMES = ["len", "size", "count", "flags", "depth", "seq"]

TEMPLATES = ("unbounded_copy", "off_by_one", "null_deref")


def _gen_unbounded_copy(rng: random.Random, fn: str) -> FunctionPair:
    buf = rng.choice(_BUF_NAMES)
    src = rng.choice(_PTR_NAMES)
    size = rng.choice([8, 16, 32, 64])
    k = rng.randint(1, 9)
    head = f"int {fn}(char *{src}) {{\n    char {buf}[{size}];\n    int n = 0;\n"
    tail = f"    n = {buf}[0] + {k};\n    return n;\n}}\n"
    vul = head + f"    strcpy({buf}, {src});\n" + tail
    fix = (
        head
        + f"    strncpy({buf}, {src}, sizeof({buf}) - 1);\n"
        + f"    {buf}[sizeof({buf}) - 1] = '\\0';\n"
        + tail
    )
    desc = (
        f"{fn}() copies its argument into the {size}-byte stack buffer {buf} "
        f"with strcpy and no length check, so any longer input overflows the "
        f"buffer. Use a bounded copy that leaves room for the terminator."
    )
    comment = (
        f"Replace strcpy with a bounded strncpy into {buf}\n"
        f"and NUL-terminate so long input cannot smash the stack."
    )
    return FunctionPair(vul, fix, desc, comment, template="unbounded_copy")


def _gen_off_by_one(rng: random.Random, fn: str) -> FunctionPair:
    arr = rng.choice(_PTR_NAMES)
    cnt = rng.choice(["count", "n", "total", "limit"])
    i = rng.choice(_IDX_NAMES)
    k = rng.randint(2, 9)
    body = f"        {arr}[{i}] = {arr}[{i}] * {k};\n"
    vul = (
        f"void {fn}(int *{arr}, int {cnt}) {{\n"
        f"    int {i} = 0;\n"
        f"    for ({i} = 0; {i} <= {cnt}; {i}++) {{\n{body}    }}\n}}\n"
    )
    fix = (
        f"void {fn}(int *{arr}, int {cnt}) {{\n"
        f"    int {i} = 0;\n"
        f"    for ({i} = 0; {i} < {cnt}; {i}++) {{\n{body}    }}\n}}\n"
    )
    desc = (
        f"The loop in {fn}() runs while {i} <= {cnt}, writing one element "
        f"past the end of {arr}, which holds only {cnt} entries. The loop "
        f"bound must be strict."
    )
    comment = f"Use {i} < {cnt} as the loop bound so the final\nwrite stays inside {arr}."
    return FunctionPair(vul, fix, desc, comment, template="off_by_one")


def _gen_null_deref(rng: random.Random, fn: str) -> FunctionPair:
    st = rng.choice(_STRUCT_NAMES)
    p = rng.choice(["p", "ptr", "obj", "cur"])
    fld = rng.choice(_FIELD_NAMES)
    k = rng.randint(2, 9)
    j = rng.randint(1, 9)
    core = f"    int v = {p}->{fld} * {k};\n    return v + {j};\n}}\n"
    vul = f"int {fn}(struct {st} *{p}) {{\n" + core
    fix = (
        f"int {fn}(struct {st} *{p}) {{\n"
        f"    if ({p} == NULL) {{\n        return -1;\n    }}\n" + core
    )
    desc = (
        f"{fn}() dereferences {p} without a NULL check, so passing a NULL "
        f"{st} pointer crashes the process. Guard the pointer before "
        f"reading {fld}."
    )
    comment = f"Return early when {p} is NULL instead of\ndereferencing it unconditionally."
    return FunctionPair(vul, fix, desc, comment, template="null_deref")


_GENERATORS = {
    "unbounded_copy": _gen_unbounded_copy,
    "off_by_one": _gen_off_by_one,
    "null_deref": _gen_null_deref,
}


def synthesize_pairs(n: int, seed: int) -> list[FunctionPair]:
    """Generate n vulnerability/repair pairs, cycling through the three
    templates with randomized names and constants. Deterministic in seed."""
    rng = random.Random(seed)
    pairs = []
    for idx in range(n):
        template = TEMPLATES[idx % len(TEMPLATES)]
        fn = f"{rng.choice(_VERBS)}_{rng.choice(_NOUNS)}{idx}"
        pair = _GENERATORS[template](rng, fn)
        pair.source_file = f"synthetic://{template}/{idx}"
        pair.line_start = 1
        pairs.append(pair)
    return pairs


def classify_template(code: str) -> str | None:
    """Ground-truth oracle for synthetic code: names the vulnerability
    template whose unfixed pattern the code exhibits, or None if the code
    shows no template defect (all repaired variants return None)."""
    if re.search(r"\bstrcpy\s*\(", code):
        return "unbounded_copy"
    if re.search(r"for\s*\([^;]*;[^;]*<=", code):
        return "off_by_one"
    if "->" in code and "== NULL" not in code:
        return "null_deref"
    return None
