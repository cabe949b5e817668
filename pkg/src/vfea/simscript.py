"""Simulation script language: parser, AST, preflight checks, IR lowering.

Grammar (docs/simscript.md): one statement per line, whitespace-separated
tokens, ``#`` starts a comment. Unknown statements are parse errors, which
is how hallucinated constructs surface before execution.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from .ir import DOF_ORDER, IRModel, canonicalize

KIND_TO_SCRIPT = {"truss_bar": "truss", "frame_beam": "frame"}
SCRIPT_TO_KIND = {v: k for k, v in KIND_TO_SCRIPT.items()}

ANALYZE_KINDS = ("static", "modal", "topopt")
DELETE_TARGETS = ("model", "element", "node")
PROTECTED_ROOT = ("model", "root")

DEFAULT_VOLFRAC = 0.5   # conservative volume-constraint prior
DEFAULT_OPT_ITERS = 50
RESULTS_FILENAME = "results.res"


class ScriptParseError(Exception):
    def __init__(self, line: int, token: str, reason: str):
        self.line = line
        self.token = token
        self.reason = reason
        super().__init__(f"line {line}: {reason}" + (f" ({token!r})" if token else ""))


class LoweringError(Exception):
    """Model feature the template engine cannot express (unreachable after audit)."""


@dataclass(frozen=True)
class Statement:
    line: int


@dataclass(frozen=True)
class ModelBegin(Statement):
    pass


@dataclass(frozen=True)
class NodeDef(Statement):
    node_id: int
    x: float
    y: float


@dataclass(frozen=True)
class MaterialDef(Statement):
    material_id: int
    youngs_modulus: float
    poisson_ratio: float
    density: float


@dataclass(frozen=True)
class SectionDef(Statement):
    section_id: int
    material_id: int
    area: float
    moment_of_inertia: float | None


@dataclass(frozen=True)
class ElementDef(Statement):
    element_id: int
    kind: str  # "truss" | "frame"
    n1: int
    n2: int
    section_id: int


@dataclass(frozen=True)
class Fix(Statement):
    node_id: int
    dofs: tuple[str, ...]


@dataclass(frozen=True)
class LoadStmt(Statement):
    node_id: int
    fx: float
    fy: float
    mz: float


@dataclass(frozen=True)
class WorkspaceStmt(Statement):
    path: str


@dataclass(frozen=True)
class Analyze(Statement):
    kind: str
    count: int | None = None
    volfrac: float | None = None
    iters: int | None = None


@dataclass(frozen=True)
class WriteResults(Statement):
    path: str


@dataclass(frozen=True)
class Delete(Statement):
    target: tuple[str, ...]


@dataclass(frozen=True)
class End(Statement):
    pass


@dataclass(frozen=True)
class ScriptAST:
    statements: tuple[Statement, ...]


@dataclass(frozen=True)
class PreflightViolation:
    kind: str  # lifecycle | safety | isolation
    line: int | None
    message: str


def _int(tok: str, line: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise ScriptParseError(line, tok, "expected an integer") from None


def _float(tok: str, line: int) -> float:
    try:
        return float(tok)
    except ValueError:
        raise ScriptParseError(line, tok, "expected a number") from None


def _arity(tokens: list[str], n: int, line: int, stmt: str):
    if len(tokens) != n:
        raise ScriptParseError(line, " ".join(tokens),
                               f"'{stmt}' takes {n - 1} arguments, got {len(tokens) - 1}")


def parse_script(text: str) -> ScriptAST:
    statements: list[Statement] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        code = raw.split("#", 1)[0].strip()
        if not code:
            continue
        toks = code.split()
        head = toks[0]
        if head == "model":
            if len(toks) != 2 or toks[1] != "begin":
                raise ScriptParseError(lineno, code, "unknown statement")
            statements.append(ModelBegin(lineno))
        elif head == "node":
            _arity(toks, 4, lineno, "node")
            statements.append(NodeDef(lineno, _int(toks[1], lineno),
                                      _float(toks[2], lineno), _float(toks[3], lineno)))
        elif head == "material":
            _arity(toks, 5, lineno, "material")
            statements.append(MaterialDef(lineno, _int(toks[1], lineno), _float(toks[2], lineno),
                                          _float(toks[3], lineno), _float(toks[4], lineno)))
        elif head == "section":
            if len(toks) not in (4, 5):
                raise ScriptParseError(lineno, code, "'section' takes 3 or 4 arguments")
            inertia = _float(toks[4], lineno) if len(toks) == 5 else None
            statements.append(SectionDef(lineno, _int(toks[1], lineno), _int(toks[2], lineno),
                                         _float(toks[3], lineno), inertia))
        elif head == "element":
            _arity(toks, 6, lineno, "element")
            if toks[2] not in SCRIPT_TO_KIND:
                raise ScriptParseError(lineno, toks[2], "unknown element kind")
            statements.append(ElementDef(lineno, _int(toks[1], lineno), toks[2],
                                         _int(toks[3], lineno), _int(toks[4], lineno),
                                         _int(toks[5], lineno)))
        elif head == "fix":
            _arity(toks, 3, lineno, "fix")
            dofs = tuple(toks[2].split(","))
            for d in dofs:
                if d not in DOF_ORDER:
                    raise ScriptParseError(lineno, d, "unknown dof (expected ux, uy or rz)")
            statements.append(Fix(lineno, _int(toks[1], lineno), dofs))
        elif head == "load":
            _arity(toks, 5, lineno, "load")
            statements.append(LoadStmt(lineno, _int(toks[1], lineno), _float(toks[2], lineno),
                                       _float(toks[3], lineno), _float(toks[4], lineno)))
        elif head == "workspace":
            _arity(toks, 2, lineno, "workspace")
            statements.append(WorkspaceStmt(lineno, toks[1]))
        elif head == "analyze":
            if len(toks) < 2 or toks[1] not in ANALYZE_KINDS:
                raise ScriptParseError(lineno, code, "unknown analysis kind")
            if toks[1] == "static":
                _arity(toks, 2, lineno, "analyze static")
                statements.append(Analyze(lineno, "static"))
            elif toks[1] == "modal":
                if len(toks) != 4 or toks[2] != "count":
                    raise ScriptParseError(lineno, code, "expected 'analyze modal count <n>'")
                statements.append(Analyze(lineno, "modal", count=_int(toks[3], lineno)))
            else:
                if len(toks) != 6 or toks[2] != "volfrac" or toks[4] != "iters":
                    raise ScriptParseError(lineno, code,
                                           "expected 'analyze topopt volfrac <v> iters <n>'")
                statements.append(Analyze(lineno, "topopt", volfrac=_float(toks[3], lineno),
                                          iters=_int(toks[5], lineno)))
        elif head == "write_results":
            _arity(toks, 2, lineno, "write_results")
            statements.append(WriteResults(lineno, toks[1]))
        elif head == "delete":
            if len(toks) != 3 or toks[1] not in DELETE_TARGETS:
                raise ScriptParseError(lineno, code, "unknown delete target")
            if toks[1] == "model":
                if toks[2] != "root":
                    raise ScriptParseError(lineno, code, "unknown delete target")
                statements.append(Delete(lineno, ("model", "root")))
            else:
                _int(toks[2], lineno)
                statements.append(Delete(lineno, (toks[1], toks[2])))
        elif head == "end":
            _arity(toks, 1, lineno, "end")
            statements.append(End(lineno))
        else:
            raise ScriptParseError(lineno, head, "unknown statement")
    if not statements:
        raise ScriptParseError(0, "", "empty script")
    return ScriptAST(tuple(statements))


def _stmt_text(s: Statement) -> str:
    if isinstance(s, ModelBegin):
        return "model begin"
    if isinstance(s, NodeDef):
        return f"node {s.node_id} {s.x!r} {s.y!r}"
    if isinstance(s, MaterialDef):
        return (f"material {s.material_id} {s.youngs_modulus!r} "
                f"{s.poisson_ratio!r} {s.density!r}")
    if isinstance(s, SectionDef):
        base = f"section {s.section_id} {s.material_id} {s.area!r}"
        return base if s.moment_of_inertia is None else f"{base} {s.moment_of_inertia!r}"
    if isinstance(s, ElementDef):
        return f"element {s.element_id} {s.kind} {s.n1} {s.n2} {s.section_id}"
    if isinstance(s, Fix):
        return f"fix {s.node_id} {','.join(s.dofs)}"
    if isinstance(s, LoadStmt):
        return f"load {s.node_id} {s.fx!r} {s.fy!r} {s.mz!r}"
    if isinstance(s, WorkspaceStmt):
        return f"workspace {s.path}"
    if isinstance(s, Analyze):
        if s.kind == "static":
            return "analyze static"
        if s.kind == "modal":
            return f"analyze modal count {s.count}"
        return f"analyze topopt volfrac {s.volfrac!r} iters {s.iters}"
    if isinstance(s, WriteResults):
        return f"write_results {s.path}"
    if isinstance(s, Delete):
        return f"delete {' '.join(s.target)}"
    if isinstance(s, End):
        return "end"
    raise LoweringError(f"unprintable statement {s!r}")


def print_script(ast: ScriptAST) -> str:
    """Canonical text rendering; parse_script(print_script(a)) reproduces a
    up to line numbering."""
    return "\n".join(_stmt_text(s) for s in ast.statements) + "\n"


def _inside_workspace(root: str | Path, candidate: str) -> bool:
    # lexical containment; symlinks in existing prefixes are resolved first
    root_real = os.path.realpath(str(root))
    cand = candidate if os.path.isabs(candidate) else os.path.join(root_real, candidate)
    cand_real = os.path.realpath(cand)
    return cand_real == root_real or cand_real.startswith(root_real + os.sep)


def preflight(ast: ScriptAST, workspace_root: str | Path) -> list[PreflightViolation]:
    """Static verification: lifecycle integrity, kernel safety, path isolation."""
    out: list[PreflightViolation] = []
    has_analyze = any(isinstance(s, Analyze) for s in ast.statements)
    has_write = any(isinstance(s, WriteResults) for s in ast.statements)
    has_end = any(isinstance(s, End) for s in ast.statements)
    if not has_analyze:
        out.append(PreflightViolation("lifecycle", None,
                                      "no execution trigger: analyze statement absent"))
    if not has_write:
        out.append(PreflightViolation("lifecycle", None,
                                      "no results persistence: write_results statement absent"))
    if not has_end:
        out.append(PreflightViolation("lifecycle", None,
                                      "no termination signal: end statement absent"))
    for s in ast.statements:
        if isinstance(s, Delete) and s.target == PROTECTED_ROOT:
            out.append(PreflightViolation("safety", s.line,
                                          "unsafe kernel operation: deletion of protected "
                                          "root container"))
        if isinstance(s, (WriteResults, WorkspaceStmt)):
            if not _inside_workspace(workspace_root, s.path):
                out.append(PreflightViolation("isolation", s.line,
                                              f"artifact path escapes workspace: {s.path}"))
    return out


def lower_ir(model: IRModel, workspace: str | Path) -> str:
    """Rule-based lowering of an audited model to a guaranteed-executable script.

    Output is byte-stable and uses workspace-relative artifact paths, so the
    same script runs in any allocated workspace; ``workspace`` is the root the
    guarantee is stated against.
    """
    m = canonicalize(model)
    lines: list[str] = ["model begin"]
    for mat in m.materials:
        lines.append(_stmt_text(MaterialDef(0, mat.id, mat.youngs_modulus,
                                            mat.poisson_ratio, mat.density)))
    for sec in m.sections:
        lines.append(_stmt_text(SectionDef(0, sec.id, sec.material_id, sec.area,
                                           sec.moment_of_inertia)))
    for n in m.nodes:
        lines.append(_stmt_text(NodeDef(0, n.id, n.x, n.y)))
    for e in m.elements:
        if e.kind not in KIND_TO_SCRIPT:
            raise LoweringError(f"element kind {e.kind!r} has no script form")
        lines.append(_stmt_text(ElementDef(0, e.id, KIND_TO_SCRIPT[e.kind],
                                           e.node_ids[0], e.node_ids[1], e.section_id)))
    for b in m.boundary_conditions:
        lines.append(_stmt_text(Fix(0, b.node_id, b.sorted_dofs())))
    for l in m.loads:
        lines.append(_stmt_text(LoadStmt(0, l.node_id, l.fx, l.fy, l.mz)))

    a = m.analysis
    if a.mode == "static":
        lines.append("analyze static")
    elif a.mode == "modal":
        if a.modal_count is None:
            raise LoweringError("modal analysis without modal_count")
        lines.append(f"analyze modal count {a.modal_count}")
    elif a.mode == "topology_optimization":
        volfrac = a.opt_volume_fraction if a.opt_volume_fraction is not None else DEFAULT_VOLFRAC
        iters = a.opt_max_iterations if a.opt_max_iterations is not None else DEFAULT_OPT_ITERS
        lines.append(f"analyze topopt volfrac {volfrac!r} iters {iters}")
    else:
        raise LoweringError(f"analysis mode {a.mode!r} has no script form")
    lines.append(f"write_results {RESULTS_FILENAME}")
    lines.append("end")
    return "\n".join(lines) + "\n"
