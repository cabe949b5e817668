"""Run isolation: per-task workspaces, the script interpreter with a protected
kernel and resource budget, and the results-database reader/writer.

The interpreter runs in-process but honors the same observable contract as a
subprocess runner: every artifact lands strictly under the workspace root,
the log records each executed statement with its source line, and the final
log line is always ``STATUS: COMPLETED|FAILED|ABORTED``.
"""

from __future__ import annotations

import itertools
import json
import os
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from .ir import (AnalysisSpec, BoundaryCondition, Element, IRModel, Load,
                 Material, Node, Section)
from .simscript import (Analyze, Delete, ElementDef, End, Fix, LoadStmt,
                        MaterialDef, ModelBegin, NodeDef, ScriptParseError,
                        SectionDef, WorkspaceStmt, WriteResults,
                        SCRIPT_TO_KIND, _inside_workspace, _stmt_text,
                        parse_script)
from .solver import (AssemblyError, ModalResult, SingularSystemError,
                     StaticResult, TopoResult, UnsupportedOptimizationError,
                     build_dof_index, optimize_topology, solve_modal,
                     solve_static)
from .validation import check_l1

SCRIPT_FILENAME = "script.sim"
LOG_FILENAME = "run.log"

_alloc_counter = itertools.count(1)


class WorkspaceError(Exception):
    pass


class ResultsMissingError(Exception):
    pass


class ResultsCorruptError(Exception):
    pass


@dataclass(frozen=True)
class Workspace:
    root: Path
    task_id: str
    created_at: float


@dataclass(frozen=True)
class Limits:
    max_statements: int = 10_000
    max_solver_dofs: int = 3_000
    max_wall_time: float = 60.0

    def __post_init__(self):
        if min(self.max_statements, self.max_solver_dofs, self.max_wall_time) <= 0:
            raise ValueError("all limits must be positive")


@dataclass(frozen=True)
class RuntimeFault:
    line: int | None
    kind: str
    message: str


@dataclass(frozen=True)
class ExecutionOutcome:
    status: str  # COMPLETED | FAILED | ABORTED
    results_path: Path | None
    log: str
    runtime_error: RuntimeFault | None
    wall_time: float


def allocate_workspace(root_dir: str | Path, task_id: str) -> Workspace:
    """Create a fresh, empty, never-reused directory for one task run."""
    root_dir = Path(root_dir)
    if os.sep in task_id or task_id in ("", ".", ".."):
        raise WorkspaceError(f"invalid task id {task_id!r}")
    try:
        root_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise WorkspaceError(f"workspace root {root_dir} is not writable: {exc}") from None
    for _ in range(1_000_000):
        suffix = next(_alloc_counter)
        candidate = root_dir / f"{task_id}-{suffix:04d}"
        try:
            candidate.mkdir(exist_ok=False)
        except FileExistsError:
            continue
        except OSError as exc:
            raise WorkspaceError(f"cannot create workspace under {root_dir}: {exc}") from None
        return Workspace(root=candidate, task_id=task_id, created_at=time.time())
    raise WorkspaceError("workspace suffix space exhausted")


ResultSet = StaticResult | ModalResult | TopoResult


def _results_to_doc(rs: ResultSet) -> dict:
    if isinstance(rs, StaticResult):
        return {
            "result_kind": "static",
            "displacements": {str(k): list(v) for k, v in sorted(rs.displacements.items())},
            "reactions": {str(k): list(v) for k, v in sorted(rs.reactions.items())},
            "axial_force": {str(k): v for k, v in sorted(rs.axial_force.items())},
            "axial_stress": {str(k): v for k, v in sorted(rs.axial_stress.items())},
            "frame_end_forces": {str(k): list(v) for k, v in sorted(rs.frame_end_forces.items())},
            "equilibrium_residual": rs.equilibrium_residual,
        }
    if isinstance(rs, ModalResult):
        doc = {
            "result_kind": "modal",
            "frequencies_hz": list(rs.frequencies_hz),
            "mode_shapes": [{str(k): list(v) for k, v in sorted(shape.items())}
                            for shape in rs.mode_shapes],
        }
        if rs.note is not None:
            doc["note"] = rs.note
        return doc
    return {
        "result_kind": "topo",
        "areas": {str(k): v for k, v in sorted(rs.areas.items())},
        "compliance_history": list(rs.compliance_history),
        "final_volume_fraction": rs.final_volume_fraction,
    }


def write_results_file(rs: ResultSet, path: str | Path) -> None:
    Path(path).write_text(json.dumps(_results_to_doc(rs), indent=2) + "\n", encoding="utf-8")


def _triple(v, what: str) -> tuple[float, float, float]:
    if not isinstance(v, list) or len(v) != 3:
        raise ResultsCorruptError(f"{what} must be a 3-vector")
    return (float(v[0]), float(v[1]), float(v[2]))


def read_results(path: str | Path) -> ResultSet:
    """Load a results database; the ``result_kind`` tag selects the shape."""
    path = Path(path)
    if not path.exists():
        raise ResultsMissingError(str(path))
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ResultsCorruptError(f"{path}: {exc}") from None
    try:
        kind = doc["result_kind"]
        if kind == "static":
            return StaticResult(
                displacements={int(k): _triple(v, "displacement")
                               for k, v in doc["displacements"].items()},
                reactions={int(k): _triple(v, "reaction") for k, v in doc["reactions"].items()},
                axial_force={int(k): float(v) for k, v in doc["axial_force"].items()},
                axial_stress={int(k): float(v) for k, v in doc["axial_stress"].items()},
                frame_end_forces={int(k): tuple(float(x) for x in v)
                                  for k, v in doc["frame_end_forces"].items()},
                equilibrium_residual=float(doc["equilibrium_residual"]),
            )
        if kind == "modal":
            return ModalResult(
                frequencies_hz=tuple(float(v) for v in doc["frequencies_hz"]),
                mode_shapes=tuple({int(k): _triple(v, "mode shape")
                                   for k, v in shape.items()}
                                  for shape in doc["mode_shapes"]),
                note=doc.get("note"),
            )
        if kind == "topo":
            return TopoResult(
                areas={int(k): float(v) for k, v in doc["areas"].items()},
                compliance_history=tuple(float(v) for v in doc["compliance_history"]),
                final_volume_fraction=float(doc["final_volume_fraction"]),
            )
        raise ResultsCorruptError(f"unknown result kind {kind!r}")
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ResultsCorruptError(f"{path}: malformed results document: {exc}") from None


class _KernelProtection(Exception):
    pass


class _RuntimeStop(Exception):
    def __init__(self, kind: str, message: str):
        self.kind = kind
        self.message = message
        super().__init__(message)


class _ModelBuilder:
    """Mutable model under construction while the interpreter runs."""

    def __init__(self):
        self.begun = False
        self.nodes: dict[int, Node] = {}
        self.materials: dict[int, Material] = {}
        self.sections: dict[int, Section] = {}
        self.elements: dict[int, Element] = {}
        self.bcs: dict[int, BoundaryCondition] = {}
        self.loads: dict[int, Load] = {}

    def require_begun(self):
        if not self.begun:
            raise _RuntimeStop("state", "no active model: missing 'model begin'")

    def to_ir(self, analysis: AnalysisSpec) -> IRModel:
        return IRModel(
            nodes=tuple(sorted(self.nodes.values(), key=lambda n: n.id)),
            elements=tuple(sorted(self.elements.values(), key=lambda e: e.id)),
            materials=tuple(sorted(self.materials.values(), key=lambda m: m.id)),
            sections=tuple(sorted(self.sections.values(), key=lambda s: s.id)),
            boundary_conditions=tuple(sorted(self.bcs.values(), key=lambda b: b.node_id)),
            loads=tuple(sorted(self.loads.values(), key=lambda l: l.node_id)),
            analysis=analysis,
        )


def execute(script_text: str, workspace: Workspace, limits: Limits,
            modal_subdivisions: int = 4, mode: str = "inprocess") -> ExecutionOutcome:
    """Interpret a script inside its workspace under the resource budget.

    Errors never escape: parse and runtime faults yield a FAILED outcome,
    exceeded budgets yield ABORTED. The kernel protects the root model
    container even when preflight was bypassed. ``mode="subprocess"`` runs
    the same interpreter in a child OS process with the identical observable
    contract.
    """
    if mode == "subprocess":
        return _execute_subprocess(script_text, workspace, limits, modal_subdivisions)
    if mode != "inprocess":
        raise ValueError(f"unknown execution mode {mode!r}")
    start = time.monotonic()
    log_lines: list[str] = []
    ws_root = Path(workspace.root)
    (ws_root / SCRIPT_FILENAME).write_text(script_text, encoding="utf-8")

    def finish(status: str, results_path: Path | None,
               fault: RuntimeFault | None) -> ExecutionOutcome:
        log_lines.append(f"STATUS: {status}")
        log = "\n".join(log_lines) + "\n"
        (ws_root / LOG_FILENAME).write_text(log, encoding="utf-8")
        return ExecutionOutcome(status=status, results_path=results_path, log=log,
                                runtime_error=fault, wall_time=time.monotonic() - start)

    try:
        ast = parse_script(script_text)
    except ScriptParseError as exc:
        log_lines.append(f"parse error at line {exc.line}: {exc.reason}"
                         + (f" ({exc.token!r})" if exc.token else ""))
        return finish("FAILED", None, RuntimeFault(exc.line, "parse", str(exc)))

    builder = _ModelBuilder()
    results: ResultSet | None = None
    results_path: Path | None = None
    analyzed = False
    wrote = False
    ended = False
    executed = 0

    def resolve_path(p: str) -> Path:
        if not _inside_workspace(ws_root, p):
            raise _RuntimeStop("isolation", f"artifact path escapes workspace: {p}")
        return Path(p) if os.path.isabs(p) else ws_root / p

    for stmt in ast.statements:
        if executed >= limits.max_statements:
            log_lines.append(f"abort: statement budget ({limits.max_statements}) exceeded")
            return finish("ABORTED", None, None)
        if time.monotonic() - start > limits.max_wall_time:
            log_lines.append(f"abort: wall time budget ({limits.max_wall_time}s) exceeded")
            return finish("ABORTED", None, None)
        executed += 1
        log_lines.append(f"[line {stmt.line}] {_stmt_text(stmt)}")
        try:
            if isinstance(stmt, ModelBegin):
                builder.begun = True
            elif isinstance(stmt, NodeDef):
                builder.require_begun()
                builder.nodes[stmt.node_id] = Node(stmt.node_id, stmt.x, stmt.y)
            elif isinstance(stmt, MaterialDef):
                builder.require_begun()
                builder.materials[stmt.material_id] = Material(
                    stmt.material_id, stmt.youngs_modulus, stmt.poisson_ratio, stmt.density)
            elif isinstance(stmt, SectionDef):
                builder.require_begun()
                builder.sections[stmt.section_id] = Section(
                    stmt.section_id, stmt.material_id, stmt.area, stmt.moment_of_inertia)
            elif isinstance(stmt, ElementDef):
                builder.require_begun()
                builder.elements[stmt.element_id] = Element(
                    stmt.element_id, SCRIPT_TO_KIND[stmt.kind], (stmt.n1, stmt.n2),
                    stmt.section_id)
            elif isinstance(stmt, Fix):
                builder.require_begun()
                prev = builder.bcs.get(stmt.node_id)
                dofs = frozenset(stmt.dofs) | (prev.constrained_dofs if prev else frozenset())
                builder.bcs[stmt.node_id] = BoundaryCondition(stmt.node_id, dofs)
            elif isinstance(stmt, LoadStmt):
                builder.require_begun()
                prev = builder.loads.get(stmt.node_id)
                builder.loads[stmt.node_id] = Load(
                    stmt.node_id,
                    stmt.fx + (prev.fx if prev else 0.0),
                    stmt.fy + (prev.fy if prev else 0.0),
                    stmt.mz + (prev.mz if prev else 0.0))
            elif isinstance(stmt, WorkspaceStmt):
                resolve_path(stmt.path)  # containment check only
            elif isinstance(stmt, Delete):
                builder.require_begun()
                if stmt.target == ("model", "root"):
                    raise _KernelProtection()
                kind, raw_id = stmt.target
                target_id = int(raw_id)
                table = builder.elements if kind == "element" else builder.nodes
                if target_id not in table:
                    raise _RuntimeStop("state", f"cannot delete unknown {kind} {target_id}")
                del table[target_id]
            elif isinstance(stmt, Analyze):
                builder.require_begun()
                if stmt.kind == "static":
                    spec = AnalysisSpec(mode="static")
                elif stmt.kind == "modal":
                    spec = AnalysisSpec(mode="modal", modal_count=stmt.count)
                else:
                    spec = AnalysisSpec(mode="topology_optimization",
                                        opt_volume_fraction=stmt.volfrac,
                                        opt_max_iterations=stmt.iters)
                model = builder.to_ir(spec)
                schema_findings = check_l1(model)
                if schema_findings:
                    raise _RuntimeStop("model", f"model rejected: {schema_findings[0].message}")
                n_dofs = len(build_dof_index(model))
                if n_dofs > limits.max_solver_dofs:
                    log_lines.append(f"abort: solver budget exceeded "
                                     f"({n_dofs} > {limits.max_solver_dofs} dofs)")
                    return finish("ABORTED", None, None)
                if stmt.kind == "static":
                    results = solve_static(model)
                elif stmt.kind == "modal":
                    results = solve_modal(model, stmt.count or 1,
                                          subdivisions=modal_subdivisions)
                else:
                    results = optimize_topology(model, stmt.volfrac, stmt.iters)
                analyzed = True
                log_lines.append(f"    analysis complete ({n_dofs} dofs)")
            elif isinstance(stmt, WriteResults):
                if results is None:
                    raise _RuntimeStop("state", "no analysis results available to write")
                target = resolve_path(stmt.path)
                target.parent.mkdir(parents=True, exist_ok=True)
                write_results_file(results, target)
                results_path = target
                wrote = True
            elif isinstance(stmt, End):
                ended = True
                break
        except _KernelProtection:
            fault = RuntimeFault(stmt.line, "kernel-protection",
                                 "kernel protection: deletion of protected root container")
            log_lines.append(f"    ERROR {fault.message}")
            return finish("FAILED", None, fault)
        except _RuntimeStop as exc:
            fault = RuntimeFault(stmt.line, exc.kind, exc.message)
            log_lines.append(f"    ERROR {fault.message}")
            return finish("FAILED", None, fault)
        except (AssemblyError, SingularSystemError, UnsupportedOptimizationError) as exc:
            fault = RuntimeFault(stmt.line, "solver", str(exc))
            log_lines.append(f"    ERROR solver: {exc}")
            return finish("FAILED", None, fault)

    last_line = ast.statements[min(executed, len(ast.statements)) - 1].line
    if not ended:
        fault = RuntimeFault(last_line, "lifecycle",
                             "no termination signal: script ran out without an end statement")
        log_lines.append(f"    ERROR {fault.message}")
        return finish("FAILED", None, fault)
    if not analyzed:
        fault = RuntimeFault(last_line, "lifecycle",
                             "idle run, no execution trigger: analyze statement absent")
        log_lines.append(f"    ERROR {fault.message}")
        return finish("FAILED", None, fault)
    if not wrote or results_path is None:
        fault = RuntimeFault(last_line, "lifecycle",
                             "no results persistence: write_results statement absent")
        log_lines.append(f"    ERROR {fault.message}")
        return finish("FAILED", None, fault)
    return finish("COMPLETED", results_path, None)


def _execute_subprocess(script_text: str, workspace: Workspace, limits: Limits,
                        modal_subdivisions: int) -> ExecutionOutcome:
    """Run the interpreter in a child OS process; same artifacts and outcome."""
    ws_root = Path(workspace.root)
    (ws_root / SCRIPT_FILENAME).write_text(script_text, encoding="utf-8")
    cmd = [sys.executable, "-m", "vfea.sandbox", str(ws_root), workspace.task_id,
           str(limits.max_statements), str(limits.max_solver_dofs),
           str(limits.max_wall_time), str(modal_subdivisions)]
    start = time.monotonic()
    try:
        proc = subprocess.run(cmd, capture_output=True, text=True, check=False,
                              timeout=limits.max_wall_time + 30.0)
    except subprocess.TimeoutExpired:
        log = "abort: child process exceeded the wall time budget\nSTATUS: ABORTED\n"
        (ws_root / LOG_FILENAME).write_text(log, encoding="utf-8")
        return ExecutionOutcome(status="ABORTED", results_path=None, log=log,
                                runtime_error=None,
                                wall_time=time.monotonic() - start)
    if proc.returncode != 0:
        raise RuntimeError(f"sandbox child process failed: {proc.stderr.strip()}")
    doc = json.loads(proc.stdout)
    fault = None
    if doc["runtime_error"] is not None:
        fault = RuntimeFault(line=doc["runtime_error"]["line"],
                             kind=doc["runtime_error"]["kind"],
                             message=doc["runtime_error"]["message"])
    return ExecutionOutcome(
        status=doc["status"],
        results_path=Path(doc["results_path"]) if doc["results_path"] else None,
        log=doc["log"], runtime_error=fault, wall_time=doc["wall_time"])


def _child_main(argv: list[str]) -> int:
    ws_root, task_id = Path(argv[0]), argv[1]
    limits = Limits(max_statements=int(argv[2]), max_solver_dofs=int(argv[3]),
                    max_wall_time=float(argv[4]))
    script_text = (ws_root / SCRIPT_FILENAME).read_text(encoding="utf-8")
    ws = Workspace(root=ws_root, task_id=task_id, created_at=time.time())
    out = execute(script_text, ws, limits, modal_subdivisions=int(argv[5]))
    print(json.dumps({
        "status": out.status,
        "results_path": str(out.results_path) if out.results_path else None,
        "log": out.log,
        "runtime_error": None if out.runtime_error is None else {
            "line": out.runtime_error.line, "kind": out.runtime_error.kind,
            "message": out.runtime_error.message},
        "wall_time": out.wall_time,
    }))
    return 0


if __name__ == "__main__":
    sys.exit(_child_main(sys.argv[1:]))
