"""Reflexive script synthesis: generate, preflight, execute, reflect, repair,
and hand over to the deterministic lowering when the retry budget runs out.

Generators sit behind one two-operation interface (generate/repair); the
shipped implementations are the perfect mock (wraps the lowering), fault
injectors for each failure family, and an HTTP client for an external
generation service.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from .ir import AnalysisSpec, IRModel, serialize
from .memory import (ExperienceBuffer, ExperienceRecord, classify_error,
                     compute_signature)
from .sandbox import (ExecutionOutcome, Limits, ResultsCorruptError,
                      ResultsMissingError, ResultSet, allocate_workspace,
                      execute, read_results)
from .simscript import (PreflightViolation, ScriptParseError, lower_ir,
                        parse_script, preflight)
from .solver import ModalResult, StaticResult, TopoResult

DEFAULT_RETRIEVAL_K = 3
STATIC_RESIDUAL_LIMIT = 1e-8
VOLUME_SLACK = 1e-6
EXCERPT_CHARS = 400

LESSON_TEXT = {
    "parse": "use only statements documented for the simulation language; "
             "unknown statements fail to parse",
    "lifecycle": "every script must contain an analyze execution trigger, a "
                 "write_results statement and an end termination signal",
    "safety": "never delete the protected root model container",
    "kernel-protection": "never delete the protected root model container",
    "isolation": "write all artifacts to paths inside the allocated task workspace",
    "solver": "ensure the model is fully restrained and well posed before analysis",
    "state": "declare the full model before analysis and write results only "
             "after a completed analysis",
    "model": "declare the full model before analysis and write results only "
             "after a completed analysis",
}
_FALLBACK_LESSON = "review the execution log and correct the failing statement"


class ConfigError(Exception):
    pass


class SynthesisExhaustedError(Exception):
    def __init__(self, trace: "SynthesisTrace"):
        self.trace = trace
        super().__init__(f"retry budget exhausted after {len(trace.attempts)} attempts")


class FallbackFailureError(Exception):
    """The guaranteed-executable path failed; this indicates a kernel bug."""


class Generator(Protocol):
    def generate(self, model: IRModel, memory_context: list[ExperienceRecord]) -> str: ...

    def repair(self, script: str, context: "DebugContext") -> str: ...


@dataclass(frozen=True)
class ErrorSummary:
    category: str
    message: str
    line: int | None


@dataclass(frozen=True)
class LessonEntry:
    source: str  # reflection | memory
    text: str


@dataclass(frozen=True)
class DebugContext:
    error_summary: ErrorSummary
    raw_log: str
    lessons: tuple[LessonEntry, ...]

    def lesson_texts(self) -> list[str]:
        return [l.text for l in self.lessons]


@dataclass
class Attempt:
    k: int
    script: str
    parse_error: str | None = None
    preflight_violations: tuple[PreflightViolation, ...] = ()
    outcome: ExecutionOutcome | None = None


@dataclass
class SynthesisTrace:
    attempts: list[Attempt] = field(default_factory=list)
    fallback_used: bool = False
    lessons_accumulated: list[str] = field(default_factory=list)


def reflect(violations_or_error) -> list[str]:
    """One imperative lesson per distinct violation kind."""
    kinds: list[str] = []
    if isinstance(violations_or_error, ScriptParseError):
        kinds = ["parse"]
    elif isinstance(violations_or_error, (list, tuple)):
        for v in violations_or_error:
            if v.kind not in kinds:
                kinds.append(v.kind)
    else:  # RuntimeFault
        kinds = [violations_or_error.kind]
    return [LESSON_TEXT.get(kind, _FALLBACK_LESSON) for kind in kinds]


def compose_debug_context(error_message: str, error_line: int | None, log: str,
                          retrieved: list[ExperienceRecord],
                          reflections: list[str]) -> DebugContext:
    """Assemble the composite repair context: structured summary, the raw
    numbered log, and lessons from both reflection and memory (memory wins
    on duplicate text)."""
    sig = classify_error(error_message)
    summary = ErrorSummary(category=sig.category, message=error_message,
                           line=error_line if error_line is not None else sig.line)
    lessons: dict[str, LessonEntry] = {}
    for text in reflections:
        lessons[text] = LessonEntry("reflection", text)
    for rec in retrieved:
        if rec.lesson:
            lessons[rec.lesson] = LessonEntry("memory", rec.lesson)
    return DebugContext(error_summary=summary, raw_log=log, lessons=tuple(lessons.values()))


def _values_finite(rs: ResultSet) -> bool:
    import math

    def ok(*vals: float) -> bool:
        return all(math.isfinite(v) for v in vals)

    if isinstance(rs, StaticResult):
        return (all(ok(*v) for v in rs.displacements.values())
                and all(ok(*v) for v in rs.reactions.values())
                and all(ok(v) for v in rs.axial_force.values())
                and all(ok(v) for v in rs.axial_stress.values())
                and all(ok(*v) for v in rs.frame_end_forces.values())
                and ok(rs.equilibrium_residual))
    if isinstance(rs, ModalResult):
        return (ok(*rs.frequencies_hz)
                and all(ok(*v) for shape in rs.mode_shapes for v in shape.values()))
    return (all(ok(v) for v in rs.areas.values())
            and ok(*rs.compliance_history) and ok(rs.final_volume_fraction))


def verify_results(outcome: ExecutionOutcome, analysis: AnalysisSpec) -> bool:
    """Physical acceptance of a completed run: readable results of the right
    kind, finite values, and the mode-specific health checks."""
    if outcome.status != "COMPLETED" or outcome.results_path is None:
        return False
    try:
        rs = read_results(outcome.results_path)
    except (ResultsMissingError, ResultsCorruptError):
        return False
    expected = {"static": StaticResult, "modal": ModalResult,
                "topology_optimization": TopoResult}[analysis.mode]
    if not isinstance(rs, expected):
        return False
    if not _values_finite(rs):
        return False
    if isinstance(rs, StaticResult):
        return rs.equilibrium_residual <= STATIC_RESIDUAL_LIMIT
    if isinstance(rs, ModalResult):
        freqs = rs.frequencies_hz
        return (len(freqs) > 0 and all(f > 0 for f in freqs)
                and all(a <= b for a, b in zip(freqs, freqs[1:])))
    volfrac = analysis.opt_volume_fraction if analysis.opt_volume_fraction is not None else 0.5
    return rs.final_volume_fraction <= volfrac + VOLUME_SLACK


def _excerpt(script: str) -> str:
    return script[:EXCERPT_CHARS]


def synthesize(model: IRModel, K: int, buffer: ExperienceBuffer, generator: Generator,
               workspace_root: str | Path, fallback_enabled: bool = True,
               limits: Limits | None = None, task_id: str = "task",
               retrieval_k: int = DEFAULT_RETRIEVAL_K, modal_subdivisions: int = 4,
               execution_mode: str = "inprocess") -> tuple[str, ResultSet, SynthesisTrace]:
    """Run the reflexive synthesis loop for one audited model.

    Attempts k = 0..K: preflight-gate the candidate script (static violations
    are reflected into lessons and repaired without touching the sandbox),
    execute the survivors in a fresh workspace, and on verified success index
    the script into the replay buffer. When the budget is exhausted the
    deterministic lowering takes over (if enabled); its output is
    guaranteed-executable, so a failure there raises FallbackFailureError.
    """
    if K < 0:
        raise ConfigError("retry budget must be >= 0")
    limits = limits or Limits()
    trace = SynthesisTrace()
    sig = compute_signature(model)

    def accumulate(lessons: list[str]):
        for text in lessons:
            if text not in trace.lessons_accumulated:
                trace.lessons_accumulated.append(text)

    script = generator.generate(model, buffer.retrieve(sig, None, retrieval_k))

    for k in range(K + 1):
        attempt = Attempt(k=k, script=script)
        trace.attempts.append(attempt)

        try:
            ast = parse_script(script)
            violations = tuple(preflight(ast, workspace_root))
        except ScriptParseError as exc:
            attempt.parse_error = str(exc)
            reflections = reflect(exc)
            accumulate(reflections)
            ctx = compose_debug_context(str(exc), exc.line, f"preflight: {exc}",
                                        buffer.retrieve(sig, classify_error(str(exc)),
                                                        retrieval_k),
                                        reflections)
            script = generator.repair(script, ctx)
            continue
        if violations:
            attempt.preflight_violations = violations
            reflections = reflect(list(violations))
            accumulate(reflections)
            message = "; ".join(v.message for v in violations)
            log = "\n".join(f"preflight[{v.kind}]"
                            + (f" line {v.line}" if v.line is not None else "")
                            + f": {v.message}" for v in violations)
            ctx = compose_debug_context(message, violations[0].line, log,
                                        buffer.retrieve(sig, classify_error(message),
                                                        retrieval_k),
                                        reflections)
            script = generator.repair(script, ctx)
            continue

        workspace = allocate_workspace(workspace_root, task_id)
        outcome = execute(script, workspace, limits,
                          modal_subdivisions=modal_subdivisions, mode=execution_mode)
        attempt.outcome = outcome

        if outcome.status == "COMPLETED" and verify_results(outcome, model.analysis):
            buffer.record(ExperienceRecord(
                signature=sig, error=None,
                lesson=f"verified {model.analysis.mode} script for this structure family",
                script_excerpt=_excerpt(script), outcome="success", created_at=time.time()))
            return script, read_results(outcome.results_path), trace

        if outcome.runtime_error is not None:
            message = outcome.runtime_error.message
            line = outcome.runtime_error.line
        else:
            message = f"execution {outcome.status.lower()} without readable results"
            line = None
        err_sig = classify_error(message)
        retrieved = buffer.retrieve(sig, err_sig, retrieval_k)
        reflections = reflect(outcome.runtime_error) if outcome.runtime_error else \
            [_FALLBACK_LESSON]
        ctx = compose_debug_context(message, line, outcome.log, retrieved, reflections)
        accumulate(ctx.lesson_texts())
        buffer.record(ExperienceRecord(
            signature=sig, error=err_sig,
            lesson=reflections[0], script_excerpt=_excerpt(script),
            outcome="failure", created_at=time.time()))
        script = generator.repair(script, ctx)

    if not fallback_enabled:
        raise SynthesisExhaustedError(trace)

    fallback_script = lower_ir(model, workspace_root)
    trace.fallback_used = True
    trace.attempts.append(Attempt(k=K + 1, script=fallback_script))
    workspace = allocate_workspace(workspace_root, task_id)
    outcome = execute(fallback_script, workspace, limits,
                      modal_subdivisions=modal_subdivisions, mode=execution_mode)
    trace.attempts[-1].outcome = outcome
    if outcome.status != "COMPLETED" or not verify_results(outcome, model.analysis):
        raise FallbackFailureError(
            f"deterministic fallback failed with status {outcome.status}: "
            f"{outcome.runtime_error.message if outcome.runtime_error else 'unverified results'}")
    return fallback_script, read_results(outcome.results_path), trace


# --- generator implementations ---------------------------------------------


class PerfectGenerator:
    """Wraps the deterministic lowering; generation is always correct."""

    def generate(self, model: IRModel, memory_context: list[ExperienceRecord]) -> str:
        return lower_ir(model, Path("."))

    def repair(self, script: str, context: DebugContext) -> str:
        return script


_FAULT_LESSON_MARKERS = {
    "type_i": ("analyze", "execution trigger"),
    "type_ii": ("unknown statement", "documented"),
    "type_iii": ("root", "delete"),
}


class FaultyGenerator:
    """Injects one failure family into otherwise-correct scripts.

    On repair the fault is removed iff a lesson matching it is present in the
    debug context; stubborn variants never heed lessons, which is how the
    handover path gets exercised.
    """

    def __init__(self, fault: str, stubborn: bool = False):
        if fault not in _FAULT_LESSON_MARKERS:
            raise ConfigError(f"unknown fault kind {fault!r}")
        self.fault = fault
        self.stubborn = stubborn
        self._clean: str | None = None

    def _inject(self, script: str) -> str:
        lines = script.splitlines()
        if self.fault == "type_i":
            lines = [l for l in lines if not l.startswith("analyze ")]
        elif self.fault == "type_ii":
            lines.insert(1, "mesh_edges part1")
        else:
            lines.insert(1, "delete model root")
        return "\n".join(lines) + "\n"

    def generate(self, model: IRModel, memory_context: list[ExperienceRecord]) -> str:
        self._clean = lower_ir(model, Path("."))
        return self._inject(self._clean)

    def repair(self, script: str, context: DebugContext) -> str:
        if self.stubborn or self._clean is None:
            return script
        markers = _FAULT_LESSON_MARKERS[self.fault]
        for lesson in context.lesson_texts():
            low = lesson.lower()
            if any(m in low for m in markers):
                return self._clean
        return script


class ExternalGenerator:
    """HTTP client for an external generation endpoint.

    Request body: {"ir_document": str, "memory_lessons": [str],
    "debug_context": null | {"error": {...}, "raw_log": str,
    "lessons": [str], "script": str}}. Response body: {"script": str}.
    """

    def __init__(self, endpoint: str, timeout: float = 30.0, retries: int = 2):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self._last_model: IRModel | None = None

    def _post(self, body: dict) -> str:
        import requests

        last_exc: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                resp = requests.post(self.endpoint, json=body, timeout=self.timeout)
                resp.raise_for_status()
                payload = resp.json()
                if not isinstance(payload, dict) or "script" not in payload:
                    raise ConfigError("external generator response missing 'script'")
                return str(payload["script"])
            except ConfigError:
                raise
            except Exception as exc:  # noqa: BLE001 - network layer
                last_exc = exc
        raise ConfigError(f"external generator unreachable at {self.endpoint}: {last_exc}")

    def generate(self, model: IRModel, memory_context: list[ExperienceRecord]) -> str:
        self._last_model = model
        return self._post({
            "ir_document": serialize(model),
            "memory_lessons": [r.lesson for r in memory_context if r.lesson],
            "debug_context": None,
        })

    def repair(self, script: str, context: DebugContext) -> str:
        ir_doc = serialize(self._last_model) if self._last_model is not None else ""
        return self._post({
            "ir_document": ir_doc,
            "memory_lessons": [l.text for l in context.lessons if l.source == "memory"],
            "debug_context": {
                "error": {
                    "category": context.error_summary.category,
                    "message": context.error_summary.message,
                    "line": context.error_summary.line,
                },
                "raw_log": context.raw_log,
                "lessons": context.lesson_texts(),
                "script": script,
            },
        })


def make_generator(spec: str) -> Generator:
    """Build a generator from its config string.

    Accepted: ``perfect``, ``faulty:type_i|type_ii|type_iii`` with an optional
    ``:stubborn`` suffix, and ``external:<endpoint-url>``.
    """
    if spec == "perfect":
        return PerfectGenerator()
    if spec.startswith("faulty:"):
        parts = spec.split(":")
        if len(parts) == 2:
            return FaultyGenerator(parts[1])
        if len(parts) == 3 and parts[2] == "stubborn":
            return FaultyGenerator(parts[1], stubborn=True)
        raise ConfigError(f"malformed generator spec {spec!r}")
    if spec.startswith("external:"):
        endpoint = spec.split(":", 1)[1]
        if not endpoint:
            raise ConfigError("external generator requires an endpoint url")
        return ExternalGenerator(endpoint)
    raise ConfigError(f"unknown generator spec {spec!r}")
