"""Persistent experience replay: structural signatures, error classification,
and density-filtered retrieval ranked by token-set similarity.

The store is an append-only line-delimited file, one record per line, which
makes appends crash-safe and keeps insertion order as the recency order.
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass
from pathlib import Path

from .ir import IRModel

DENSITY_RATIO_INTERVAL = (0.5, 2.0)

ERROR_CATEGORIES = ("type_i_lifecycle", "type_ii_hallucination",
                    "type_iii_unsafe_state", "other")

# message fragments that identify each failure family
_TYPE_I_MARKERS = ("no execution trigger", "idle run", "termination signal",
                   "write_results statement absent", "no results persistence")
_TYPE_II_MARKERS = ("unknown statement",)
_TYPE_III_MARKERS = ("kernel protection", "protected root")

_TOKEN_RE = re.compile(r"[a-z][a-z0-9_]*")
_LINE_RE = re.compile(r"line (\d+)")


class MemoryPersistError(Exception):
    pass


@dataclass(frozen=True)
class StructuralSignature:
    n_nodes: int
    n_elements: int
    section_kinds: frozenset[str]
    n_loads: int
    n_bcs: int

    @property
    def density(self) -> float:
        return self.n_nodes / max(self.n_elements, 1)


@dataclass(frozen=True)
class ErrorSignature:
    category: str
    tokens: frozenset[str]
    line: int | None = None


@dataclass(frozen=True)
class ExperienceRecord:
    signature: StructuralSignature
    error: ErrorSignature | None
    lesson: str
    script_excerpt: str
    outcome: str  # failure | success
    created_at: float

    def __post_init__(self):
        if self.outcome == "failure" and self.error is None:
            raise ValueError("failure records must carry an error signature")
        if self.outcome == "success" and not self.script_excerpt:
            raise ValueError("success records must carry a script excerpt")
        if self.outcome not in ("failure", "success"):
            raise ValueError(f"unknown outcome {self.outcome!r}")


def compute_signature(model: IRModel) -> StructuralSignature:
    return StructuralSignature(
        n_nodes=len(model.nodes),
        n_elements=len(model.elements),
        section_kinds=frozenset(e.kind for e in model.elements),
        n_loads=len(model.loads),
        n_bcs=len(model.boundary_conditions),
    )


def classify_error(text: str) -> ErrorSignature:
    """Map a diagnostic message or log onto the failure taxonomy.

    Total: anything that matches no family lands in ``other``.
    """
    low = text.lower()
    if any(m in low for m in _TYPE_III_MARKERS):
        category = "type_iii_unsafe_state"
    elif any(m in low for m in _TYPE_II_MARKERS):
        category = "type_ii_hallucination"
    elif any(m in low for m in _TYPE_I_MARKERS):
        category = "type_i_lifecycle"
    else:
        category = "other"
    match = _LINE_RE.search(low)
    line = int(match.group(1)) if match else None
    return ErrorSignature(category=category,
                          tokens=frozenset(_TOKEN_RE.findall(low)), line=line)


def jaccard(a: frozenset[str], b: frozenset[str]) -> float:
    union = a | b
    if not union:
        return 0.0
    return len(a & b) / len(union)


def _signature_to_doc(sig: StructuralSignature) -> dict:
    return {"n_nodes": sig.n_nodes, "n_elements": sig.n_elements,
            "section_kinds": sorted(sig.section_kinds),
            "n_loads": sig.n_loads, "n_bcs": sig.n_bcs}


def _record_to_line(rec: ExperienceRecord) -> str:
    doc = {
        "signature": _signature_to_doc(rec.signature),
        "error": None if rec.error is None else {
            "category": rec.error.category,
            "tokens": sorted(rec.error.tokens),
            "line": rec.error.line,
        },
        "lesson": rec.lesson,
        "script_excerpt": rec.script_excerpt,
        "outcome": rec.outcome,
        "created_at": rec.created_at,
    }
    return json.dumps(doc, separators=(",", ":"))


def _record_from_line(line: str) -> ExperienceRecord:
    doc = json.loads(line)
    sig = doc["signature"]
    err = doc["error"]
    return ExperienceRecord(
        signature=StructuralSignature(
            n_nodes=sig["n_nodes"], n_elements=sig["n_elements"],
            section_kinds=frozenset(sig["section_kinds"]),
            n_loads=sig["n_loads"], n_bcs=sig["n_bcs"]),
        error=None if err is None else ErrorSignature(
            category=err["category"], tokens=frozenset(err["tokens"]), line=err["line"]),
        lesson=doc["lesson"],
        script_excerpt=doc["script_excerpt"],
        outcome=doc["outcome"],
        created_at=doc["created_at"],
    )


class ExperienceBuffer:
    """Replay buffer with optional file persistence.

    Appends are serialized through one lock; readers see a consistent
    prefix because records are only ever appended.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._records: list[ExperienceRecord] = []
        if self.path is not None and self.path.exists():
            try:
                text = self.path.read_text(encoding="utf-8")
            except OSError as exc:
                raise MemoryPersistError(f"cannot read buffer {self.path}: {exc}") from None
            for line in text.splitlines():
                if line.strip():
                    self._records.append(_record_from_line(line))

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> tuple[ExperienceRecord, ...]:
        return tuple(self._records)

    def record(self, rec: ExperienceRecord) -> None:
        with self._lock:
            if self.path is not None:
                try:
                    self.path.parent.mkdir(parents=True, exist_ok=True)
                    with open(self.path, "a", encoding="utf-8") as fh:
                        fh.write(_record_to_line(rec) + "\n")
                        fh.flush()
                except OSError as exc:
                    raise MemoryPersistError(f"cannot append to {self.path}: {exc}") from None
            self._records.append(rec)

    def retrieve(self, query_sig: StructuralSignature,
                 query_err: ErrorSignature | None, k: int) -> list[ExperienceRecord]:
        """Top-k records whose structural density is commensurate with the query.

        The density-ratio filter keeps candidates inside [0.5, 2.0], which is
        closed under reciprocals, so filtering is symmetric between query and
        candidate. Ranking: token Jaccard desc, category match desc, recency.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        lo, hi = DENSITY_RATIO_INTERVAL
        qd = query_sig.density
        qtokens = query_err.tokens if query_err is not None else frozenset()
        qcat = query_err.category if query_err is not None else None
        scored = []
        for idx, rec in enumerate(self._records):
            ratio = rec.signature.density / qd if qd > 0 else float("inf")
            if not (lo <= ratio <= hi):
                continue
            rtokens = rec.error.tokens if rec.error is not None else frozenset()
            sim = jaccard(qtokens, rtokens)
            cat_match = 1 if (qcat is not None and rec.error is not None
                              and rec.error.category == qcat) else 0
            scored.append(((-sim, -cat_match, -idx), rec))
        scored.sort(key=lambda item: item[0])
        return [rec for _, rec in scored[:k]]
