"""Drawing-side pipeline: parse the structured drawing document, infer scale
and topology, attach physical semantics from the context text, and drive the
audit-gated refinement loop over a belief state.

Raster perception is out of scope; the drawing document is the structured
stand-in, and the per-turn reasoning step is a pluggable hook so the loop
itself stays deterministic and testable.
"""

from __future__ import annotations

import json
import math
import statistics
from dataclasses import dataclass, replace
from typing import Callable

from .ir import (AnalysisSpec, BoundaryCondition, Element, IRModel, Load,
                 Material, Node, Section, canonicalize)
from .validation import ValidationReport, accept_update, audit

STROKE_CLASSES = ("structural", "dimension", "annotation")
GLYPH_KINDS = ("pin", "roller_x", "roller_y", "fixed")

GLYPH_DOFS = {
    "pin": frozenset({"ux", "uy"}),
    "roller_x": frozenset({"ux"}),
    "roller_y": frozenset({"uy"}),
    "fixed": frozenset({"ux", "uy", "rz"}),
}

FORCE_UNITS = {"n": 1.0, "kn": 1e3, "mn": 1e6}

DEFAULT_SNAP_TOLERANCE = 3.0   # pixels
DEFAULT_SCALE_CV_TOL = 0.02

DEFAULT_MATERIAL = Material(id=1, youngs_modulus=210e9, poisson_ratio=0.3, density=7850.0)
DEFAULT_SECTION = Section(id=1, material_id=1, area=1e-2, moment_of_inertia=1e-5)


class DrawingParseError(Exception):
    pass


class ScaleConflictError(Exception):
    def __init__(self, scales: list[float], cv: float):
        self.scales = scales
        self.cv = cv
        super().__init__(f"dimension annotations imply inconsistent scales "
                         f"{[f'{s:.6g}' for s in scales]} (cv {cv:.2%})")


class DegenerateElementError(Exception):
    pass


class SemanticsError(Exception):
    pass


class PerceptionFailure(Exception):
    def __init__(self, report: ValidationReport, turns: int):
        self.report = report
        self.turns = turns
        codes = [f.code for f in report.findings]
        super().__init__(f"no audited model after {turns} turns; open findings: {codes}")


Point = tuple[float, float]


@dataclass(frozen=True)
class Segment:
    p1: Point
    p2: Point
    stroke_class: str


@dataclass(frozen=True)
class DrawingLabel:
    anchor: Point
    text: str


@dataclass(frozen=True)
class SupportGlyph:
    anchor: Point
    kind: str


@dataclass(frozen=True)
class LoadArrow:
    anchor: Point
    direction: Point
    magnitude_label: str | None = None


@dataclass(frozen=True)
class DimensionAnnotation:
    segment_index: int
    value: float


@dataclass(frozen=True)
class PrimitiveDrawing:
    segments: tuple[Segment, ...] = ()
    labels: tuple[DrawingLabel, ...] = ()
    support_glyphs: tuple[SupportGlyph, ...] = ()
    load_arrows: tuple[LoadArrow, ...] = ()
    dimension_annotations: tuple[DimensionAnnotation, ...] = ()


@dataclass(frozen=True)
class ScaleResolution:
    mode: str  # metric | normalized
    meters_per_pixel: float | None
    consistency: float


@dataclass(frozen=True)
class BeliefState:
    draft: IRModel | None
    pinned_constraints: tuple[str, ...]
    findings: ValidationReport | None
    turn: int


ReasoningHook = Callable[[PrimitiveDrawing, str, ScaleResolution, BeliefState], IRModel]
JustificationHook = Callable[[ValidationReport, IRModel | None, IRModel], "str | None"]


@dataclass(frozen=True)
class PerceptionConfig:
    max_turns: int = 3
    snap_tolerance: float = DEFAULT_SNAP_TOLERANCE
    scale_cv_tolerance: float = DEFAULT_SCALE_CV_TOL
    dimension_tolerance: float = 0.02
    reasoning_hook: ReasoningHook | None = None
    justification_hook: JustificationHook | None = None


def _point(v, path: str) -> Point:
    if not isinstance(v, list) or len(v) != 2:
        raise DrawingParseError(f"{path}: expected a 2-vector")
    try:
        x, y = float(v[0]), float(v[1])
    except (TypeError, ValueError):
        raise DrawingParseError(f"{path}: coordinates must be numbers") from None
    if not (math.isfinite(x) and math.isfinite(y)):
        raise DrawingParseError(f"{path}: coordinates must be finite")
    return (x, y)


def parse_drawing(text: str) -> PrimitiveDrawing:
    """Parse the structured drawing document (format in docs/drawing-format.md)."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DrawingParseError(f"invalid drawing document at line {exc.lineno}: "
                                f"{exc.msg}") from None
    if not isinstance(doc, dict):
        raise DrawingParseError("drawing document must be an object")
    known = {"segments", "labels", "support_glyphs", "load_arrows", "dimension_annotations"}
    for key in doc:
        if key not in known:
            raise DrawingParseError(f"unknown drawing field {key!r}")

    segments: list[Segment] = []
    for i, s in enumerate(doc.get("segments", [])):
        path = f"segments[{i}]"
        if not isinstance(s, dict):
            raise DrawingParseError(f"{path}: expected an object")
        cls = s.get("class")
        if cls not in STROKE_CLASSES:
            raise DrawingParseError(f"{path}.class: expected one of {STROKE_CLASSES}, "
                                    f"got {cls!r}")
        segments.append(Segment(_point(s.get("p1"), f"{path}.p1"),
                                _point(s.get("p2"), f"{path}.p2"), cls))

    labels: list[DrawingLabel] = []
    for i, l in enumerate(doc.get("labels", [])):
        path = f"labels[{i}]"
        if not isinstance(l, dict) or not isinstance(l.get("text"), str):
            raise DrawingParseError(f"{path}: expected an object with text")
        labels.append(DrawingLabel(_point(l.get("anchor"), f"{path}.anchor"), l["text"]))

    glyphs: list[SupportGlyph] = []
    for i, g in enumerate(doc.get("support_glyphs", [])):
        path = f"support_glyphs[{i}]"
        if not isinstance(g, dict) or g.get("kind") not in GLYPH_KINDS:
            raise DrawingParseError(f"{path}.kind: expected one of {GLYPH_KINDS}")
        glyphs.append(SupportGlyph(_point(g.get("anchor"), f"{path}.anchor"), g["kind"]))

    arrows: list[LoadArrow] = []
    for i, a in enumerate(doc.get("load_arrows", [])):
        path = f"load_arrows[{i}]"
        if not isinstance(a, dict):
            raise DrawingParseError(f"{path}: expected an object")
        direction = _point(a.get("direction"), f"{path}.direction")
        norm = math.hypot(*direction)
        if norm == 0.0:
            raise DrawingParseError(f"{path}.direction: zero vector")
        direction = (direction[0] / norm, direction[1] / norm)
        label = a.get("magnitude")
        if label is not None and not isinstance(label, str):
            raise DrawingParseError(f"{path}.magnitude: expected a string")
        arrows.append(LoadArrow(_point(a.get("anchor"), f"{path}.anchor"), direction, label))

    annotations: list[DimensionAnnotation] = []
    for i, d in enumerate(doc.get("dimension_annotations", [])):
        path = f"dimension_annotations[{i}]"
        if not isinstance(d, dict):
            raise DrawingParseError(f"{path}: expected an object")
        idx = d.get("segment")
        if not isinstance(idx, int) or isinstance(idx, bool):
            raise DrawingParseError(f"{path}.segment: expected a segment index")
        if not (0 <= idx < len(segments)):
            raise DrawingParseError(f"{path}.segment: index {idx} out of range "
                                    f"for {len(segments)} segments")
        if segments[idx].stroke_class != "dimension":
            raise DrawingParseError(f"{path}.segment: segment {idx} is "
                                    f"{segments[idx].stroke_class}, not a dimension line")
        try:
            value = float(d.get("value_m"))
        except (TypeError, ValueError):
            raise DrawingParseError(f"{path}.value_m: expected a number") from None
        if not (math.isfinite(value) and value > 0):
            raise DrawingParseError(f"{path}.value_m: expected a positive finite value")
        annotations.append(DimensionAnnotation(idx, value))

    return PrimitiveDrawing(tuple(segments), tuple(labels), tuple(glyphs),
                            tuple(arrows), tuple(annotations))


def _length(seg: Segment) -> float:
    return math.hypot(seg.p2[0] - seg.p1[0], seg.p2[1] - seg.p1[1])


def infer_scale(drawing: PrimitiveDrawing,
                cv_tolerance: float = DEFAULT_SCALE_CV_TOL) -> ScaleResolution:
    """Derive the pixel-to-metric scale from dimension annotations.

    Falls back to normalized mode when no annotation exists (topological
    consistency over absolute accuracy). Annotations that disagree beyond
    the tolerance are an input conflict, not something to average away.
    """
    scales: list[float] = []
    for ann in drawing.dimension_annotations:
        px = _length(drawing.segments[ann.segment_index])
        if px <= 0:
            raise ScaleConflictError([0.0], float("inf"))
        scales.append(ann.value / px)
    if not scales:
        return ScaleResolution(mode="normalized", meters_per_pixel=None, consistency=0.0)
    mean = statistics.fmean(scales)
    cv = statistics.stdev(scales) / mean if len(scales) > 1 else 0.0
    if cv > cv_tolerance:
        raise ScaleConflictError(scales, cv)
    return ScaleResolution(mode="metric", meters_per_pixel=mean, consistency=cv)


def infer_topology(drawing: PrimitiveDrawing, snap_tolerance: float = DEFAULT_SNAP_TOLERANCE,
                   ) -> tuple[tuple[tuple[int, float, float], ...],
                              tuple[tuple[int, int, int], ...]]:
    """Cluster structural segment endpoints into nodes (single linkage within
    the snap tolerance, centroid position) and emit one element per segment.

    Returns pixel-space nodes (id, x, y) and elements (id, n1, n2); node ids
    are assigned in (x, y) order of the centroid, elements in segment order.
    """
    if snap_tolerance <= 0:
        raise ValueError("snap_tolerance must be positive")
    structural = [(i, s) for i, s in enumerate(drawing.segments)
                  if s.stroke_class == "structural"]
    points: list[Point] = []
    for _, s in structural:
        points.append(s.p1)
        points.append(s.p2)
    parent = list(range(len(points)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(points)):
        for j in range(i + 1, len(points)):
            if math.dist(points[i], points[j]) <= snap_tolerance:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[ri] = rj

    clusters: dict[int, list[int]] = {}
    for i in range(len(points)):
        clusters.setdefault(find(i), []).append(i)
    centroids: list[tuple[float, float, tuple[int, ...]]] = []
    for members in clusters.values():
        cx = sum(points[i][0] for i in members) / len(members)
        cy = sum(points[i][1] for i in members) / len(members)
        centroids.append((cx, cy, tuple(members)))
    centroids.sort(key=lambda c: (c[0], c[1]))

    point_to_node: dict[int, int] = {}
    nodes: list[tuple[int, float, float]] = []
    for nid, (cx, cy, members) in enumerate(centroids, start=1):
        nodes.append((nid, cx, cy))
        for i in members:
            point_to_node[i] = nid

    elements: list[tuple[int, int, int]] = []
    for eid, (seg_idx, _) in enumerate(structural, start=1):
        k = (eid - 1) * 2
        n1, n2 = point_to_node[k], point_to_node[k + 1]
        if n1 == n2:
            raise DegenerateElementError(
                f"structural segment {seg_idx} collapses to a single node after snapping")
        elements.append((eid, n1, n2))
    return tuple(nodes), tuple(elements)


def parse_magnitude(label: str) -> float:
    """Parse a force label like '10 kN' or '500N' into newtons."""
    text = label.strip().lower()
    for unit in sorted(FORCE_UNITS, key=len, reverse=True):
        if text.endswith(unit):
            number = text[: -len(unit)].strip()
            break
    else:
        unit, number = "n", text
    try:
        value = float(number)
    except ValueError:
        raise SemanticsError(f"unparsable load magnitude {label!r}") from None
    return value * FORCE_UNITS[unit]


@dataclass(frozen=True)
class ContextDirectives:
    material: Material = DEFAULT_MATERIAL
    section: Section = DEFAULT_SECTION
    element_kind: str = "frame_beam"
    mode: str = "static"
    modal_count: int | None = None
    volfrac: float | None = None
    opt_iterations: int | None = None
    lines: tuple[str, ...] = ()


def parse_context(text: str) -> ContextDirectives:
    """Parse the line-oriented ``key: value`` context directives."""
    material = DEFAULT_MATERIAL
    section = DEFAULT_SECTION
    element_kind = "frame_beam"
    mode = "static"
    modal_count = None
    volfrac = None
    opt_iterations = None
    kept: list[str] = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#") or ":" not in line:
            continue
        kept.append(line)
        key, value = (part.strip() for part in line.split(":", 1))
        key = key.lower()
        try:
            if key == "material":
                props = {k.lower(): v for k, v in
                         (tok.split("=", 1) for tok in value.split())}
                material = Material(id=1,
                                    youngs_modulus=float(props.get("e", 210e9)),
                                    poisson_ratio=float(props.get("nu", 0.3)),
                                    density=float(props.get("rho", 7850.0)))
            elif key == "section":
                props = {k.lower(): v for k, v in
                         (tok.split("=", 1) for tok in value.split())}
                inertia = float(props["i"]) if "i" in props else DEFAULT_SECTION.moment_of_inertia
                section = Section(id=1, material_id=1,
                                  area=float(props.get("a", DEFAULT_SECTION.area)),
                                  moment_of_inertia=inertia)
            elif key == "elements":
                v = value.lower()
                if v in ("truss", "truss_bar"):
                    element_kind = "truss_bar"
                elif v in ("frame", "frame_beam"):
                    element_kind = "frame_beam"
                else:
                    raise SemanticsError(f"unknown element kind directive {value!r}")
            elif key == "mode":
                if value not in ("static", "modal", "topology_optimization"):
                    raise SemanticsError(f"unknown analysis mode {value!r}")
                mode = value
            elif key == "modal_count":
                modal_count = int(value)
            elif key == "volfrac":
                volfrac = float(value)
            elif key == "opt_iterations":
                opt_iterations = int(value)
            # unknown keys are free-text context and simply ignored
        except (ValueError, KeyError) as exc:
            raise SemanticsError(f"malformed context directive {line!r}: {exc}") from None
    return ContextDirectives(material=material, section=section, element_kind=element_kind,
                             mode=mode, modal_count=modal_count, volfrac=volfrac,
                             opt_iterations=opt_iterations, lines=tuple(kept))


def _to_model_coords(nodes, scale: ScaleResolution) -> dict[int, Point]:
    if scale.mode == "metric":
        m = scale.meters_per_pixel
        return {nid: (x * m, y * m) for nid, x, y in nodes}
    xs = [x for _, x, _ in nodes]
    ys = [y for _, _, y in nodes]
    x0, y0 = min(xs), min(ys)
    extent = max(max(xs) - x0, max(ys) - y0)
    if extent == 0:
        extent = 1.0
    return {nid: ((x - x0) / extent, (y - y0) / extent) for nid, x, y in nodes}


def _nearest_node(nodes, p: Point) -> tuple[int, float]:
    best_id, best_d = 0, float("inf")
    for nid, x, y in nodes:
        d = math.dist((x, y), p)
        if d < best_d or (d == best_d and nid < best_id):
            best_id, best_d = nid, d
    return best_id, best_d


def attach_semantics(drawing: PrimitiveDrawing,
                     topology: tuple[tuple[tuple[int, float, float], ...],
                                     tuple[tuple[int, int, int], ...]],
                     scale: ScaleResolution, context_text: str,
                     snap_tolerance: float = DEFAULT_SNAP_TOLERANCE) -> IRModel:
    """Bind supports, loads, materials and the analysis mode onto the topology."""
    nodes_px, elements_raw = topology
    if not nodes_px:
        raise SemanticsError("topology is empty")
    ctx = parse_context(context_text)

    coords = _to_model_coords(nodes_px, scale)
    nodes = tuple(Node(nid, coords[nid][0], coords[nid][1]) for nid, _, _ in nodes_px)
    elements = tuple(Element(eid, ctx.element_kind, (n1, n2), ctx.section.id)
                     for eid, n1, n2 in elements_raw)

    bc_dofs: dict[int, frozenset[str]] = {}
    for g in drawing.support_glyphs:
        nid, d = _nearest_node(nodes_px, g.anchor)
        if d > snap_tolerance:
            raise SemanticsError(f"support glyph {g.kind!r} at {g.anchor} is {d:.1f} px "
                                 f"from the nearest node (snap tolerance {snap_tolerance})")
        bc_dofs[nid] = bc_dofs.get(nid, frozenset()) | GLYPH_DOFS[g.kind]
    bcs = tuple(BoundaryCondition(nid, dofs) for nid, dofs in sorted(bc_dofs.items()))

    load_sum: dict[int, list[float]] = {}
    for a in drawing.load_arrows:
        nid, _ = _nearest_node(nodes_px, a.anchor)
        magnitude = parse_magnitude(a.magnitude_label) if a.magnitude_label else 1.0
        acc = load_sum.setdefault(nid, [0.0, 0.0, 0.0])
        acc[0] += magnitude * a.direction[0]
        acc[1] += magnitude * a.direction[1]
    loads = tuple(Load(nid, fx, fy, mz) for nid, (fx, fy, mz) in sorted(load_sum.items()))

    if ctx.mode == "modal":
        analysis = AnalysisSpec(mode="modal", modal_count=ctx.modal_count or 1)
    elif ctx.mode == "topology_optimization":
        analysis = AnalysisSpec(mode="topology_optimization",
                                opt_volume_fraction=ctx.volfrac,
                                opt_max_iterations=ctx.opt_iterations)
    else:
        analysis = AnalysisSpec(mode="static")

    provenance = (f"scale={scale.mode}"
                  + (f" {scale.meters_per_pixel:.6g} m/px" if scale.meters_per_pixel else "")
                  + f"; directives={len(ctx.lines)}")
    model = IRModel(nodes=nodes, elements=elements, materials=(ctx.material,),
                    sections=(ctx.section,), boundary_conditions=bcs, loads=loads,
                    analysis=analysis,
                    coordinate_mode="metric" if scale.mode == "metric" else "normalized",
                    provenance=provenance)
    return canonicalize(model)


def default_reasoning(drawing: PrimitiveDrawing, context_text: str,
                      scale: ScaleResolution, belief: BeliefState,
                      snap_tolerance: float = DEFAULT_SNAP_TOLERANCE) -> IRModel:
    """The deterministic reasoning step: topology inference plus semantics."""
    topology = infer_topology(drawing, snap_tolerance)
    return attach_semantics(drawing, topology, scale, context_text, snap_tolerance)


def orchestrate(drawing_doc: str, context_text: str,
                config: PerceptionConfig | None = None) -> IRModel:
    """Run the perception decision loop until the audit is clean.

    Each turn the reasoning step proposes a candidate; the audit findings are
    fed back through the belief state, and a candidate only replaces the
    draft when the non-degenerative gate accepts it. Pinned context
    directives ride along on every turn.
    """
    config = config or PerceptionConfig()
    if config.max_turns < 1:
        raise ValueError("max_turns must be >= 1")
    drawing = parse_drawing(drawing_doc)
    scale = infer_scale(drawing, config.scale_cv_tolerance)
    directives = parse_context(context_text)

    belief = BeliefState(draft=None, pinned_constraints=directives.lines,
                         findings=None, turn=0)
    reasoning = config.reasoning_hook or (
        lambda dr, ctx, sc, b: default_reasoning(dr, ctx, sc, b, config.snap_tolerance))

    last_report = ValidationReport()
    for turn in range(1, config.max_turns + 1):
        candidate = reasoning(drawing, context_text, scale, belief)
        report = audit(candidate, drawing, scale)
        if config.justification_hook is not None:
            justification = config.justification_hook(report, belief.draft, candidate)
            if justification is not None:
                report = replace(report, justification=justification)
        decision = accept_update(belief, candidate, report)
        accepted_draft = candidate if decision.accepted else belief.draft
        belief = BeliefState(draft=accepted_draft,
                             pinned_constraints=belief.pinned_constraints,
                             findings=report, turn=turn)
        last_report = report
        if report.clean and decision.accepted:
            return candidate
    raise PerceptionFailure(last_report, config.max_turns)
