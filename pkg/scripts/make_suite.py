#!/usr/bin/env python3
"""Build the bundled 15-case benchmark suite under cases/.

Each case directory gets drawing.json, context.txt, case.json and a
truth.ir.json reference produced by the deterministic perception pipeline.
Re-running the script rewrites the suite byte-identically.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from vfea.ir import serialize  # noqa: E402
from vfea.perception import orchestrate  # noqa: E402

PX_PER_M = 100.0
DIM_OFFSET = 40.0  # px offset for dimension lines


def seg(p1, p2, cls="structural"):
    return {"p1": [p1[0], p1[1]], "p2": [p2[0], p2[1]], "class": cls}


def build_drawing(nodes_m: dict[int, tuple[float, float]],
                  elements: list[tuple[int, int]],
                  supports: dict[int, str],
                  loads: list[tuple[int, tuple[float, float], str]],
                  dims: list[tuple[int, int]] | None = None,
                  px_per_m: float = PX_PER_M) -> dict:
    """Assemble a drawing document from metric node positions.

    ``dims`` lists node pairs to annotate; pixel geometry is nodes scaled by
    px_per_m, dimension lines run parallel to the measured pair, offset off
    to the side.
    """
    px = {nid: (x * px_per_m, y * px_per_m) for nid, (x, y) in nodes_m.items()}
    segments = [seg(px[a], px[b]) for a, b in elements]
    annotations = []
    for a, b in dims or []:
        (x1, y1), (x2, y2) = px[a], px[b]
        import math
        dx, dy = x2 - x1, y2 - y1
        length = math.hypot(dx, dy)
        nx, ny = -dy / length, dx / length  # unit normal
        p1 = (x1 + nx * DIM_OFFSET, y1 + ny * DIM_OFFSET)
        p2 = (x2 + nx * DIM_OFFSET, y2 + ny * DIM_OFFSET)
        annotations.append({"segment": len(segments), "value_m": math.hypot(
            nodes_m[b][0] - nodes_m[a][0], nodes_m[b][1] - nodes_m[a][1])})
        segments.append(seg(p1, p2, "dimension"))
    return {
        "segments": segments,
        "labels": [],
        "support_glyphs": [{"anchor": list(px[n]), "kind": kind}
                           for n, kind in sorted(supports.items())],
        "load_arrows": [{"anchor": list(px[n]), "direction": [dx, dy], "magnitude": mag}
                        for n, (dx, dy), mag in loads],
        "dimension_annotations": annotations,
    }


STEEL = "material: E=210e9 nu=0.3 rho=7850"
BAR_SECTION = "section: A=0.01"
BEAM_SECTION = "section: A=0.01 I=1e-6"


def case_defs() -> dict[str, dict]:
    cases: dict[str, dict] = {}

    def add(case_id, nodes, elements, supports, loads, context_lines,
            dims=None, expected_mode="static"):
        cases[case_id] = {
            "drawing": build_drawing(nodes, elements, supports, loads,
                                     dims if dims is not None else elements),
            "context": "\n".join(context_lines) + "\n",
            "expected_mode": expected_mode,
        }

    # 1. symmetric two-bar truss, apex load
    add("truss_two_bar",
        {1: (0, 0), 2: (2, 0), 3: (1, 1)},
        [(1, 3), (2, 3)],
        {1: "pin", 2: "pin"},
        [(3, (0, -1), "10 kN")],
        [STEEL, BAR_SECTION, "elements: truss", "mode: static"])

    # 2. cantilever beam, transverse tip load (closed-form tip deflection)
    add("frame_cantilever",
        {1: (0, 0), 2: (2, 0)},
        [(1, 2)],
        {1: "fixed"},
        [(2, (0, -1), "1 kN")],
        [STEEL, BEAM_SECTION, "elements: frame", "mode: static"])

    # 3. simply supported beam, midspan load
    add("frame_simply_supported",
        {1: (0, 0), 2: (2, 0), 3: (4, 0)},
        [(1, 2), (2, 3)],
        {1: "pin", 3: "roller_y"},
        [(2, (0, -1), "5 kN")],
        [STEEL, BEAM_SECTION, "elements: frame", "mode: static"],
        dims=[(1, 2), (2, 3), (1, 3)])

    # 4. triangular truss
    add("truss_triangle",
        {1: (0, 0), 2: (4, 0), 3: (2, 2)},
        [(1, 2), (1, 3), (2, 3)],
        {1: "pin", 2: "roller_y"},
        [(3, (0, -1), "8 kN")],
        [STEEL, BAR_SECTION, "elements: truss", "mode: static"])

    # 5. five-node deck truss
    add("truss_deck",
        {1: (0, 0), 2: (4, 0), 3: (8, 0), 4: (2, 2), 5: (6, 2)},
        [(1, 2), (2, 3), (4, 5), (1, 4), (4, 2), (2, 5), (5, 3)],
        {1: "pin", 3: "roller_y"},
        [(4, (0, -1), "6 kN"), (5, (0, -1), "6 kN")],
        [STEEL, BAR_SECTION, "elements: truss", "mode: static"],
        dims=[(1, 2), (2, 3), (1, 4)])

    # 6. portal frame, lateral plus gravity load
    add("frame_portal",
        {1: (0, 0), 2: (0, 3), 3: (4, 3), 4: (4, 0)},
        [(1, 2), (2, 3), (3, 4)],
        {1: "fixed", 4: "fixed"},
        [(2, (1, 0), "3 kN"), (3, (0, -1), "5 kN")],
        [STEEL, BEAM_SECTION, "elements: frame", "mode: static"])

    # 7. asymmetric frame
    add("frame_asymmetric",
        {1: (0, 0), 2: (0, 3), 3: (3, 4), 4: (6, 2), 5: (6, 0)},
        [(1, 2), (2, 3), (3, 4), (4, 5)],
        {1: "fixed", 5: "pin"},
        [(3, (0, -1), "6 kN"), (2, (1, 0), "2 kN")],
        [STEEL, BEAM_SECTION, "elements: frame", "mode: static"],
        dims=[(1, 2), (4, 5)])

    # 8. L bracket
    add("frame_l_bracket",
        {1: (0, 0), 2: (0, 2), 3: (1.5, 2)},
        [(1, 2), (2, 3)],
        {1: "fixed"},
        [(3, (0, -1), "2 kN")],
        [STEEL, BEAM_SECTION, "elements: frame", "mode: static"])

    # 9. king post truss
    add("truss_king_post",
        {1: (0, 0), 2: (2, 0), 3: (4, 0), 4: (2, 1.5)},
        [(1, 2), (2, 3), (1, 4), (3, 4), (2, 4)],
        {1: "pin", 3: "roller_y"},
        [(2, (0, -1), "4 kN")],
        [STEEL, BAR_SECTION, "elements: truss", "mode: static"])

    # 10. triangulated cantilever truss off a wall
    add("truss_cantilever",
        {1: (0, 0), 2: (0, 2), 3: (2, 0), 4: (2, 2)},
        [(1, 3), (2, 4), (1, 4), (3, 4)],
        {1: "pin", 2: "pin"},
        [(4, (0, -1), "3 kN")],
        [STEEL, BAR_SECTION, "elements: truss", "mode: static"])

    # 11. two-story frame, lateral loads
    add("frame_two_story",
        {1: (0, 0), 2: (4, 0), 3: (0, 3), 4: (4, 3), 5: (0, 6), 6: (4, 6)},
        [(1, 3), (3, 5), (2, 4), (4, 6), (3, 4), (5, 6)],
        {1: "fixed", 2: "fixed"},
        [(3, (1, 0), "4 kN"), (5, (1, 0), "2 kN")],
        [STEEL, BEAM_SECTION, "elements: frame", "mode: static"],
        dims=[(1, 3), (3, 5), (3, 4)])

    # 12. modal cantilever (no loads, frequency extraction)
    add("frame_modal",
        {1: (0, 0), 2: (2, 0)},
        [(1, 2)],
        {1: "fixed"},
        [],
        [STEEL, BEAM_SECTION, "elements: frame", "mode: modal", "modal_count: 3"],
        expected_mode="modal")

    # 13. truss without dimension annotations: normalized-mode fallback
    add("truss_normalized",
        {1: (0, 0), 2: (2, 0), 3: (1, 1), 4: (3, 1)},
        [(1, 2), (1, 3), (2, 3), (2, 4), (3, 4)],
        {1: "pin", 2: "roller_y"},
        [(4, (0, -1), "1 kN")],
        [STEEL, BAR_SECTION, "elements: truss", "mode: static"],
        dims=[])

    # 14. vertical cantilever with an inclined tip load
    add("frame_inclined_load",
        {1: (0, 0), 2: (0, 2)},
        [(1, 2)],
        {1: "fixed"},
        [(2, (0.6, -0.8), "5 kN")],
        [STEEL, BEAM_SECTION, "elements: frame", "mode: static"])

    # 15. ground-structure topology optimization on a 3x3 grid
    grid = {i + 1: (float(x), float(y))
            for i, (x, y) in enumerate(sorted((x, y) for x in (0, 1, 2) for y in (0, 1, 2)))}
    by_pos = {pos: nid for nid, pos in grid.items()}
    add("topopt_ground",
        grid,
        list(itertools.combinations(sorted(grid), 2)),
        {by_pos[(0.0, 0.0)]: "pin", by_pos[(2.0, 0.0)]: "pin"},
        [(by_pos[(1.0, 2.0)], (0, -1), "10 kN")],
        [STEEL, BAR_SECTION, "elements: truss", "mode: topology_optimization",
         "volfrac: 0.5", "opt_iterations: 40"],
        dims=[(by_pos[(0.0, 0.0)], by_pos[(1.0, 0.0)]),
              (by_pos[(0.0, 0.0)], by_pos[(0.0, 1.0)])],
        expected_mode="topology_optimization")

    return cases


def write_suite(out_dir: Path) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    for case_id, spec in case_defs().items():
        case_dir = out_dir / case_id
        case_dir.mkdir(exist_ok=True)
        drawing_text = json.dumps(spec["drawing"], indent=2) + "\n"
        (case_dir / "drawing.json").write_text(drawing_text, encoding="utf-8")
        (case_dir / "context.txt").write_text(spec["context"], encoding="utf-8")
        truth = orchestrate(drawing_text, spec["context"])
        (case_dir / "truth.ir.json").write_text(serialize(truth), encoding="utf-8")
        manifest = {
            "id": case_id,
            "drawing": "drawing.json",
            "context": "context.txt",
            "truth_ir": "truth.ir.json",
            "expected_mode": spec["expected_mode"],
        }
        (case_dir / "case.json").write_text(json.dumps(manifest, indent=2) + "\n",
                                            encoding="utf-8")
    return len(case_defs())


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path,
                        default=Path(__file__).resolve().parents[1] / "cases")
    args = parser.parse_args()
    n = write_suite(args.out)
    print(f"wrote {n} cases to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
