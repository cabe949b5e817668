"""vfea: an autonomous drawing-to-simulation pipeline with an embedded
2D structural solver, audited intermediate models, and verification-driven
script synthesis with a deterministic fallback."""

__version__ = "0.1.0"

from .ir import IRModel, canonicalize, deserialize, diff, serialize
from .perception import orchestrate
from .simscript import lower_ir, parse_script, preflight
from .solver import optimize_topology, solve_modal, solve_static
from .synthesis import make_generator, synthesize
from .validation import audit

__all__ = [
    "IRModel", "audit", "canonicalize", "deserialize", "diff", "lower_ir",
    "make_generator", "optimize_topology", "orchestrate", "parse_script",
    "preflight", "serialize", "solve_modal", "solve_static", "synthesize",
    "__version__",
]
