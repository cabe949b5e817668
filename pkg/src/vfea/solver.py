"""Embedded 2D structural kernel: direct stiffness statics, modal analysis,
and ground-structure topology optimization by optimality criteria.

Dense symmetric storage throughout; target models are desk scale (<= ~1e3
dofs), so direct factorizations beat any sparse machinery.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from .ir import Element, IRModel, Node
from .validation import restraint_rank

DEFAULT_MODAL_SUBDIVISIONS = 4
AREA_FLOOR_RATIO = 1e-6   # a_min = ratio * a_max
OC_MOVE_LIMIT = 0.2
OC_EXPONENT = 0.5
OC_STOP_TOL = 1e-3        # on max area change, relative to a_max
RESIDUAL_LIMIT = 1e-8     # beyond this the factorization is not trusted


class AssemblyError(Exception):
    pass


class SingularSystemError(Exception):
    """Stiffness factorization failed: rigid body motion or mechanism."""


class UnsupportedOptimizationError(Exception):
    pass


@dataclass(frozen=True)
class AssembledSystem:
    dof_index: dict[tuple[int, str], int]
    K: np.ndarray
    M: np.ndarray
    f: np.ndarray
    constrained: frozenset[int]

    @property
    def n_dofs(self) -> int:
        return self.K.shape[0]


@dataclass(frozen=True)
class StaticResult:
    displacements: dict[int, tuple[float, float, float]]
    reactions: dict[int, tuple[float, float, float]]
    axial_force: dict[int, float]
    axial_stress: dict[int, float]
    frame_end_forces: dict[int, tuple[float, ...]]
    equilibrium_residual: float


@dataclass(frozen=True)
class ModalResult:
    frequencies_hz: tuple[float, ...]
    mode_shapes: tuple[dict[int, tuple[float, float, float]], ...]
    note: str | None = None


@dataclass(frozen=True)
class TopoResult:
    areas: dict[int, float]
    compliance_history: tuple[float, ...]
    final_volume_fraction: float


def _geometry(model: IRModel, e: Element) -> tuple[float, float, float]:
    pos = model.node_positions()
    (x1, y1), (x2, y2) = pos[e.node_ids[0]], pos[e.node_ids[1]]
    dx, dy = x2 - x1, y2 - y1
    length = math.hypot(dx, dy)
    if length == 0.0:
        raise AssemblyError(f"element {e.id} has zero length")
    return length, dx / length, dy / length


def _truss_stiffness(ea_over_l: float, c: float, s: float) -> np.ndarray:
    cc, ss, cs = c * c, s * s, c * s
    block = np.array([[cc, cs], [cs, ss]])
    k = np.empty((4, 4))
    k[:2, :2] = block
    k[2:, 2:] = block
    k[:2, 2:] = -block
    k[2:, :2] = -block
    return ea_over_l * k


def _truss_mass(rho_a_l: float) -> np.ndarray:
    # translational consistent mass; isotropic, so no rotation needed
    m = rho_a_l / 6.0
    return m * np.array([[2, 0, 1, 0],
                         [0, 2, 0, 1],
                         [1, 0, 2, 0],
                         [0, 1, 0, 2]], dtype=float)


def _frame_transform(c: float, s: float) -> np.ndarray:
    r = np.array([[c, s, 0], [-s, c, 0], [0, 0, 1]], dtype=float)
    t = np.zeros((6, 6))
    t[:3, :3] = r
    t[3:, 3:] = r
    return t


def _frame_stiffness_local(E: float, A: float, I: float, L: float) -> np.ndarray:
    ax = E * A / L
    b = E * I / L**3
    return np.array([
        [ax, 0, 0, -ax, 0, 0],
        [0, 12 * b, 6 * b * L, 0, -12 * b, 6 * b * L],
        [0, 6 * b * L, 4 * b * L**2, 0, -6 * b * L, 2 * b * L**2],
        [-ax, 0, 0, ax, 0, 0],
        [0, -12 * b, -6 * b * L, 0, 12 * b, -6 * b * L],
        [0, 6 * b * L, 2 * b * L**2, 0, -6 * b * L, 4 * b * L**2],
    ])


def _frame_mass_local(rho: float, A: float, L: float) -> np.ndarray:
    m = rho * A * L
    return (m / 420.0) * np.array([
        [140, 0, 0, 70, 0, 0],
        [0, 156, 22 * L, 0, 54, -13 * L],
        [0, 22 * L, 4 * L**2, 0, 13 * L, -3 * L**2],
        [70, 0, 0, 140, 0, 0],
        [0, 54, 13 * L, 0, 156, -22 * L],
        [0, -13 * L, -3 * L**2, 0, -22 * L, 4 * L**2],
    ])


def _material_of(model: IRModel, e: Element):
    sec = next(s for s in model.sections if s.id == e.section_id)
    mat = next(m for m in model.materials if m.id == sec.material_id)
    return sec, mat


def build_dof_index(model: IRModel) -> dict[tuple[int, str], int]:
    """Allocate global dof indices: ux, uy at every node; rz only where it can
    carry stiffness (frame-connected), load, or an explicit constraint."""
    frame_nodes = {n for e in model.elements if e.kind == "frame_beam" for n in e.node_ids}
    rz_nodes = set(frame_nodes)
    rz_nodes |= {l.node_id for l in model.loads if l.mz != 0.0}
    rz_nodes |= {b.node_id for b in model.boundary_conditions if "rz" in b.constrained_dofs}
    index: dict[tuple[int, str], int] = {}
    for n in sorted(model.nodes, key=lambda n: n.id):
        index[(n.id, "ux")] = len(index)
        index[(n.id, "uy")] = len(index)
        if n.id in rz_nodes:
            index[(n.id, "rz")] = len(index)
    return index


def _element_dofs(index: dict[tuple[int, str], int], e: Element) -> list[int]:
    n1, n2 = e.node_ids
    if e.kind == "truss_bar":
        return [index[(n1, "ux")], index[(n1, "uy")], index[(n2, "ux")], index[(n2, "uy")]]
    return [index[(n1, "ux")], index[(n1, "uy")], index[(n1, "rz")],
            index[(n2, "ux")], index[(n2, "uy")], index[(n2, "rz")]]


def assemble(model: IRModel, area_override: dict[int, float] | None = None) -> AssembledSystem:
    """Direct stiffness assembly of K, consistent M and the load vector.

    ``area_override`` substitutes per-element areas (used by the optimizer)
    without touching the model's section table.
    """
    index = build_dof_index(model)
    n = len(index)
    K = np.zeros((n, n))
    M = np.zeros((n, n))
    f = np.zeros(n)

    for e in model.elements:
        sec, mat = _material_of(model, e)
        area = area_override.get(e.id, sec.area) if area_override else sec.area
        L, c, s = _geometry(model, e)
        dofs = _element_dofs(index, e)
        if e.kind == "truss_bar":
            ke = _truss_stiffness(mat.youngs_modulus * area / L, c, s)
            me = _truss_mass(mat.density * area * L)
        else:
            if sec.moment_of_inertia is None:
                raise AssemblyError(f"frame element {e.id} has no moment of inertia")
            t = _frame_transform(c, s)
            ke = t.T @ _frame_stiffness_local(mat.youngs_modulus, area,
                                              sec.moment_of_inertia, L) @ t
            me = t.T @ _frame_mass_local(mat.density, area, L) @ t
        K[np.ix_(dofs, dofs)] += ke
        M[np.ix_(dofs, dofs)] += me

    for l in model.loads:
        f[index[(l.node_id, "ux")]] += l.fx
        f[index[(l.node_id, "uy")]] += l.fy
        if l.mz != 0.0:
            f[index[(l.node_id, "rz")]] += l.mz

    constrained = frozenset(
        index[(b.node_id, d)]
        for b in model.boundary_conditions
        for d in b.sorted_dofs()
        if (b.node_id, d) in index
    )
    return AssembledSystem(dof_index=index, K=K, M=M, f=f, constrained=constrained)


def _solve_free(K: np.ndarray, f: np.ndarray, free: np.ndarray) -> tuple[np.ndarray, float]:
    """Factorize the free partition and back-substitute; returns (u_full, residual)."""
    u = np.zeros(K.shape[0])
    if free.size == 0:
        return u, 0.0
    Kff = K[np.ix_(free, free)]
    ff = f[free]
    try:
        factor = scipy.linalg.cho_factor(Kff, check_finite=False)
        uf = scipy.linalg.cho_solve(factor, ff, check_finite=False)
    except scipy.linalg.LinAlgError:
        raise SingularSystemError("rigid body motion or mechanism") from None
    if not np.all(np.isfinite(uf)):
        raise SingularSystemError("rigid body motion or mechanism")
    residual = float(np.linalg.norm(Kff @ uf - ff) / max(np.linalg.norm(ff), 1.0))
    if residual > RESIDUAL_LIMIT:
        raise SingularSystemError(f"ill-conditioned system, residual {residual:.2e}")
    u[free] = uf
    return u, residual


def _free_indices(system: AssembledSystem) -> np.ndarray:
    return np.array(sorted(set(range(system.n_dofs)) - set(system.constrained)), dtype=int)


def _node_vector(model: IRModel, index: dict[tuple[int, str], int],
                 u: np.ndarray, node_id: int) -> tuple[float, float, float]:
    return (float(u[index[(node_id, "ux")]]),
            float(u[index[(node_id, "uy")]]),
            float(u[index[(node_id, "rz")]]) if (node_id, "rz") in index else 0.0)


def solve_static(model: IRModel, area_override: dict[int, float] | None = None) -> StaticResult:
    system = assemble(model, area_override)
    free = _free_indices(system)
    u, residual = _solve_free(system.K, system.f, free)

    reactions_full = system.K @ u - system.f
    displacements = {n.id: _node_vector(model, system.dof_index, u, n.id) for n in model.nodes}
    reactions: dict[int, tuple[float, float, float]] = {}
    for b in model.boundary_conditions:
        rx = ry = rm = 0.0
        for d in b.sorted_dofs():
            key = (b.node_id, d)
            if key not in system.dof_index:
                continue
            v = float(reactions_full[system.dof_index[key]])
            if d == "ux":
                rx = v
            elif d == "uy":
                ry = v
            else:
                rm = v
        reactions[b.node_id] = (rx, ry, rm)

    axial_force: dict[int, float] = {}
    axial_stress: dict[int, float] = {}
    frame_end_forces: dict[int, tuple[float, ...]] = {}
    for e in model.elements:
        sec, mat = _material_of(model, e)
        area = area_override.get(e.id, sec.area) if area_override else sec.area
        L, c, s = _geometry(model, e)
        dofs = _element_dofs(system.dof_index, e)
        ue = u[dofs]
        if e.kind == "truss_bar":
            stretch = (ue[2] - ue[0]) * c + (ue[3] - ue[1]) * s
            force = mat.youngs_modulus * area / L * stretch
            axial_force[e.id] = float(force)
            axial_stress[e.id] = float(force / area)
        else:
            t = _frame_transform(c, s)
            local = _frame_stiffness_local(mat.youngs_modulus, area,
                                           sec.moment_of_inertia, L) @ (t @ ue)
            frame_end_forces[e.id] = tuple(float(v) for v in local)

    return StaticResult(displacements=displacements, reactions=reactions,
                        axial_force=axial_force, axial_stress=axial_stress,
                        frame_end_forces=frame_end_forces, equilibrium_residual=residual)


def subdivide_frames(model: IRModel, n_sub: int) -> IRModel:
    """Split every frame member into n_sub elements with interior nodes.

    Truss bars are untouched: an interior truss node carries no transverse
    stiffness and would introduce a spurious mechanism.
    """
    if n_sub <= 1:
        return model
    next_node = max((n.id for n in model.nodes), default=0) + 1
    next_elem = max((e.id for e in model.elements), default=0) + 1
    pos = model.node_positions()
    nodes = list(model.nodes)
    elements: list[Element] = []
    for e in sorted(model.elements, key=lambda e: e.id):
        if e.kind != "frame_beam":
            elements.append(e)
            continue
        (x1, y1), (x2, y2) = pos[e.node_ids[0]], pos[e.node_ids[1]]
        chain = [e.node_ids[0]]
        for i in range(1, n_sub):
            t = i / n_sub
            nodes.append(Node(next_node, x1 + t * (x2 - x1), y1 + t * (y2 - y1)))
            chain.append(next_node)
            next_node += 1
        chain.append(e.node_ids[1])
        elements.append(replace(e, node_ids=(chain[0], chain[1])))
        for a, b in zip(chain[1:-1], chain[2:]):
            elements.append(Element(next_elem, "frame_beam", (a, b), e.section_id))
            next_elem += 1
    return replace(model, nodes=tuple(nodes), elements=tuple(elements))


def solve_modal(model: IRModel, n: int,
                subdivisions: int = DEFAULT_MODAL_SUBDIVISIONS) -> ModalResult:
    """Lowest n natural frequencies and shapes of the restrained structure.

    The generalized problem K phi = w^2 M phi is reduced through a Cholesky
    factor of M to a standard symmetric eigenproblem.
    """
    if n < 1:
        raise ValueError("modal count must be >= 1")
    if restraint_rank(model) < 3:
        raise SingularSystemError("insufficient restraint for modal analysis")
    refined = subdivide_frames(model, subdivisions)
    system = assemble(refined)
    free = _free_indices(system)
    if free.size == 0:
        raise SingularSystemError("no free dofs")
    Kff = system.K[np.ix_(free, free)]
    Mff = system.M[np.ix_(free, free)]
    try:
        Lm = scipy.linalg.cholesky(Mff, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError:
        raise SingularSystemError("mass matrix not positive definite") from None
    Y = scipy.linalg.solve_triangular(Lm, Kff, lower=True, check_finite=False)
    A = scipy.linalg.solve_triangular(Lm, Y.T, lower=True, check_finite=False)
    A = 0.5 * (A + A.T)
    w2, vecs = scipy.linalg.eigh(A, check_finite=False)

    scale = max(float(w2[-1]), 1.0)
    if w2[0] <= 1e-12 * scale:
        raise SingularSystemError("mechanism detected: non-positive vibration mode")

    note = None
    if n > free.size:
        note = f"requested {n} modes but only {free.size} free dofs are available"
        n = free.size
    freqs = tuple(float(math.sqrt(w) / (2 * math.pi)) for w in w2[:n])

    shapes: list[dict[int, tuple[float, float, float]]] = []
    original_ids = [nd.id for nd in model.nodes]
    for i in range(n):
        phi_free = scipy.linalg.solve_triangular(Lm, vecs[:, i], lower=True,
                                                 trans="T", check_finite=False)
        phi = np.zeros(system.n_dofs)
        phi[free] = phi_free
        trans = [abs(phi[system.dof_index[(nid, d)]])
                 for (nid, d) in system.dof_index if d in ("ux", "uy")]
        peak = max(trans) if trans else 1.0
        if peak > 0:
            phi = phi / peak
        shapes.append({nid: _node_vector(refined, system.dof_index, phi, nid)
                       for nid in original_ids})
    return ModalResult(frequencies_hz=freqs, mode_shapes=tuple(shapes), note=note)


def _oc_update(x: np.ndarray, neg_sens: np.ndarray, lengths: np.ndarray,
               target_volume: float, x_min: float) -> np.ndarray:
    """Optimality-criteria step: multiplicative update with a bisected
    Lagrange multiplier enforcing the length-weighted volume constraint."""
    lower = np.maximum(x_min, x - OC_MOVE_LIMIT)
    upper = np.minimum(1.0, x + OC_MOVE_LIMIT)

    def candidate(lam: float) -> np.ndarray:
        with np.errstate(divide="ignore"):
            b = neg_sens / (lam * lengths)
        return np.clip(x * np.power(np.maximum(b, 0.0), OC_EXPONENT), lower, upper)

    l1, l2 = 0.0, 1e-6
    while float(candidate(l2) @ lengths) > target_volume:
        l2 *= 10.0
        if l2 > 1e40:
            break
    for _ in range(200):
        if (l2 - l1) <= 1e-12 * l2:
            break
        lmid = 0.5 * (l1 + l2)
        if float(candidate(lmid) @ lengths) > target_volume:
            l1 = lmid
        else:
            l2 = lmid
    return candidate(l2)


def optimize_topology(model: IRModel, volfrac: float | None = None,
                      max_iters: int | None = None) -> TopoResult:
    """Minimum-compliance sizing of a truss ground structure.

    Design variables are normalized bar areas x in [1e-6, 1] of the largest
    section area; initialization is the uniform conservative prior
    x = volfrac. Sensitivities use the unit-area element stiffness.
    """
    if any(e.kind != "truss_bar" for e in model.elements):
        raise UnsupportedOptimizationError("ground structure must contain only truss bars")
    if volfrac is None:
        volfrac = model.analysis.opt_volume_fraction
    if volfrac is None:
        volfrac = 0.5
    if not (0.0 < volfrac <= 1.0):
        raise UnsupportedOptimizationError(f"volume fraction {volfrac} outside (0, 1]")
    if max_iters is None:
        max_iters = model.analysis.opt_max_iterations or 50

    elems = sorted(model.elements, key=lambda e: e.id)
    a_max = max(s.area for s in model.sections if any(e.section_id == s.id for e in elems))
    x_min = AREA_FLOOR_RATIO
    pos = model.node_positions()
    lengths = np.array([
        math.hypot(pos[e.node_ids[1]][0] - pos[e.node_ids[0]][0],
                   pos[e.node_ids[1]][1] - pos[e.node_ids[0]][1]) for e in elems
    ])
    target_volume = volfrac * float(lengths.sum())  # in units of a_max

    index = build_dof_index(model)
    unit_k: list[tuple[list[int], np.ndarray]] = []
    for e in elems:
        _, mat = _material_of(model, e)
        L, c, s = _geometry(model, e)
        unit_k.append((_element_dofs(index, e), _truss_stiffness(mat.youngs_modulus / L, c, s)))

    x = np.full(len(elems), volfrac)
    history: list[float] = []
    n = len(index)
    base = assemble(model)  # for loads and constraints
    f = base.f
    free = _free_indices(base)

    def solve_for(xv: np.ndarray) -> tuple[np.ndarray, float]:
        K = np.zeros((n, n))
        for xe, (dofs, k0) in zip(xv, unit_k):
            K[np.ix_(dofs, dofs)] += (xe * a_max) * k0
        u, _ = _solve_free(K, f, free)
        return u, float(f @ u)

    for _ in range(max_iters):
        u, compliance = solve_for(x)
        history.append(compliance)
        neg_sens = np.array([
            a_max * float(u[dofs] @ (k0 @ u[dofs])) for dofs, k0 in unit_k
        ])  # -dC/dx_e, always >= 0
        x_new = _oc_update(x, neg_sens, lengths, target_volume, x_min)
        change = float(np.max(np.abs(x_new - x)))
        x = x_new
        if change < OC_STOP_TOL:
            break

    _, final_compliance = solve_for(x)
    history.append(final_compliance)
    areas = {e.id: float(xe * a_max) for e, xe in zip(elems, x)}
    final_vf = float(x @ lengths) / float(lengths.sum())
    return TopoResult(areas=areas, compliance_history=tuple(history),
                      final_volume_fraction=final_vf)
