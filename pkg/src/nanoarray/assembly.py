"""Loading, rearrangement and pairwise merging of particles on the trap lattice.

Sites are addressed by ``(row, col)``; in the transverse plane a site sits at
``(col * pitch_x, row * pitch_y)``. One auxiliary beam moves one particle at
a time along a polyline. A path is safe when it keeps at least the
exclusion radius from every occupied site other than its own source.
"""

from __future__ import annotations

import enum
import hashlib
import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.constants import e as ELEMENTARY_CHARGE, epsilon_0
from scipy.optimize import linear_sum_assignment

from .errors import (DomainError, InfeasibleError, PlanningError, SelectionError,
                     SingularityError, StalePlanError)
from .gas import GasEnvironment, damping_rates
from .optics import EllipsoidGeometry, TrapArray, find_equilibrium, trap_force, trap_frequencies

DEFAULT_RADIUS = 85e-9
TRANSPORT_SUCCESS = 0.99
# the boundary case, a path exactly one exclusion radius from a site, is allowed
_SLACK = 1e-9


class SiteState(str, enum.Enum):
    EMPTY = "empty"
    SINGLE = "single"
    MERGED = "merged"  # one dumbbell
    PAIR = "pair"  # two particles held apart in one trap


@dataclass(frozen=True)
class Particle:
    id: int
    geometry: EllipsoidGeometry
    charge: float = 0.0  # C
    verdict: str | None = None  # "spherical" / "anisotropic" once characterized

    @property
    def looks_spherical(self) -> bool:
        """Characterization verdict, or the true shape when none is recorded."""
        if self.verdict is not None:
            return self.verdict == "spherical"
        return self.geometry.shape != "dumbbell" and self.geometry.is_sphere()


@dataclass
class Occupancy:
    """Which particles sit in which trap, with a version bumped on every change."""

    rows: int
    cols: int
    pitch_x: float = 1.77e-6
    pitch_y: float = 2.66e-6
    sites: dict = field(default_factory=dict)  # (row, col) -> tuple of particle ids
    particles: dict = field(default_factory=dict)  # id -> Particle
    version: int = 0
    next_id: int = 0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise DomainError("grid needs at least one row and one column")
        seen = [pid for ids in self.sites.values() for pid in ids]
        if len(seen) != len(set(seen)):
            raise DomainError("particle ids must be unique across the grid")

    # -- queries
    def contents(self, site) -> tuple:
        return self.sites.get(tuple(site), ())

    def state(self, site) -> SiteState:
        ids = self.contents(site)
        if not ids:
            return SiteState.EMPTY
        if len(ids) == 2:
            return SiteState.PAIR
        if self.particles[ids[0]].geometry.shape == "dumbbell":
            return SiteState.MERGED
        return SiteState.SINGLE

    def occupied(self) -> list[tuple[int, int]]:
        return sorted(s for s, ids in self.sites.items() if ids)

    @property
    def count(self) -> int:
        return sum(len(ids) for ids in self.sites.values())

    def all_sites(self):
        return itertools.product(range(self.rows), range(self.cols))

    def check_site(self, site) -> tuple[int, int]:
        r, c = site
        if not (0 <= r < self.rows and 0 <= c < self.cols):
            raise DomainError(f"site {site} outside the {self.rows}x{self.cols} grid")
        return int(r), int(c)

    def position(self, site) -> np.ndarray:
        return np.array([site[1] * self.pitch_x, site[0] * self.pitch_y])

    def fingerprint(self) -> str:
        """Hash of the site contents, independent of the version counter."""
        text = ";".join(f"{r},{c}:{'/'.join(map(str, self.sites[(r, c)]))}"
                        for r, c in sorted(self.sites) if self.sites[(r, c)])
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def copy(self) -> "Occupancy":
        return replace(self, sites=dict(self.sites), particles=dict(self.particles))

    def as_grid(self) -> list[str]:
        mark = {SiteState.EMPTY: ".", SiteState.SINGLE: "o", SiteState.MERGED: "D", SiteState.PAIR: "P"}
        return ["".join(mark[self.state((r, c))] for c in range(self.cols)) for r in range(self.rows)]

    # -- mutation; every change bumps the version
    def add(self, site, geometry: EllipsoidGeometry, charge: float = 0.0, verdict=None) -> int:
        site = self.check_site(site)
        pid = self.next_id
        self.next_id += 1
        self.particles[pid] = Particle(pid, geometry, charge, verdict)
        self.sites[site] = self.contents(site) + (pid,)
        self.version += 1
        return pid

    def remove(self, site) -> tuple:
        site = self.check_site(site)
        ids = self.sites.pop(site, ())
        self.version += 1
        return ids

    def move(self, source, destination) -> None:
        ids = self.remove(source)
        self.sites[self.check_site(destination)] = self.contents(destination) + ids

    def set_verdict(self, pid: int, verdict: str) -> None:
        self.particles[pid] = replace(self.particles[pid], verdict=verdict)
        self.version += 1


@dataclass(frozen=True)
class ShapeDistribution:
    """Geometry and charge of freshly loaded particles.

    Radii are normal about ``radius`` with relative spread ``radius_spread``;
    a ``sphere_fraction`` of them are spheres, the rest prolate spheroids of
    equal volume with aspect uniform in ``aspect_range``. Charges are whole
    elementary charges, uniform in ``[-max_charge, max_charge]``.
    """

    sphere_fraction: float = 5 / 9
    radius: float = DEFAULT_RADIUS
    radius_spread: float = 0.0
    aspect_range: tuple[float, float] = (1.3, 1.6)
    max_charge: int = 10

    def draw(self, rng: np.random.Generator) -> tuple[EllipsoidGeometry, float]:
        radius = self.radius * (1 + self.radius_spread * rng.standard_normal()) if self.radius_spread else self.radius
        if rng.random() < self.sphere_fraction:
            geometry = EllipsoidGeometry.sphere(radius)
        else:
            geometry = EllipsoidGeometry.spheroid(radius, rng.uniform(*self.aspect_range))
        charge = int(rng.integers(-self.max_charge, self.max_charge + 1)) * ELEMENTARY_CHARGE
        return geometry, charge


def load_array(rows: int, cols: int, fill_probability: float, rng: np.random.Generator,
               shapes: ShapeDistribution = ShapeDistribution(), pitch_x: float = 1.77e-6,
               pitch_y: float = 2.66e-6) -> Occupancy:
    """Independent Bernoulli loading of every site, row-major."""
    if not 0 <= fill_probability <= 1:
        raise DomainError("fill probability must lie in [0, 1]")
    occ = Occupancy(rows, cols, pitch_x, pitch_y)
    for site in occ.all_sites():
        if rng.random() < fill_probability:
            occ.add(site, *shapes.draw(rng))
    return occ


# ---------------------------------------------------------------- planning

@dataclass(frozen=True)
class Move:
    source: tuple[int, int]
    destination: tuple[int, int] | None  # None: carried off the array
    path: tuple  # polyline of (x, y) points in metres

    @property
    def length(self) -> float:
        pts = np.asarray(self.path)
        return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))

    @property
    def discard(self) -> bool:
        return self.destination is None


@dataclass(frozen=True)
class MovePlan:
    moves: tuple[Move, ...]
    target: frozenset
    cost: float  # optimal assignment cost, sum of straight-line distances (m)
    version: int
    fingerprint: str
    exclusion_radius: float

    def __len__(self) -> int:
        return len(self.moves)

    @property
    def path_length(self) -> float:
        return sum(m.length for m in self.moves)


def _segment_distance(p, a, b) -> float:
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0 else min(max(float((p - a) @ ab) / denom, 0.0), 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


def path_clear(path, occupied_points, radius: float) -> bool:
    pts = [np.asarray(p, float) for p in path]
    limit = radius * (1 - _SLACK)
    for a, b in zip(pts[:-1], pts[1:]):
        for q in occupied_points:
            if _segment_distance(q, a, b) < limit:
                return False
    return True


def _route(occ: Occupancy, start, end, blockers, radius: float):
    """Straight segment if clear, else the shortest path through interstitial lanes.

    Lanes run half a pitch between rows and columns; with the default
    exclusion radius they never come closer than the radius to any site,
    and neither do the legs from a site to one of its four corners.
    """
    start, end = np.asarray(start, float), np.asarray(end, float)
    if path_clear([start, end], blockers, radius):
        return (tuple(start), tuple(end))
    hx, hy = occ.pitch_x / 2, occ.pitch_y / 2
    corners = lambda p: [p + np.array([sx * hx, sy * hy]) for sx in (-1, 1) for sy in (-1, 1)]

    def snap(p):  # end points off the lattice: nearest lane crossing
        return np.array([(math.floor(p[0] / occ.pitch_x) + 0.5) * occ.pitch_x,
                         (math.floor(p[1] / occ.pitch_y) + 0.5) * occ.pitch_y])

    c_start = corners(start)
    c_end = corners(end) if _on_lattice(occ, end) else [snap(end)]
    best = None
    for a in c_start:
        for b in c_end:
            for elbow in (np.array([b[0], a[1]]), np.array([a[0], b[1]])):
                path = [start, a, elbow, b, end]
                if not path_clear(path, blockers, radius):
                    continue
                length = sum(np.linalg.norm(q - p) for p, q in zip(path[:-1], path[1:]))
                if best is None or length < best[0] - 1e-15:
                    best = (length, path)
    if best is None:
        raise PlanningError(f"no collision-free route from {tuple(start)} to {tuple(end)}")
    # drop repeated points
    out = [best[1][0]]
    for p in best[1][1:]:
        if np.linalg.norm(p - out[-1]) > 1e-15:
            out.append(p)
    return tuple(tuple(p) for p in out)


def _on_lattice(occ: Occupancy, p) -> bool:
    c, r = p[0] / occ.pitch_x, p[1] / occ.pitch_y
    return abs(c - round(c)) < 1e-9 and abs(r - round(r)) < 1e-9


def _exit_point(occ: Occupancy, site) -> np.ndarray:
    """Drop point one pitch beyond the nearest edge of the grid."""
    r, c = site
    options = [(c + 1, np.array([-occ.pitch_x, r * occ.pitch_y])),
               (occ.cols - c, np.array([occ.cols * occ.pitch_x, r * occ.pitch_y])),
               (r + 1, np.array([c * occ.pitch_x, -occ.pitch_y])),
               (occ.rows - r, np.array([c * occ.pitch_x, occ.rows * occ.pitch_y]))]
    return min(options, key=lambda o: o[0])[1]


def assignment(occ: Occupancy, target) -> tuple[list, float]:
    """Optimal particle-to-target matching by Euclidean distance.

    Returns ``[(source, destination), ...]`` for every target and the total
    distance. Particles left unmatched are surplus.
    """
    sources = occ.occupied()
    targets = sorted(target)
    if len(sources) < len(targets):
        raise InfeasibleError(len(targets) - len(sources))
    if not targets:
        return [], 0.0
    src = np.array([occ.position(s) for s in sources])
    dst = np.array([occ.position(t) for t in targets])
    cost = np.linalg.norm(src[:, None, :] - dst[None, :, :], axis=-1)
    rows, cols = linear_sum_assignment(cost)
    pairs = [(sources[i], targets[j]) for i, j in zip(rows, cols)]
    return pairs, float(cost[rows, cols].sum())


def exclusion_radius(occ: Occupancy, factor: float = 0.5) -> float:
    return factor * min(occ.pitch_x, occ.pitch_y)


def plan_rearrangement(current: Occupancy, target, radius: float | None = None) -> MovePlan:
    """Moves that turn ``current`` into exactly the ``target`` set of occupied sites.

    Surplus particles are carried off the grid first. Remaining moves run
    whenever their destination is empty and a safe route exists; if none can
    run, one blocked particle is parked on a free buffer site.
    """
    target = frozenset(current.check_site(t) for t in target)
    radius = exclusion_radius(current) if radius is None else radius
    pairs, cost = assignment(current, target)
    used = {s for s, _ in pairs}
    surplus = [s for s in current.occupied() if s not in used]
    pending = [(s, d) for s, d in pairs if s != d]

    occupied = set(current.occupied())
    pos = current.position
    moves = []

    def blockers(exclude):
        return [pos(s) for s in occupied if s != exclude]

    for s in surplus:
        path = _route(current, pos(s), _exit_point(current, s), blockers(s), radius)
        moves.append(Move(s, None, path))
        occupied.discard(s)

    while pending:
        for i, (s, d) in enumerate(pending):
            if d in occupied:
                continue
            try:
                path = _route(current, pos(s), pos(d), blockers(s), radius)
            except PlanningError:
                continue
            moves.append(Move(s, d, path))
            occupied.discard(s)
            occupied.add(d)
            pending.pop(i)
            break
        else:
            # every runnable move is blocked: park the first source on a free site
            reserved = {d for _, d in pending} | occupied
            free = [f for f in current.all_sites() if f not in reserved]
            if not free:
                raise PlanningError("no free buffer site to break the blocking cycle")
            s, d = pending[0]
            buffer = min(free, key=lambda f: np.linalg.norm(pos(f) - pos(s)))
            path = _route(current, pos(s), pos(buffer), blockers(s), radius)
            moves.append(Move(s, buffer, path))
            occupied.discard(s)
            occupied.add(buffer)
            pending[0] = (buffer, d)
    return MovePlan(tuple(moves), target, cost, current.version, current.fingerprint(), radius)


def validate_plan(plan: MovePlan, occupancy: Occupancy) -> Occupancy:
    """Replay ``plan`` on a copy and return the final occupancy.

    Raises :class:`PlanningError` on the first move whose source is empty,
    destination is occupied, or path comes too close to an occupied site.
    """
    occ = occupancy.copy()
    for k, move in enumerate(plan.moves):
        if occ.state(move.source) is SiteState.EMPTY:
            raise PlanningError(f"move {k}: source {move.source} is empty")
        if move.destination is not None and occ.state(move.destination) is not SiteState.EMPTY:
            raise PlanningError(f"move {k}: destination {move.destination} is occupied")
        others = [occ.position(s) for s in occ.occupied() if s != move.source]
        if not path_clear(move.path, others, plan.exclusion_radius):
            raise PlanningError(f"move {k}: path passes within {plan.exclusion_radius:g} m of a site")
        if not np.allclose(move.path[0], occ.position(move.source)):
            raise PlanningError(f"move {k}: path does not start at its source")
        if move.discard:
            occ.remove(move.source)
        else:
            if not np.allclose(move.path[-1], occ.position(move.destination)):
                raise PlanningError(f"move {k}: path does not end at its destination")
            occ.move(move.source, move.destination)
    return occ


# ---------------------------------------------------------------- execution

@dataclass
class EventLog:
    """Line-oriented record of assembly operations with a logical clock."""

    records: list = field(default_factory=list)
    clock: int = 0

    def log(self, op: str, site, outcome: str, **extra) -> dict:
        rec = {"t": self.clock, "op": op,
               "site": None if site is None else list(site), "outcome": outcome}
        rec.update(extra)
        self.records.append(rec)
        self.clock += 1
        return rec

    def __iter__(self):
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def count(self, op: str, outcome: str | None = None) -> int:
        return sum(1 for r in self.records if r["op"] == op and (outcome is None or r["outcome"] == outcome))


@dataclass(frozen=True)
class ExecutionResult:
    occupancy: Occupancy
    log: EventLog
    defects: tuple  # target sites left empty
    extras: tuple  # occupied sites outside the target

    @property
    def defect_free(self) -> bool:
        return not self.defects and not self.extras


def execute_plan(plan: MovePlan, occupancy: Occupancy, rng: np.random.Generator,
                 transport_success_prob: float = TRANSPORT_SUCCESS,
                 log: EventLog | None = None) -> ExecutionResult:
    """Carry out ``plan`` on ``occupancy`` in place.

    Each transport succeeds with ``transport_success_prob``; a failure loses
    the particle. Discards always succeed. Raises :class:`StalePlanError`
    when the occupancy changed since the plan was made.
    """
    if not 0 <= transport_success_prob <= 1:
        raise DomainError("transport success probability must lie in [0, 1]")
    if occupancy.version != plan.version or occupancy.fingerprint() != plan.fingerprint:
        raise StalePlanError(f"plan made at version {plan.version}, occupancy is at {occupancy.version}")
    log = EventLog() if log is None else log
    for move in plan.moves:
        ids = occupancy.contents(move.source)
        if move.discard:
            occupancy.remove(move.source)
            log.log("discard", move.source, "removed", particles=list(ids))
            continue
        if rng.random() < transport_success_prob:
            occupancy.move(move.source, move.destination)
            log.log("move", move.source, "success", destination=list(move.destination), particles=list(ids))
        else:
            occupancy.remove(move.source)
            log.log("move", move.source, "lost", destination=list(move.destination), particles=list(ids))
    held = set(occupancy.occupied())
    defects = tuple(sorted(plan.target - held))
    extras = tuple(sorted(held - plan.target))
    log.log("report", None, "defect_free" if not defects and not extras else "defects",
            defects=[list(d) for d in defects], extras=[list(x) for x in extras])
    return ExecutionResult(occupancy, log, defects, extras)


# ---------------------------------------------------------------- merging

class MergeKind(str, enum.Enum):
    DUMBBELL = "dumbbell"
    LOST = "lost"
    SEPARATED = "separated_coulomb"


@dataclass(frozen=True)
class MergeModel:
    dumbbell: float = 0.25
    lost: float = 0.5
    separated: float = 0.25

    def __post_init__(self):
        probs = (self.dumbbell, self.lost, self.separated)
        if min(probs) < 0 or not math.isclose(sum(probs), 1.0, abs_tol=1e-12):
            raise DomainError(f"merge outcome probabilities must be >= 0 and sum to 1, got {probs}")

    def sample(self, rng: np.random.Generator) -> MergeKind:
        u = rng.random()
        if u < self.dumbbell:
            return MergeKind.DUMBBELL
        if u < self.dumbbell + self.lost:
            return MergeKind.LOST
        return MergeKind.SEPARATED


@dataclass(frozen=True)
class MergeOutcome:
    kind: MergeKind
    site: tuple[int, int]
    consumed: tuple  # ids of the two input particles
    product: int | None = None  # id of the dumbbell
    geometry: EllipsoidGeometry | None = None
    separation: float | None = None  # m, for the separated branch when charges repel


def coulomb_force(a, b) -> np.ndarray:
    """Force on ``a`` from ``b``; both need ``position`` and ``charge``."""
    d = np.asarray(a.position, float) - np.asarray(b.position, float)
    r = float(np.linalg.norm(d))
    if r == 0:
        raise SingularityError("coincident charges")
    return a.charge * b.charge / (4 * math.pi * epsilon_0 * r**3) * d


@dataclass
class _Point:
    position: np.ndarray
    charge: float


@dataclass(frozen=True)
class PairResult:
    positions: np.ndarray  # (2, 3), m
    separation: float
    converged: bool
    steps: int


def simulate_pair(array: TrapArray, geometries, charges, env: GasEnvironment, site=(0, 0),
                  offset=(0.0, 0.0, 20e-9), dt: float | None = None, max_steps: int = 200_000,
                  tolerance: float = 1e-15) -> PairResult:
    """Two point particles in one trap under optical force, gravity, Coulomb repulsion and gas drag.

    Zero-temperature velocity Verlet with exact velocity damping, started
    from ``offset`` either side of the single-particle equilibrium and run
    until both net forces fall below ``tolerance`` (N).
    """
    single = array.single(*site)
    home = find_equilibrium(array, geometries[0], *site)
    pos = np.array([home + np.asarray(offset) / 2, home - np.asarray(offset) / 2], float)
    vel = np.zeros((2, 3))
    masses = np.array([g.mass for g in geometries])
    gammas = np.array([damping_rates(g, env).rates.mean() for g in geometries])
    omega = max(float(np.max(trap_frequencies(array.site(*site), g, axial_force=array.axial_force,
                                              gravity=array.gravity))) for g in geometries)
    dt = 0.05 / max(omega, gammas.max()) if dt is None else dt
    decay = np.exp(-gammas * dt)

    def forces(p):
        f = np.array([trap_force(p[k], single, geometries[k]) for k in range(2)])
        if charges[0] * charges[1] == 0:
            return f
        fc = coulomb_force(_Point(p[0], charges[0]), _Point(p[1], charges[1]))
        f[0] += fc
        f[1] -= fc
        return f

    f = forces(pos)
    for n in range(max_steps):
        vel += 0.5 * dt * f / masses[:, None]
        pos += dt * vel
        f = forces(pos)
        vel += 0.5 * dt * f / masses[:, None]
        vel *= decay[:, None]
        if n % 64 == 0 and np.max(np.abs(f)) < tolerance and np.max(np.abs(vel)) * masses.max() < tolerance * dt * 64:
            return PairResult(pos, float(np.linalg.norm(pos[0] - pos[1])), True, n + 1)
    return PairResult(pos, float(np.linalg.norm(pos[0] - pos[1])), False, max_steps)


def merge_particles(site_a, site_b, occupancy: Occupancy, rng: np.random.Generator,
                    model: MergeModel = MergeModel(), log: EventLog | None = None,
                    array: TrapArray | None = None, env: GasEnvironment | None = None) -> MergeOutcome:
    """Bring the particle at ``site_b`` into the trap at ``site_a`` and sample the result.

    Both sites must hold one particle judged spherical. A dumbbell replaces
    both with two touching spheres of their mean volume; ``lost`` empties
    the trap; ``separated_coulomb`` keeps both in one trap. When ``array``
    and ``env`` are given and the charges repel, the separated pair is
    relaxed with :func:`simulate_pair` to report its spacing.
    """
    a = occupancy.check_site(site_a)
    b = occupancy.check_site(site_b)
    if a == b:
        raise DomainError("merge needs two different sites")
    for s in (a, b):
        if occupancy.state(s) is not SiteState.SINGLE:
            raise SelectionError(f"site {s} holds {occupancy.state(s).value}, need a single particle")
        p = occupancy.particles[occupancy.contents(s)[0]]
        if not p.looks_spherical:
            raise SelectionError(f"particle {p.id} at {s} is not spherical")
    log = EventLog() if log is None else log
    pa = occupancy.particles[occupancy.contents(a)[0]]
    pb = occupancy.particles[occupancy.contents(b)[0]]
    kind = model.sample(rng)
    consumed = (pa.id, pb.id)
    if kind is MergeKind.DUMBBELL:
        radius = ((pa.geometry.volume + pb.geometry.volume) / (2 * 4 / 3 * math.pi)) ** (1 / 3)
        geometry = EllipsoidGeometry.dumbbell(radius, density=pa.geometry.density,
                                              permittivity=pa.geometry.permittivity)
        occupancy.remove(a)
        occupancy.remove(b)
        pid = occupancy.add(a, geometry, pa.charge + pb.charge)
        outcome = MergeOutcome(kind, a, consumed, pid, geometry)
    elif kind is MergeKind.LOST:
        occupancy.remove(a)
        occupancy.remove(b)
        outcome = MergeOutcome(kind, a, consumed)
    else:
        occupancy.move(b, a)
        separation = None
        if array is not None and env is not None and pa.charge * pb.charge > 0:
            separation = simulate_pair(array, (pa.geometry, pb.geometry), (pa.charge, pb.charge),
                                       env, site=a).separation
        outcome = MergeOutcome(kind, a, consumed, separation=separation)
    log.log("merge", a, kind.value, source=list(b), particles=list(consumed),
            product=outcome.product, separation_m=outcome.separation)
    return outcome
