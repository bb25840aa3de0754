import itertools
import math

import numpy as np
import pytest
from scipy.constants import e as QE
from scipy.stats import binomtest, chisquare

from nanoarray.assembly import (EventLog, MergeKind, MergeModel, Occupancy, ShapeDistribution, SiteState,
                                assignment, coulomb_force, execute_plan, load_array, merge_particles,
                                path_clear, plan_rearrangement, simulate_pair, validate_plan)
from nanoarray.errors import (DomainError, InfeasibleError, SelectionError, SingularityError,
                              StalePlanError)
from nanoarray.gas import GasEnvironment
from nanoarray.optics import EllipsoidGeometry, TrapArray

from conftest import RADIUS

SPHERE = EllipsoidGeometry.sphere(RADIUS)


def occupancy(rows, cols, sites, geometry=SPHERE, charge=0.0):
    occ = Occupancy(rows, cols)
    for s in sites:
        occ.add(s, geometry, charge)
    return occ


def brute_force_cost(occ, target):
    src = [occ.position(s) for s in occ.occupied()]
    dst = [occ.position(t) for t in sorted(target)]
    return min(sum(np.linalg.norm(src[i] - d) for i, d in zip(perm, dst))
               for perm in itertools.permutations(range(len(src)), len(dst)))


def random_instance(rng, rows=3, cols=3, max_particles=5):
    sites = list(itertools.product(range(rows), range(cols)))
    n = int(rng.integers(1, max_particles + 1))
    k = int(rng.integers(0, n + 1))
    cur = [sites[i] for i in rng.choice(len(sites), n, replace=False)]
    tgt = [sites[i] for i in rng.choice(len(sites), k, replace=False)]
    return occupancy(rows, cols, cur), frozenset(tgt)


# ---------------------------------------------------------------- loading

@pytest.mark.parametrize("p, expected", [(0.0, 0), (1.0, 9)])
def test_load_extremes(p, expected, rng):
    occ = load_array(3, 3, p, rng)
    assert occ.count == expected
    assert all(occ.state(s) is (SiteState.SINGLE if p else SiteState.EMPTY) for s in occ.all_sites())


def test_load_statistics():
    rng = np.random.default_rng(7)
    counts = np.array([load_array(4, 4, 0.5, rng).count for _ in range(10_000)])
    # mean of 1e4 Binomial(16, 1/2) draws: sd of the mean is 2 / 100
    assert abs(counts.mean() - 8.0) < 3 * 0.02
    assert counts.var() == pytest.approx(4.0, rel=0.06)


def test_load_shape_mixture(rng):
    shapes = ShapeDistribution(sphere_fraction=0.5, max_charge=3)
    occ = load_array(20, 20, 1.0, rng, shapes)
    spheres = sum(p.geometry.is_sphere() for p in occ.particles.values())
    assert binomtest(spheres, 400, 0.5).pvalue > 1e-3
    charges = {round(p.charge / QE) for p in occ.particles.values()}
    assert charges <= set(range(-3, 4))
    for p in occ.particles.values():
        assert p.geometry.volume == pytest.approx(SPHERE.volume, rel=1e-12)
        if not p.geometry.is_sphere():
            assert 1.3 <= p.geometry.r1 / p.geometry.r2 <= 1.6


def test_load_rejects_bad_probability(rng):
    with pytest.raises(DomainError):
        load_array(2, 2, 1.5, rng)


def test_ids_unique():
    with pytest.raises(DomainError):
        Occupancy(2, 2, sites={(0, 0): (1,), (0, 1): (1,)})


# ---------------------------------------------------------------- planning

def test_identity_target_gives_empty_plan():
    occ = occupancy(3, 3, [(0, 0), (1, 2), (2, 1)])
    plan = plan_rearrangement(occ, occ.occupied())
    assert len(plan) == 0
    assert plan.cost == 0.0


def test_infeasible_reports_deficit():
    occ = occupancy(3, 3, [(0, 0)])
    with pytest.raises(InfeasibleError) as info:
        plan_rearrangement(occ, [(0, 0), (1, 1), (2, 2)])
    assert info.value.deficit == 2


def test_plan_cost_matches_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(150):
        occ, target = random_instance(rng, max_particles=6)
        plan = plan_rearrangement(occ, target)
        assert plan.cost == pytest.approx(brute_force_cost(occ, target), rel=1e-12, abs=1e-18)


def test_plan_replay_is_safe_and_exact():
    rng = np.random.default_rng(12)
    for _ in range(150):
        occ, target = random_instance(rng, 4, 4, 8)
        plan = plan_rearrangement(occ, target)
        final = validate_plan(plan, occ)
        assert set(final.occupied()) == set(target)
        assert all(final.state(s) is SiteState.SINGLE for s in target)


def test_blocked_cycle_uses_buffer():
    # a full row shifted by one with the neighbouring site blocked forces ordering
    occ = occupancy(1, 4, [(0, 0), (0, 1), (0, 2)])
    plan = plan_rearrangement(occ, [(0, 1), (0, 2), (0, 3)])
    final = validate_plan(plan, occ)
    assert set(final.occupied()) == {(0, 1), (0, 2), (0, 3)}


def test_surplus_is_discarded_off_grid():
    occ = occupancy(3, 3, [(0, 0), (1, 1), (2, 2)])
    plan = plan_rearrangement(occ, [(1, 1)])
    discards = [m for m in plan.moves if m.discard]
    assert len(discards) == 2
    for m in discards:
        x, y = m.path[-1]
        assert not (0 <= x <= 2 * occ.pitch_x and 0 <= y <= 2 * occ.pitch_y)


def test_path_clear_boundary():
    radius = 1.0
    assert path_clear([(0, 0), (2, 0)], [np.array([1.0, 1.0])], radius)
    assert not path_clear([(0, 0), (2, 0)], [np.array([1.0, 0.99])], radius)


def test_assignment_prefers_short_moves():
    occ = occupancy(1, 3, [(0, 0), (0, 2)])
    pairs, cost = assignment(occ, [(0, 1), (0, 2)])
    assert dict(pairs) == {(0, 0): (0, 1), (0, 2): (0, 2)}
    assert cost == pytest.approx(occ.pitch_x)


# ---------------------------------------------------------------- execution

def test_execute_certain_success_matches_target(rng):
    occ = occupancy(4, 4, [(0, 1), (0, 2), (1, 0), (1, 3), (2, 2), (3, 0), (3, 1), (3, 3)])
    target = [(0, 0), (0, 3), (1, 1), (1, 2), (2, 1), (2, 2), (3, 0), (3, 3)]
    plan = plan_rearrangement(occ, target)
    result = execute_plan(plan, occ, rng, 1.0)
    assert result.defect_free
    assert set(result.occupancy.occupied()) == set(target)
    assert result.log.count("move", "lost") == 0


def test_stale_plan_rejected(rng):
    occ = occupancy(3, 3, [(0, 0)])
    plan = plan_rearrangement(occ, [(2, 2)])
    occ.add((1, 1), SPHERE)
    with pytest.raises(StalePlanError):
        execute_plan(plan, occ, rng)


def test_defect_free_rate_is_bernoulli_product():
    # twelve disjoint one-step moves, none blocking another
    rows, cols = 4, 6
    sources = [(r, c) for r in range(rows) for c in (0, 2, 4)]
    target = [(r, c + 1) for r, c in sources]
    occ = occupancy(rows, cols, sources)
    plan = plan_rearrangement(occ, target)
    assert len(plan) == 12
    rng = np.random.default_rng(13)
    trials = 10_000
    wins = sum(execute_plan(plan, occ.copy(), rng, 0.99).defect_free for _ in range(trials))
    p = 0.99**12
    ci = binomtest(wins, trials, p).proportion_ci(0.997)
    assert ci.low <= p <= ci.high


def test_particle_conservation():
    rng = np.random.default_rng(14)
    for _ in range(200):
        occ, target = random_instance(rng, 4, 4, 8)
        before = occ.count
        result = execute_plan(plan_rearrangement(occ, target), occ, rng, 0.7)
        log = result.log
        lost = sum(len(r["particles"]) for r in log if r["op"] == "move" and r["outcome"] == "lost")
        removed = sum(len(r["particles"]) for r in log if r["op"] == "discard")
        assert result.occupancy.count == before - lost - removed
        ids = [pid for s in result.occupancy.occupied() for pid in result.occupancy.contents(s)]
        assert len(ids) == len(set(ids))


def test_execute_rejects_bad_probability(rng):
    occ = occupancy(2, 2, [(0, 0)])
    with pytest.raises(DomainError):
        execute_plan(plan_rearrangement(occ, [(0, 0)]), occ, rng, -0.1)


# ---------------------------------------------------------------- merging

def test_merge_model_validation():
    with pytest.raises(DomainError):
        MergeModel(0.5, 0.5, 0.5)
    with pytest.raises(DomainError):
        MergeModel(1.2, -0.2, 0.0)


def test_merge_frequencies_chi_square():
    rng = np.random.default_rng(15)
    model = MergeModel()
    n = 10_000
    counts = {k: 0 for k in MergeKind}
    for _ in range(n):
        occ = occupancy(1, 2, [(0, 0), (0, 1)])
        counts[merge_particles((0, 0), (0, 1), occ, rng, model).kind] += 1
    observed = [counts[MergeKind.DUMBBELL], counts[MergeKind.LOST], counts[MergeKind.SEPARATED]]
    assert chisquare(observed, np.array([0.25, 0.5, 0.25]) * n).pvalue > 1e-3


def test_merge_dumbbell_geometry(rng):
    occ = occupancy(1, 2, [(0, 0), (0, 1)], charge=2 * QE)
    out = merge_particles((0, 0), (0, 1), occ, rng, MergeModel(1.0, 0.0, 0.0))
    assert out.kind is MergeKind.DUMBBELL
    assert occ.state((0, 0)) is SiteState.MERGED
    assert occ.state((0, 1)) is SiteState.EMPTY
    g = out.geometry
    assert g.shape == "dumbbell"
    assert g.r1 == pytest.approx(2 * RADIUS)
    assert g.r2 == pytest.approx(RADIUS)
    assert occ.particles[out.product].charge == pytest.approx(4 * QE)
    assert not occ.particles[out.product].looks_spherical


def test_merge_branch_bookkeeping(rng):
    occ = occupancy(1, 2, [(0, 0), (0, 1)])
    log = EventLog()
    merge_particles((0, 0), (0, 1), occ, rng, MergeModel(0.0, 1.0, 0.0), log)
    assert occ.count == 0
    assert log.count("merge", "lost") == 1
    occ = occupancy(1, 2, [(0, 0), (0, 1)])
    merge_particles((0, 0), (0, 1), occ, rng, MergeModel(0.0, 0.0, 1.0))
    assert occ.state((0, 0)) is SiteState.PAIR
    assert occ.count == 2


def test_merge_selection_errors(rng):
    occ = occupancy(1, 3, [(0, 0)])
    occ.add((0, 1), EllipsoidGeometry.spheroid(RADIUS, 1.4))
    with pytest.raises(SelectionError):
        merge_particles((0, 0), (0, 1), occ, rng)
    with pytest.raises(SelectionError):
        merge_particles((0, 0), (0, 2), occ, rng)
    with pytest.raises(DomainError):
        merge_particles((0, 0), (0, 0), occ, rng)
    # a sphere whose measurement flagged torsion is refused too
    occ = occupancy(1, 2, [(0, 0), (0, 1)])
    occ.set_verdict(occ.contents((0, 1))[0], "anisotropic")
    with pytest.raises(SelectionError):
        merge_particles((0, 0), (0, 1), occ, rng)


class _P:
    def __init__(self, position, charge):
        self.position, self.charge = position, charge


def test_coulomb_force_law():
    r = 1e-6
    f = coulomb_force(_P([r, 0, 0], QE), _P([0, 0, 0], QE))
    assert f[0] == pytest.approx(QE**2 / (4 * math.pi * 8.8541878128e-12 * r**2), rel=1e-9)
    assert f[0] > 0  # like charges push a away from b
    assert coulomb_force(_P([r, 0, 0], QE), _P([0, 0, 0], -QE))[0] < 0
    assert np.all(coulomb_force(_P([r, 0, 0], 0.0), _P([0, 0, 0], QE)) == 0)
    with pytest.raises(SingularityError):
        coulomb_force(_P([0, 0, 0], QE), _P([0, 0, 0], QE))


def test_like_charges_settle_apart_in_one_trap():
    array = TrapArray.grid(1, 1)
    res = simulate_pair(array, (SPHERE, SPHERE), (10 * QE, 10 * QE), GasEnvironment(2000.0))
    assert res.converged
    assert res.separation > 10e-9
    # a stable pair stays inside the trap: well within one waist of the focus
    assert np.all(np.abs(res.positions[:, :2]) < 0.3e-6)


def test_neutral_pair_collapses():
    array = TrapArray.grid(1, 1)
    res = simulate_pair(array, (SPHERE, SPHERE), (0.0, 0.0), GasEnvironment(2000.0))
    assert res.separation < 1e-9
