import math
import time

import numpy as np
import pytest

import theory_lab
from errors import InsufficientTrialsError
from theory_lab import CoverageInstance, MacroChain, MisrankInstance


def test_leakage_grid_matches_closed_form():
    started = time.perf_counter()
    grid = theory_lab.leakage_grid()
    assert time.perf_counter() - started < 5.0
    assert grid["closed_form"].shape == (19, 19, 19)
    assert np.abs(grid["simulated"] - grid["closed_form"]).max() < 1e-10
    # axis 1 is gamma: more leakage, less relevant mass
    assert (np.diff(grid["closed_form"], axis=1) < 0).all()


def test_scalar_leakage_agrees_with_grid():
    chain = MacroChain(gamma=0.2, epsilon=0.1, rho=0.3)
    assert theory_lab.leakage_simulated(chain) == pytest.approx(theory_lab.leakage_closed_form(chain), abs=1e-10)
    assert theory_lab.leakage_closed_form(MacroChain(0.0, 0.5, 0.5)) == 1.0
    with pytest.raises(ValueError):
        MacroChain(0.1, 0.1, 1.0)


def test_misrank_bound_spot_value():
    assert round(theory_lab.misrank_bound(MisrankInstance(5, 10, 1.0, 0.5)), 5) == 0.08208


def test_misrank_bound_holds_and_gap_matches_on_grid():
    grid = theory_lab.default_misrank_grid()
    assert len(grid) >= 20
    started = time.perf_counter()
    mis, gap = theory_lab.check_misranking(trials=100_000, seed=0)
    assert time.perf_counter() - started < 60.0
    assert mis.passed, mis.detail
    assert gap.passed, gap.detail


def test_single_misrank_estimate():
    instance = MisrankInstance(2, 5, 1.0, 1.0)
    est = theory_lab.misrank_simulate(instance, trials=50_000, rng=np.random.default_rng(1))
    assert est.trials == 50_000
    assert est.expected_gap == pytest.approx(0.4)
    assert est.probability <= theory_lab.misrank_bound(instance)
    assert abs(est.probability - theory_lab.misrank_exact(instance)) < 0.01
    with pytest.raises(InsufficientTrialsError):
        theory_lab.misrank_simulate(instance, trials=100)
    with pytest.raises(ValueError):
        MisrankInstance(6, 5, 1.0, 1.0)


def test_coverage_never_exceeds_k_times_c():
    rng = np.random.default_rng(0)
    for _ in range(200):
        c = int(rng.integers(1, 4))
        instance = theory_lab.random_coverage_instance(rng, c)
        assert all(len(u & instance.necessary) <= c for u in instance.units)
        assert theory_lab.max_covered(instance) <= instance.k * c


def test_three_single_atom_units_cannot_cover_five_atoms():
    assert theory_lab.coverage_bound(3, 1, 5) == pytest.approx(0.6)
    units = [frozenset({i}) for i in range(5)]
    assert theory_lab.max_covered(CoverageInstance(units, frozenset(range(5)), k=3, c=1)) == 3


def test_decomposition_lifts_the_coverage_ceiling():
    result = theory_lab.decomposition_coverage(k=2, c=1, sub_demands=[2, 2, 2], total_demand=6)
    assert result["single"] == pytest.approx(1 / 3)
    assert result["decomposed"] == 1.0
    assert result["sub_queries"] == 3


def test_kg_roundtrip_is_exact():
    rng = np.random.default_rng(0)
    for _ in range(500):
        assert theory_lab.kg_roundtrip(theory_lab.random_kg(rng))
    assert theory_lab.kg_roundtrip([("a", "likes", "a"), ("a", "likes", "b")])
    assert theory_lab.kg_roundtrip([])


def test_contextual_distinguishability():
    demo = theory_lab.contextual_distinguishability_demo()
    assert (demo["atoms"], demo["projected_triples"]) == (2, 1)
    assert demo["passed"]


def test_noise_sweep_mass_falls_with_cross_region_noise():
    rows = theory_lab.noise_sweep()
    masses = [r["relevant_mass"] for r in rows]
    assert masses[0] == pytest.approx(1.0)
    assert all(b <= a + 1e-12 for a, b in zip(masses, masses[1:]))


def test_quick_theory_checks_pass():
    results = theory_lab.run_theory_checks(seed=0, grid_spec="quick", workers=2)
    failed = [r.name for r in results if not r.passed]
    assert not failed
    assert all(isinstance(r.to_dict(), dict) for r in results)


@pytest.mark.slow
def test_full_theory_checks_pass():
    assert all(r.passed for r in theory_lab.run_theory_checks(seed=0, grid_spec="full"))


def test_bound_is_monotone_in_purity():
    values = [theory_lab.misrank_bound(MisrankInstance(r, 10, 1.0, 1.0)) for r in range(1, 11)]
    assert values == sorted(values, reverse=True)
    assert math.isclose(values[-1], math.exp(-100 / 40))
