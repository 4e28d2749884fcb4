"""Markov chain, FPMC and popularity baselines."""

from collections import defaultdict
from datetime import timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import T0, make_event
from evrac.baselines import FpmcHyper, FpmcRecommender, MarkovRecommender, PopularityRecommender
from evrac.errors import UsageError


def _events_from_sequence(driver, stations):
    return [
        make_event(f"{driver}-{i:03d}", driver, sid, T0 + timedelta(hours=i))
        for i, sid in enumerate(stations)
    ]


# ---------------------------------------------------------------------------
# Markov chain
# ---------------------------------------------------------------------------

def test_mc_worked_example():
    # cs1->cs2 x3, cs1->cs3 x1; M=3, lambda=1 -> row cs1 = (1/7, 4/7, 2/7)
    seq = ["cs1", "cs2", "cs1", "cs2", "cs1", "cs2", "cs1", "cs3"]
    model = MarkovRecommender(["cs1", "cs2", "cs3"]).fit({"d1": _events_from_sequence("d1", seq)})
    row = model.per_driver["d1"][0]
    assert row == pytest.approx([1 / 7, 4 / 7, 2 / 7], abs=1e-12)


def test_mc_no_data_uniform_rows():
    model = MarkovRecommender(["cs1", "cs2"]).fit({})
    assert np.allclose(model.global_matrix, 0.5)


def test_mc_unsmoothed_single_transition():
    model = MarkovRecommender(["cs1", "cs2"], lam=0.0).fit(
        {"d1": _events_from_sequence("d1", ["cs1", "cs1"])}
    )
    assert model.per_driver["d1"][0] == pytest.approx([1.0, 0.0])


def test_mc_unsmoothed_unseen_row_uniform():
    model = MarkovRecommender(["cs1", "cs2"], lam=0.0).fit(
        {"d1": _events_from_sequence("d1", ["cs1", "cs1"])}
    )
    assert model.per_driver["d1"][1] == pytest.approx([0.5, 0.5])


@settings(max_examples=50)
@given(st.integers(2, 5), st.lists(st.integers(0, 4), min_size=2, max_size=30), st.floats(0, 3))
def test_mc_rows_sum_to_one(m, seq_idx, lam):
    stations = [f"cs{i}" for i in range(m)]
    seq = [stations[i % m] for i in seq_idx]
    model = MarkovRecommender(stations, lam=lam).fit({"d": _events_from_sequence("d", seq)})
    for matrix in [model.global_matrix, model.per_driver.get("d", model.global_matrix)]:
        assert matrix.sum(axis=1) == pytest.approx(np.ones(m), abs=1e-12)


def _brute_force_row(seq, stations, source, lam):
    counts = defaultdict(int)
    for a, b in zip(seq, seq[1:]):
        counts[(a, b)] += 1
    total = sum(c for (a, _), c in counts.items() if a == source) + lam * len(stations)
    if total == 0:
        return [1 / len(stations)] * len(stations)
    return [(counts[(source, t)] + lam) / total for t in stations]


def test_mc_matches_brute_force_oracle():
    rng = np.random.default_rng(123)
    for trial in range(100):
        m = int(rng.integers(2, 6))
        n = int(rng.integers(2, 31))
        lam = float(rng.choice([0.0, 0.5, 1.0]))
        stations = [f"cs{i}" for i in range(m)]
        seq = [stations[int(rng.integers(0, m))] for _ in range(n)]
        model = MarkovRecommender(stations, lam=lam).fit({"d": _events_from_sequence("d", seq)})
        matrix = model.per_driver["d"]
        for i, source in enumerate(stations):
            assert matrix[i] == pytest.approx(_brute_force_row(seq, stations, source, lam), abs=1e-12)


def test_mc_predict_top1():
    model = MarkovRecommender(["cs0", "cs1", "cs2"])
    model.per_driver["d"] = np.array([[0.1, 0.6, 0.3]] * 3)
    history = _events_from_sequence("d", ["cs0"])
    assert model.rank("d", history, 1) == ["cs1"]
    assert model.rank("d", history, 3) == ["cs1", "cs2", "cs0"]


def test_mc_predict_tie_breaks_by_station_id():
    model = MarkovRecommender(["cs0", "cs1", "cs2"])
    model.per_driver["d"] = np.full((3, 3), 1 / 3)
    assert model.rank("d", _events_from_sequence("d", ["cs2"]), 1) == ["cs0"]


def test_mc_unknown_last_station_uniform_fallback():
    model = MarkovRecommender(["cs0", "cs1"]).fit(
        {"d": _events_from_sequence("d", ["cs0", "cs1", "cs0"])}
    )
    row = model.transition_row("d", "unknown-station")
    assert row == pytest.approx([0.5, 0.5])


def test_mc_unknown_driver_uses_global():
    model = MarkovRecommender(["cs0", "cs1"]).fit(
        {"d": _events_from_sequence("d", ["cs0", "cs1", "cs0", "cs1"])}
    )
    row = model.transition_row("stranger", "cs0")
    assert row == pytest.approx(model.global_matrix[0])


# ---------------------------------------------------------------------------
# FPMC
# ---------------------------------------------------------------------------

def test_fpmc_hand_fixed_factors_score():
    model = FpmcRecommender(["cs0", "cs1"], FpmcHyper(factors=1))
    model.driver_index = {"d": 0}
    model.UI = np.array([[2.0]])
    model.IU = np.array([[0.5], [1.5]])
    model.LI = np.array([[3.0], [0.0]])
    model.IL = np.array([[0.25], [0.75]])
    scores = model.scores("d", "cs0")
    # <U_d, V_i> + <L_cs0, W_i> = 2*0.5 + 3*0.25 and 2*1.5 + 3*0.75
    assert scores == pytest.approx([1.75, 5.25])


def test_fpmc_deterministic_for_seed():
    train = {"d": _events_from_sequence("d", ["cs0", "cs1"] * 6)}
    a = FpmcRecommender(["cs0", "cs1"], FpmcHyper(factors=4, epochs=10, seed=9)).fit(train)
    b = FpmcRecommender(["cs0", "cs1"], FpmcHyper(factors=4, epochs=10, seed=9)).fit(train)
    assert np.array_equal(a.UI, b.UI)
    assert np.array_equal(a.IU, b.IU)
    assert np.array_equal(a.LI, b.LI)
    assert np.array_equal(a.IL, b.IL)


def test_fpmc_ranking_invariant_to_score_shift():
    model = FpmcRecommender(["cs0", "cs1", "cs2"], FpmcHyper(factors=2))
    from evrac.baselines import _rank_row

    row = np.array([0.3, -1.2, 2.0])
    assert _rank_row(row, model.stations, 3) == _rank_row(row + 17.5, model.stations, 3)


def test_fpmc_learns_deterministic_cycle():
    train = {}
    for d in range(4):
        train[f"d{d}"] = _events_from_sequence(f"d{d}", ["cs0", "cs1"] * 12)
    model = FpmcRecommender(["cs0", "cs1"], FpmcHyper(factors=8, epochs=60, seed=3)).fit(train)
    hits = 0
    total = 0
    for d in range(4):
        for last, expected in (("cs0", "cs1"), ("cs1", "cs0")):
            hist = _events_from_sequence(f"d{d}", [last])
            hits += model.rank(f"d{d}", hist, 1)[0] == expected
            total += 1
    assert hits / total >= 0.9


def test_fpmc_empty_train_errors():
    with pytest.raises(UsageError):
        FpmcRecommender(["cs0"]).fit({})


def test_fpmc_unknown_driver_ranks_by_transition_only():
    train = {"d": _events_from_sequence("d", ["cs0", "cs1"] * 8)}
    model = FpmcRecommender(["cs0", "cs1"], FpmcHyper(factors=4, epochs=30, seed=1)).fit(train)
    ranked = model.rank("stranger", _events_from_sequence("stranger", ["cs0"]), 2)
    assert set(ranked) == {"cs0", "cs1"}


# ---------------------------------------------------------------------------
# Popularity
# ---------------------------------------------------------------------------

def test_popularity_per_driver_counts():
    train = {
        "d1": _events_from_sequence("d1", ["cs1", "cs1", "cs0"]),
        "d2": _events_from_sequence("d2", ["cs2"] * 5),
    }
    model = PopularityRecommender(["cs0", "cs1", "cs2"]).fit(train)
    assert model.rank("d1", [], 1) == ["cs1"]
    assert model.rank("d2", [], 1) == ["cs2"]
    # unknown driver: global counts (cs2 dominates)
    assert model.rank("nobody", [], 1) == ["cs2"]


def test_popularity_empty_model_uniform():
    model = PopularityRecommender(["cs0", "cs1"])
    assert model.probabilities("x", []) == pytest.approx([0.5, 0.5])
    assert model.rank("x", [], 2) == ["cs0", "cs1"]
