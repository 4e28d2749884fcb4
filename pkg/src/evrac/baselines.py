"""Classic next-station recommenders: first-order Markov chain, FPMC and a
visit-frequency baseline, all behind the same ranking interface as the
actor-critic model so one evaluation harness serves everything."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dataset import ChargingEvent
from .errors import UsageError
from .nn import sigmoid, softmax
from .seeding import rng_for

logger = logging.getLogger(__name__)


def _rank_row(row: np.ndarray, stations: list[str], k: int) -> list[str]:
    """Top-k station ids by score, ties broken by station id."""
    if k < 1:
        raise UsageError("k must be >= 1")
    order = sorted(range(len(stations)), key=lambda i: (-row[i], stations[i]))
    return [stations[i] for i in order[:k]]


def _train_sequences(train_events: dict[str, list[ChargingEvent]]) -> dict[str, list[str]]:
    out = {}
    for driver in sorted(train_events):
        evs = sorted(train_events[driver], key=lambda e: (e.start_time, e.event_id))
        out[driver] = [e.station_id for e in evs]
    return out


class MarkovRecommender:
    """Per-driver first-order transition matrices with Laplace smoothing.

    Drivers without enough training data fall back to a matrix pooled over
    all drivers; an unknown previous station falls back to a uniform row.
    """

    def __init__(self, stations: list[str], lam: float = 1.0):
        self.stations = list(stations)
        self.index = {sid: i for i, sid in enumerate(self.stations)}
        self.lam = lam
        self.per_driver: dict[str, np.ndarray] = {}
        m = len(self.stations)
        self.global_matrix = np.full((m, m), 1.0 / m)

    def _normalize(self, counts: np.ndarray) -> np.ndarray:
        m = len(self.stations)
        rows = np.empty_like(counts)
        for i in range(m):
            total = counts[i].sum() + self.lam * m
            if total == 0:
                rows[i] = 1.0 / m
            else:
                rows[i] = (counts[i] + self.lam) / total
        return rows

    def fit(self, train_events: dict[str, list[ChargingEvent]]) -> "MarkovRecommender":
        m = len(self.stations)
        global_counts = np.zeros((m, m))
        for driver, seq in _train_sequences(train_events).items():
            counts = np.zeros((m, m))
            for a, b in zip(seq, seq[1:]):
                counts[self.index[a], self.index[b]] += 1.0
            global_counts += counts
            if len(seq) >= 2:
                self.per_driver[driver] = self._normalize(counts)
        self.global_matrix = self._normalize(global_counts)
        return self

    def transition_row(self, driver_id: str, last_station: str | None) -> np.ndarray:
        matrix = self.per_driver.get(driver_id, self.global_matrix)
        if last_station is None or last_station not in self.index:
            return np.full(len(self.stations), 1.0 / len(self.stations))
        return matrix[self.index[last_station]]

    def probabilities(self, driver_id: str, history: list[ChargingEvent]) -> np.ndarray:
        last = history[-1].station_id if history else None
        return self.transition_row(driver_id, last)

    def rank(self, driver_id: str, history: list[ChargingEvent], k: int, when=None) -> list[str]:
        return _rank_row(self.probabilities(driver_id, history), self.stations, k)


@dataclass(frozen=True)
class FpmcHyper:
    factors: int = 16
    lr: float = 0.05
    reg: float = 0.01
    negatives: int = 4
    epochs: int = 200
    seed: int = 0


class FpmcRecommender:
    """Factorized personalized Markov chain trained by pairwise ranking.

    score(u, last, i) = <U_u, V_i> + <L_last, W_i>; each observed transition
    is scored above sampled negative stations via a BPR update.
    """

    def __init__(self, stations: list[str], hyper: FpmcHyper = FpmcHyper()):
        self.stations = list(stations)
        self.index = {sid: i for i, sid in enumerate(self.stations)}
        self.hyper = hyper
        self.driver_index: dict[str, int] = {}
        self.UI = np.zeros((0, hyper.factors))
        self.IU = np.zeros((len(self.stations), hyper.factors))
        self.LI = np.zeros((len(self.stations), hyper.factors))
        self.IL = np.zeros((len(self.stations), hyper.factors))

    def fit(self, train_events: dict[str, list[ChargingEvent]]) -> "FpmcRecommender":
        sequences = _train_sequences(train_events)
        samples: list[tuple[int, int, int]] = []
        self.driver_index = {d: i for i, d in enumerate(sorted(sequences))}
        for driver, seq in sequences.items():
            u = self.driver_index[driver]
            for a, b in zip(seq, seq[1:]):
                samples.append((u, self.index[a], self.index[b]))
        if not samples:
            raise UsageError("FPMC needs at least one training transition")

        h = self.hyper
        rng = rng_for(h.seed, "fpmc-init")
        m, f = len(self.stations), h.factors
        self.UI = rng.normal(0.0, 0.1, size=(len(self.driver_index), f))
        self.IU = rng.normal(0.0, 0.1, size=(m, f))
        self.LI = rng.normal(0.0, 0.1, size=(m, f))
        self.IL = rng.normal(0.0, 0.1, size=(m, f))

        neg_rng = rng_for(h.seed, "fpmc-negatives")
        order_rng = rng_for(h.seed, "fpmc-order")
        samples = np.array(samples, dtype=int)
        for _ in range(h.epochs):
            for row in order_rng.permutation(samples.shape[0]):
                u, last, pos = samples[row]
                for _n in range(h.negatives):
                    neg = int(neg_rng.integers(0, m))
                    if neg == pos:
                        continue
                    x = (
                        self.UI[u] @ (self.IU[pos] - self.IU[neg])
                        + self.LI[last] @ (self.IL[pos] - self.IL[neg])
                    )
                    g = float(sigmoid(np.array([-x]))[0])
                    ui, iu_p, iu_n = self.UI[u].copy(), self.IU[pos].copy(), self.IU[neg].copy()
                    li, il_p, il_n = self.LI[last].copy(), self.IL[pos].copy(), self.IL[neg].copy()
                    self.UI[u] += h.lr * (g * (iu_p - iu_n) - h.reg * ui)
                    self.IU[pos] += h.lr * (g * ui - h.reg * iu_p)
                    self.IU[neg] += h.lr * (-g * ui - h.reg * iu_n)
                    self.LI[last] += h.lr * (g * (il_p - il_n) - h.reg * li)
                    self.IL[pos] += h.lr * (g * li - h.reg * il_p)
                    self.IL[neg] += h.lr * (-g * li - h.reg * il_n)
        return self

    def scores(self, driver_id: str, last_station: str | None) -> np.ndarray:
        m = len(self.stations)
        out = np.zeros(m)
        u = self.driver_index.get(driver_id)
        if u is not None:
            out += self.IU @ self.UI[u]
        if last_station is not None and last_station in self.index:
            out += self.IL @ self.LI[self.index[last_station]]
        return out

    def probabilities(self, driver_id: str, history: list[ChargingEvent]) -> np.ndarray:
        last = history[-1].station_id if history else None
        return softmax(self.scores(driver_id, last))

    def rank(self, driver_id: str, history: list[ChargingEvent], k: int, when=None) -> list[str]:
        last = history[-1].station_id if history else None
        return _rank_row(self.scores(driver_id, last), self.stations, k)


class PopularityRecommender:
    """Visit-frequency baseline: a driver's own station counts, falling back
    to global popularity for unseen drivers."""

    def __init__(self, stations: list[str]):
        self.stations = list(stations)
        self.index = {sid: i for i, sid in enumerate(self.stations)}
        self.per_driver: dict[str, np.ndarray] = {}
        self.global_counts = np.zeros(len(self.stations))

    def fit(self, train_events: dict[str, list[ChargingEvent]]) -> "PopularityRecommender":
        for driver, seq in _train_sequences(train_events).items():
            counts = np.zeros(len(self.stations))
            for sid in seq:
                counts[self.index[sid]] += 1.0
            self.per_driver[driver] = counts
            self.global_counts += counts
        return self

    def probabilities(self, driver_id: str, history: list[ChargingEvent]) -> np.ndarray:
        counts = self.per_driver.get(driver_id, self.global_counts)
        total = counts.sum()
        if total == 0:
            return np.full(len(self.stations), 1.0 / len(self.stations))
        return counts / total

    def rank(self, driver_id: str, history: list[ChargingEvent], k: int, when=None) -> list[str]:
        return _rank_row(self.probabilities(driver_id, history), self.stations, k)
