"""External reward environment.

Per-station hourly wait-time series (an occupied-minutes congestion proxy),
an LSTM forecaster for the next-hour wait, the familiarity coefficient, and
the timely reward  r = -scale * (wait/mean_wait + zeta * dist/mean_dist).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

from . import nn
from .dataset import ChargingEvent
from .errors import ConfigError, DomainError, UsageError
from .geospatial import StationIndex
from .seeding import rng_for

logger = logging.getLogger(__name__)

DAY_FEATURES = 7
HOUR_FEATURES = 24
TIME_FEATURE_WIDTH = DAY_FEATURES + HOUR_FEATURES


def epoch_hour(dt: datetime) -> int:
    return int(dt.timestamp() // 3600)


def hour_to_datetime(eh: int) -> datetime:
    return datetime.fromtimestamp(eh * 3600, tz=timezone.utc)


def time_features(dt: datetime) -> np.ndarray:
    """Day-of-week (7) and hour-of-day (24) one-hots."""
    vec = np.zeros(TIME_FEATURE_WIDTH)
    vec[dt.weekday()] = 1.0
    vec[DAY_FEATURES + dt.hour] = 1.0
    return vec


def time_features_for_hour(eh: int) -> np.ndarray:
    return time_features(hour_to_datetime(eh))


# ---------------------------------------------------------------------------
# Wait-time series
# ---------------------------------------------------------------------------

@dataclass
class WaitSeries:
    """Hourly wait proxy for one station: occupied charging minutes per clock
    hour, keyed by epoch hour. Hours without sessions are implicitly 0."""

    station_id: str
    buckets: dict[int, float] = field(default_factory=dict)

    @property
    def first_hour(self) -> int | None:
        return min(self.buckets) if self.buckets else None

    def value(self, eh: int) -> float:
        return self.buckets.get(eh, 0.0)

    def lags(self, eh: int, k: int) -> np.ndarray:
        return np.array([self.value(h) for h in range(eh - k, eh)])


def build_wait_series(events: Iterable[ChargingEvent]) -> dict[str, WaitSeries]:
    """Occupied minutes per (station, clock hour), split across hour boundaries.

    Time-causal by construction: an event only contributes to buckets at or
    after its start hour.
    """
    out: dict[str, WaitSeries] = {}
    for e in events:
        series = out.setdefault(e.station_id, WaitSeries(e.station_id))
        start_s = e.start_time.timestamp()
        end_s = start_s + e.duration_min * 60.0
        cursor = start_s
        while cursor < end_s:
            bucket = int(cursor // 3600)
            bucket_end = (bucket + 1) * 3600.0
            chunk_end = min(bucket_end, end_s)
            series.buckets[bucket] = series.buckets.get(bucket, 0.0) + (chunk_end - cursor) / 60.0
            cursor = chunk_end
    return out


def export_wait_series(series: dict[str, WaitSeries], path: str | Path) -> None:
    """CSV `station_id,date,hour,wait_min` for inspection and plotting."""
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["station_id", "date", "hour", "wait_min"])
        for sid in sorted(series):
            for eh in sorted(series[sid].buckets):
                dt = hour_to_datetime(eh)
                writer.writerow([sid, dt.strftime("%Y-%m-%d"), dt.hour, format(series[sid].buckets[eh], "g")])


# ---------------------------------------------------------------------------
# Familiarity and the reward formula
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RewardParams:
    scale: float = 100.0
    gamma: float = 0.99
    zeta_familiar: float = 0.8
    zeta_default: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0):
            raise ConfigError("gamma must be in [0, 1]")


def most_visited(train_events: Iterable[ChargingEvent]) -> dict[str, str | None]:
    """Each driver's strictly most-visited station in the training split.

    Ties (or no events) map to None: no station gets the familiarity discount.
    """
    counts: dict[str, dict[str, int]] = {}
    for e in train_events:
        counts.setdefault(e.driver_id, {}).setdefault(e.station_id, 0)
        counts[e.driver_id][e.station_id] += 1
    out: dict[str, str | None] = {}
    for driver, per_station in counts.items():
        best = max(per_station.values())
        top = [sid for sid, c in per_station.items() if c == best]
        out[driver] = top[0] if len(top) == 1 else None
    return out


def zeta(
    driver_id: str,
    station_id: str,
    train_events: Iterable[ChargingEvent],
    params: RewardParams = RewardParams(),
) -> float:
    """0.8 for the driver's strictly most-visited station, else 1.0."""
    favorite = most_visited(train_events).get(driver_id)
    return params.zeta_familiar if favorite == station_id else params.zeta_default


def compute_reward(
    wait_forecast: float,
    dist_km: float,
    mean_wait: float,
    mean_dist: float,
    zeta_coef: float,
    scale: float = 100.0,
) -> float:
    """-scale * (wait/mean_wait + zeta * dist/mean_dist); <= 0 always."""
    if mean_wait <= 0 or mean_dist <= 0:
        raise DomainError("reward norms must be positive")
    if wait_forecast < 0 or dist_km < 0:
        raise DomainError("wait forecast and distance must be non-negative")
    return -scale * (wait_forecast / mean_wait + zeta_coef * dist_km / mean_dist)


# ---------------------------------------------------------------------------
# Wait forecaster network
# ---------------------------------------------------------------------------

class WaitForecastNet:
    """Stacked LSTM over the k previous hourly waits + linear scalar head.

    Per-step input: [scaled lag wait, station location context, lag-hour time
    features]. Waits are scaled by the station's mean wait on the way in and
    out so targets sit near 1 regardless of units.
    """

    def __init__(self, input_dim: int, hidden_dim: int, num_layers: int, rng: np.random.Generator):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.lstm = nn.StackedLstm(input_dim, hidden_dim, num_layers, rng)
        self.head = nn.Dense(hidden_dim, 1, rng)

    @property
    def params(self) -> dict[str, np.ndarray]:
        out = {f"lstm.{k}": v for k, v in self.lstm.params.items()}
        out.update({f"head.{k}": v for k, v in self.head.params.items()})
        return out

    def forward(self, xs: np.ndarray) -> tuple[np.ndarray, dict]:
        h, lstm_cache = self.lstm.final_hidden(xs)
        y, head_cache = self.head.forward(h)
        return y[:, 0], {"lstm": lstm_cache, "head": head_cache}

    def backward(self, cache: dict, dy: np.ndarray) -> dict[str, np.ndarray]:
        dh, head_grads = self.head.backward(cache["head"], dy[:, None])
        _, lstm_grads = self.lstm.backward_last(cache["lstm"], dh)
        grads = {f"lstm.{k}": v for k, v in lstm_grads.items()}
        grads.update({f"head.{k}": v for k, v in head_grads.items()})
        return grads


@dataclass(frozen=True)
class RewardNetHyper:
    window: int = 10  # lag hours fed to the forecaster
    hidden: int = 100
    layers: int = 2
    alpha: float = 0.01
    epochs: int = 200
    val_frac: float = 0.1
    clip_norm: float = 5.0
    seed: int = 0


def _station_context_vector(index: StationIndex, station_id: str) -> np.ndarray:
    return index.location_context(station_id, None).as_vector()


def _forecast_inputs(
    index: StationIndex, station_id: str, lags_scaled: np.ndarray, eh: int
) -> np.ndarray:
    """(k, input_dim) step matrix for one forecast at hour eh."""
    k = lags_scaled.shape[0]
    ctx = _station_context_vector(index, station_id)
    rows = [
        np.concatenate([[lags_scaled[j]], ctx, time_features_for_hour(eh - k + j)])
        for j in range(k)
    ]
    return np.stack(rows)


def reward_net_input_dim(index: StationIndex) -> int:
    return 1 + index.context_width() + TIME_FEATURE_WIDTH


def train_reward_net(
    series: dict[str, WaitSeries],
    index: StationIndex,
    hyper: RewardNetHyper = RewardNetHyper(),
    train_end_hour: int | None = None,
) -> tuple[WaitForecastNet, dict]:
    """Fit one-step-ahead wait prediction by full-batch SGD on MSE.

    Uses hours up to train_end_hour (inclusive); stations without at least
    window+1 observable hours are skipped with a warning. Returns the net and
    a report with train/val MSE in minutes^2.
    """
    k = hyper.window
    inputs: list[np.ndarray] = []
    targets_scaled: list[float] = []
    scales: list[float] = []
    skipped: list[str] = []
    for sid in index.order:
        st = index.require(sid)
        if st.mean_wait is None or st.mean_wait <= 0:
            raise ConfigError(f"station {sid} has no positive mean wait; compute norms first")
        s = series.get(sid)
        first = s.first_hour if s is not None else None
        if first is None:
            skipped.append(sid)
            continue
        end = train_end_hour if train_end_hour is not None else max(s.buckets)
        if first + k > end:
            skipped.append(sid)
            continue
        for eh in range(first + k, end + 1):
            lags = s.lags(eh, k) / st.mean_wait
            inputs.append(_forecast_inputs(index, sid, lags, eh))
            targets_scaled.append(s.value(eh) / st.mean_wait)
            scales.append(st.mean_wait)
    if skipped:
        logger.warning("reward net: skipped %d stations with <%d hours of history", len(skipped), k + 1)
    if not inputs:
        raise ConfigError("no training samples for the reward net")

    xs = np.stack(inputs)
    ys = np.array(targets_scaled)
    sc = np.array(scales)
    n_val = int(len(ys) * hyper.val_frac)
    # Chronology is per station; a seeded permutation keeps val representative.
    perm = rng_for(hyper.seed, "reward-val-split").permutation(len(ys))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if train_idx.size == 0:
        raise ConfigError("empty reward-net training window")

    net = WaitForecastNet(xs.shape[2], hyper.hidden, hyper.layers, rng_for(hyper.seed, "reward-init"))
    params = net.params
    for epoch in range(hyper.epochs):
        pred, cache = net.forward(xs[train_idx])
        diff = pred - ys[train_idx]
        grads = net.backward(cache, diff / diff.shape[0])
        nn.clip_global_norm(grads, hyper.clip_norm)
        nn.sgd_step(params, grads, hyper.alpha)

    def _mse(idx: np.ndarray) -> float:
        if idx.size == 0:
            return float("nan")
        pred, _ = net.forward(xs[idx])
        return float(np.mean(((pred - ys[idx]) * sc[idx]) ** 2))

    report = {
        "train_mse": _mse(train_idx),
        "val_mse": _mse(val_idx),
        "samples": int(len(ys)),
        "skipped_stations": skipped,
    }
    return net, report


def predict_wait(
    net: WaitForecastNet,
    series: dict[str, WaitSeries],
    index: StationIndex,
    station_id: str,
    eh: int,
    k: int,
) -> tuple[float, frozenset[str]]:
    """Forecast the wait at `station_id` for hour `eh`, in minutes.

    Falls back to the station's mean wait (flag "mean_fallback") when fewer
    than k observable lag hours exist; negative raw outputs are clamped to 0
    (flag "clamped").
    """
    st = index.require(station_id)
    if st.mean_wait is None or st.mean_wait <= 0:
        raise DomainError(f"station {station_id} has no positive mean wait")
    s = series.get(station_id)
    first = s.first_hour if s is not None else None
    if first is None or eh - k < first:
        return st.mean_wait, frozenset({"mean_fallback"})
    lags = s.lags(eh, k) / st.mean_wait
    xs = _forecast_inputs(index, station_id, lags, eh)[None, :, :]
    raw = float(net.forward(xs)[0][0]) * st.mean_wait
    if raw < 0:
        logger.debug("clamped negative wait forecast %.3f at %s", raw, station_id)
        return 0.0, frozenset({"clamped"})
    return raw, frozenset()


# ---------------------------------------------------------------------------
# Forecaster plug points and the environment facade
# ---------------------------------------------------------------------------

class WaitForecaster(Protocol):
    def forecast(self, station_id: str, eh: int) -> tuple[float, frozenset[str]]: ...


class MeanWaitForecaster:
    """Always returns the station's mean wait (the no-model fallback)."""

    def __init__(self, index: StationIndex):
        self.index = index

    def forecast(self, station_id: str, eh: int) -> tuple[float, frozenset[str]]:
        st = self.index.require(station_id)
        if st.mean_wait is None or st.mean_wait <= 0:
            raise DomainError(f"station {station_id} has no positive mean wait")
        return st.mean_wait, frozenset({"mean_fallback"})


class TableWaitForecaster:
    """Fixed per-station forecasts; handy for tests and what-if runs."""

    def __init__(self, table: dict[str, float]):
        self.table = dict(table)

    def forecast(self, station_id: str, eh: int) -> tuple[float, frozenset[str]]:
        if station_id not in self.table:
            raise UsageError(f"no tabled wait for station {station_id!r}")
        return self.table[station_id], frozenset()


class NetWaitForecaster:
    """Forecasts from a trained WaitForecastNet over the historical series."""

    def __init__(self, net: WaitForecastNet, series: dict[str, WaitSeries], index: StationIndex, k: int):
        self.net = net
        self.series = series
        self.index = index
        self.k = k

    def forecast(self, station_id: str, eh: int) -> tuple[float, frozenset[str]]:
        return predict_wait(self.net, self.series, self.index, station_id, eh, self.k)


@dataclass(frozen=True)
class RewardBreakdown:
    reward: float
    wait_forecast: float
    dist_km: float
    mean_wait: float
    mean_dist: float
    zeta: float
    flags: frozenset[str]


class RewardEnvironment:
    """Everything needed to price (driver, previous station, action, hour)."""

    def __init__(
        self,
        index: StationIndex,
        forecaster: WaitForecaster,
        familiarity: dict[str, str | None],
        params: RewardParams = RewardParams(),
    ):
        self.index = index
        self.forecaster = forecaster
        self.familiarity = familiarity
        self.params = params

    def zeta(self, driver_id: str, station_id: str) -> float:
        if self.familiarity.get(driver_id) == station_id:
            return self.params.zeta_familiar
        return self.params.zeta_default

    def breakdown(
        self, driver_id: str, prev_station: str | None, action_station: str, eh: int
    ) -> RewardBreakdown:
        st = self.index.require(action_station)
        if st.mean_wait is None or st.mean_dist is None:
            raise DomainError(f"station {action_station} is missing reward norms")
        zhat, flags = self.forecaster.forecast(action_station, eh)
        dhat = 0.0 if prev_station is None else self.index.distance(prev_station, action_station)
        zc = self.zeta(driver_id, action_station)
        r = compute_reward(zhat, dhat, st.mean_wait, st.mean_dist, zc, self.params.scale)
        return RewardBreakdown(r, zhat, dhat, st.mean_wait, st.mean_dist, zc, flags)

    def reward(self, driver_id: str, prev_station: str | None, action_station: str, eh: int) -> float:
        return self.breakdown(driver_id, prev_station, action_station, eh).reward
