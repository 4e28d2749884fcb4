"""Shared fixture builders: synthetic stations, patterned trajectories and
constant-reward environments used across the suite."""

from __future__ import annotations

import math
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from evrac.dataset import ChargingEvent, build_trajectories, split_all
from evrac.geospatial import EARTH_RADIUS_KM, NUM_POI_TYPES, Station, StationIndex
from evrac.reward import RewardEnvironment, TableWaitForecaster

T0 = datetime(2018, 6, 6, 8, 0, tzinfo=timezone.utc)


def km_to_lon_degrees(km: float) -> float:
    """Longitude offset on the equator whose great-circle length is `km`."""
    return math.degrees(km / EARTH_RADIUS_KM)


def make_event(
    event_id: str,
    driver: str,
    station: str,
    when: datetime,
    duration: float = 30.0,
    energy: float = 10.0,
) -> ChargingEvent:
    return ChargingEvent(
        event_id=event_id,
        driver_id=driver,
        station_id=station,
        start_time=when,
        duration_min=duration,
        energy_kwh=energy,
    )


def make_stations(
    ids: list[str],
    spacing_km: float = 0.0,
    mean_wait: float = 10.0,
    mean_dist: float = 1.0,
) -> StationIndex:
    """Stations along the equator `spacing_km` apart (0 = colocated), with
    explicit reward norms."""
    stations = {}
    for i, sid in enumerate(ids):
        stations[sid] = Station(
            station_id=sid,
            latitude=0.0,
            longitude=i * km_to_lon_degrees(spacing_km),
            poi_counts=np.zeros(NUM_POI_TYPES),
            mean_wait=mean_wait,
            mean_dist=mean_dist,
        )
    return StationIndex(stations)


def pattern_events(
    driver: str,
    station_pattern: list[str],
    count: int,
    start: datetime = T0,
    gap_hours: float = 24.0,
    duration: float = 30.0,
) -> list[ChargingEvent]:
    """`count` events cycling through `station_pattern` at a fixed cadence."""
    out = []
    for i in range(count):
        out.append(
            make_event(
                f"{driver}-e{i:04d}",
                driver,
                station_pattern[i % len(station_pattern)],
                start + timedelta(hours=i * gap_hours),
                duration=duration,
            )
        )
    return out


def constant_reward_env(
    index: StationIndex,
    waits: dict[str, float],
    familiarity: dict[str, str | None] | None = None,
) -> RewardEnvironment:
    """Environment whose forecasts are fixed per station, so rewards are exact
    and time-independent."""
    return RewardEnvironment(index, TableWaitForecaster(waits), familiarity or {})


def split_population(events: list[ChargingEvent]):
    trajectories = build_trajectories(events)
    splits, excluded = split_all(trajectories)
    return trajectories, splits, excluded


@pytest.fixture
def two_station_index() -> StationIndex:
    return make_stations(["cs0", "cs1"])


@pytest.fixture
def bandit_fixture():
    """Two colocated stations with constant rewards -100 (cs0) vs -300 (cs1);
    logged behavior alternates between them."""
    index = make_stations(["cs0", "cs1"], spacing_km=0.0, mean_wait=10.0, mean_dist=1.0)
    env = constant_reward_env(index, {"cs0": 10.0, "cs1": 30.0})
    events = []
    for d in range(4):
        events += pattern_events(f"driver-{d}", ["cs0", "cs1"], 30)
    trajectories, splits, _ = split_population(events)
    return index, env, trajectories, splits
