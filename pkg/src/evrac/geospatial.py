"""Station location context: geodesic distances, one-hot station coding and
the 76-type POI neighborhood distribution."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import ChargingEvent, build_trajectories
from .errors import ConfigError, DataFormatError, DomainError, UnknownStationError

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0

# Fixed neighborhood taxonomy: 76 place types, index = position in this tuple.
POI_TYPES = (
    "accounting", "airport", "amusement_park", "aquarium", "art_gallery", "atm",
    "bakery", "bank", "bar", "beauty_salon", "bicycle_store", "book_store",
    "bowling_alley", "bus_station", "cafe", "campground", "car_dealer",
    "car_rental", "car_repair", "car_wash", "casino", "cemetery", "church",
    "city_hall", "clothing_store", "convenience_store", "courthouse", "dentist",
    "department_store", "doctor", "electrician", "electronics_store", "embassy",
    "fire_station", "florist", "funeral_home", "furniture_store", "gas_station",
    "gym", "hair_care", "hardware_store", "hospital", "insurance_agency",
    "jewelry_store", "laundry", "lawyer", "library", "liquor_store",
    "local_government_office", "locksmith", "lodging", "meal_delivery",
    "meal_takeaway", "mosque", "movie_rental", "movie_theater", "moving_company",
    "museum", "night_club", "painter", "park", "parking", "pet_store",
    "pharmacy", "physiotherapist", "plumber", "police", "post_office",
    "real_estate_agency", "restaurant", "roofing_contractor", "school",
    "shoe_store", "shopping_mall", "spa", "stadium",
)
NUM_POI_TYPES = len(POI_TYPES)
assert NUM_POI_TYPES == 76


@dataclass(frozen=True)
class Station:
    """A charging station with coordinates, POI counts and reward norms.

    mean_wait / mean_dist are the per-station normalization constants for the
    reward; they are filled in from training data (with global-mean fallback
    for degenerate stations) and must be positive wherever rewards are used.
    """

    station_id: str
    latitude: float
    longitude: float
    poi_counts: np.ndarray  # 76 non-negative ints
    mean_wait: float | None = None
    mean_dist: float | None = None

    def __post_init__(self):
        _check_coords(self.latitude, self.longitude)
        counts = np.asarray(self.poi_counts, dtype=float)
        if counts.shape != (NUM_POI_TYPES,) or np.any(counts < 0):
            raise DomainError(
                f"station {self.station_id}: POI vector must be {NUM_POI_TYPES} non-negative counts"
            )
        object.__setattr__(self, "poi_counts", counts)


@dataclass(frozen=True)
class LocationContext:
    """Per-observation location features: distance from the previous station,
    one-hot of the current station, and its normalized POI distribution."""

    dist_prev_km: float
    onehot: np.ndarray
    poi: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.dist_prev_km], self.onehot, self.poi])


def _check_coords(lat: float, lon: float) -> None:
    if not (-90.0 <= lat <= 90.0) or not (-180.0 <= lon <= 180.0):
        raise DomainError(f"coordinates out of range: ({lat}, {lon})")


def haversine(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in km on a sphere of radius 6371.0 km."""
    _check_coords(lat1, lon1)
    _check_coords(lat2, lon2)
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = math.radians(lat2 - lat1)
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2.0) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(a)))


def normalize_poi(counts: np.ndarray) -> np.ndarray:
    """Counts -> distribution summing to 1, or all-zero when there are no POIs."""
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    if total <= 0:
        return np.zeros_like(counts)
    return counts / total


# ---------------------------------------------------------------------------
# File loading
# ---------------------------------------------------------------------------

def load_stations(path: str | Path) -> dict[str, Station]:
    """Read `station_id,latitude,longitude` CSV."""
    out: dict[str, Station] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"station_id", "latitude", "longitude"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataFormatError(f"{path}: expected columns {sorted(required)}")
        for line_no, row in enumerate(reader, start=2):
            try:
                sid = row["station_id"].strip()
                out[sid] = Station(
                    station_id=sid,
                    latitude=float(row["latitude"]),
                    longitude=float(row["longitude"]),
                    poi_counts=np.zeros(NUM_POI_TYPES),
                )
            except (ValueError, DomainError) as exc:
                raise DataFormatError(f"{path}:{line_no}: {exc}") from exc
    return out


def load_poi(path: str | Path, station_ids: Sequence[str]) -> dict[str, np.ndarray]:
    """Read `station_id,c0,...,c75` CSV; absent stations get zero vectors."""
    parsed: dict[str, np.ndarray] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "station_id" or len(header) != 1 + NUM_POI_TYPES:
            raise DataFormatError(
                f"{path}: expected header station_id,c0..c{NUM_POI_TYPES - 1}"
            )
        for line_no, row in enumerate(reader, start=2):
            if len(row) != 1 + NUM_POI_TYPES:
                raise DataFormatError(f"{path}:{line_no}: expected {1 + NUM_POI_TYPES} columns")
            try:
                vec = np.array([float(v) for v in row[1:]])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{line_no}: {exc}") from exc
            if np.any(vec < 0):
                raise DataFormatError(f"{path}:{line_no}: negative POI count")
            parsed[row[0].strip()] = vec
    out = {}
    for sid in station_ids:
        if sid in parsed:
            out[sid] = parsed[sid]
        else:
            logger.warning("station %s missing from POI file; using zero vector", sid)
            out[sid] = np.zeros(NUM_POI_TYPES)
    return out


# ---------------------------------------------------------------------------
# Optional POI provider client
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PoiProviderConfig:
    base_url: str
    api_key_env: str = "POI_API_KEY"
    radius_m: float = 600.0
    timeout_s: float = 10.0
    max_retries: int = 3
    cache_dir: Path | None = None
    mode: str = "replay"  # replay | record | live


class PoiProviderClient:
    """Fetch POI counts around a coordinate from an HTTP provider.

    The provider returns a JSON array of places, each carrying a `types` list;
    counts are accumulated over POI_TYPES. Record mode saves raw responses
    under cache_dir and replay mode serves them back, so quota-bound live
    fetching never gates tests or rebuilds.
    """

    def __init__(self, config: PoiProviderConfig):
        if config.mode not in ("replay", "record", "live"):
            raise ConfigError(f"unknown provider mode {config.mode!r}")
        if config.mode in ("replay", "record") and config.cache_dir is None:
            raise ConfigError("record/replay mode needs a cache_dir")
        self.config = config

    def _cache_path(self, station_id: str) -> Path:
        return Path(self.config.cache_dir) / f"poi_{station_id}.json"

    def _request(self, lat: float, lon: float) -> list[dict]:
        import requests

        params = {"lat": lat, "lon": lon, "radius": self.config.radius_m}
        key = os.environ.get(self.config.api_key_env)
        if key:
            params["key"] = key
        last_exc: Exception | None = None
        for attempt in range(self.config.max_retries):
            try:
                resp = requests.get(self.config.base_url, params=params, timeout=self.config.timeout_s)
                resp.raise_for_status()
                return resp.json()
            except Exception as exc:  # noqa: BLE001 - retried, re-raised below
                last_exc = exc
                time.sleep(min(2.0**attempt, 5.0))
        raise DataFormatError(f"POI provider failed after retries: {last_exc}")

    def fetch_counts(self, station: Station) -> np.ndarray:
        if self.config.mode == "replay":
            cache = self._cache_path(station.station_id)
            if not cache.exists():
                raise DataFormatError(f"no recorded POI response for {station.station_id}")
            places = json.loads(cache.read_text(encoding="utf-8"))
        else:
            places = self._request(station.latitude, station.longitude)
            if self.config.mode == "record":
                cache = self._cache_path(station.station_id)
                cache.parent.mkdir(parents=True, exist_ok=True)
                cache.write_text(json.dumps(places), encoding="utf-8")
        counts = np.zeros(NUM_POI_TYPES)
        index = {name: i for i, name in enumerate(POI_TYPES)}
        for place in places:
            for t in place.get("types", []):
                if t in index:
                    counts[index[t]] += 1
        return counts


# ---------------------------------------------------------------------------
# Station index and location contexts
# ---------------------------------------------------------------------------

class StationIndex:
    """Ordered station set with one-hot coding, distances and POI features.

    Station order is the sorted id list, so indices are deterministic.
    """

    def __init__(self, stations: dict[str, Station]):
        if not stations:
            raise ConfigError("empty station set")
        self.order: list[str] = sorted(stations)
        self.stations: dict[str, Station] = {sid: stations[sid] for sid in self.order}
        self.index: dict[str, int] = {sid: i for i, sid in enumerate(self.order)}
        self.poi_matrix = np.stack(
            [normalize_poi(self.stations[sid].poi_counts) for sid in self.order]
        )

    def __len__(self) -> int:
        return len(self.order)

    def require(self, station_id: str) -> Station:
        try:
            return self.stations[station_id]
        except KeyError:
            raise UnknownStationError(f"unknown station {station_id!r}") from None

    def onehot(self, station_id: str) -> np.ndarray:
        vec = np.zeros(len(self.order))
        vec[self.index_of(station_id)] = 1.0
        return vec

    def index_of(self, station_id: str) -> int:
        if station_id not in self.index:
            raise UnknownStationError(f"unknown station {station_id!r}")
        return self.index[station_id]

    def distance(self, from_id: str, to_id: str) -> float:
        a, b = self.require(from_id), self.require(to_id)
        return haversine(a.latitude, a.longitude, b.latitude, b.longitude)

    def location_context(self, current: str, previous: str | None) -> LocationContext:
        """Location features for an observation at `current`.

        dist_prev is 0 at the start of a history (no previous station).
        """
        cur_idx = self.index_of(current)
        dist = 0.0 if previous is None else self.distance(previous, current)
        onehot = np.zeros(len(self.order))
        onehot[cur_idx] = 1.0
        return LocationContext(dist, onehot, self.poi_matrix[cur_idx].copy())

    def context_width(self) -> int:
        return 1 + len(self.order) + NUM_POI_TYPES

    def with_norms(self, norms: dict[str, tuple[float, float]]) -> "StationIndex":
        updated = {
            sid: replace(st, mean_wait=norms[sid][0], mean_dist=norms[sid][1])
            for sid, st in self.stations.items()
        }
        return StationIndex(updated)


def station_norms(
    events: Iterable[ChargingEvent],
    stations: dict[str, Station] | StationIndex,
    wait_series: dict | None = None,
) -> dict[str, tuple[float, float]]:
    """Per-station (mean wait, mean arrival distance) from training events.

    Mean wait averages the occupied (positive) hourly wait-proxy buckets; mean
    distance averages the geodesic hop previous->current over observed
    arrivals. Degenerate stations (no occupancy / no arrivals with a previous
    station) fall back to the global means so both norms stay positive.
    """
    events = list(events)
    if not events:
        raise ConfigError("station norms need at least one training event")
    index = stations if isinstance(stations, StationIndex) else StationIndex(stations)

    from .reward import build_wait_series  # deferred: reward depends on geospatial

    series = wait_series if wait_series is not None else build_wait_series(events)
    wait_means: dict[str, float] = {}
    all_positive: list[float] = []
    for sid in index.order:
        buckets = series[sid].buckets if sid in series else {}
        positive = [v for v in buckets.values() if v > 0]
        all_positive.extend(positive)
        wait_means[sid] = float(np.mean(positive)) if positive else 0.0
    global_wait = float(np.mean(all_positive)) if all_positive else 1.0

    hop_sums: dict[str, float] = {sid: 0.0 for sid in index.order}
    hop_counts: dict[str, int] = {sid: 0 for sid in index.order}
    all_hops: list[float] = []
    for traj in build_trajectories(events).values():
        for prev, cur in zip(traj.events, traj.events[1:]):
            d = index.distance(prev.station_id, cur.station_id)
            hop_sums[cur.station_id] += d
            hop_counts[cur.station_id] += 1
            all_hops.append(d)
    positive_hops = [d for d in all_hops if d > 0]
    global_dist = float(np.mean(positive_hops)) if positive_hops else 1.0

    out = {}
    for sid in index.order:
        zw = wait_means[sid] if wait_means[sid] > 0 else global_wait
        dm = hop_sums[sid] / hop_counts[sid] if hop_counts[sid] else 0.0
        dd = dm if dm > 0 else global_dist
        out[sid] = (zw, dd)
    return out
