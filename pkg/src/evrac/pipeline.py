"""End-to-end orchestration: raw files -> features -> environments ->
trained models -> reports. Shared by the CLI and the experiment scripts."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .agent import (
    ObservationSpace,
    RacModel,
    RacRecommender,
    build_buffer,
    train_rac,
    warmup_then_finetune,
)
from .baselines import FpmcHyper, FpmcRecommender, MarkovRecommender, PopularityRecommender
from .config import Config
from .dataset import (
    ChargingEvent,
    DriverTrajectory,
    Split,
    build_trajectories,
    max_duration,
    max_energy,
    parse_events,
    split_all,
    warmup_cut_counts,
    warmup_pool,
)
from .errors import ConfigError, UsageError
from .evaluation import EvalReport, evaluate
from .geospatial import StationIndex, load_poi, load_stations, station_norms
from .reward import (
    MeanWaitForecaster,
    NetWaitForecaster,
    RewardEnvironment,
    WaitForecastNet,
    WaitSeries,
    build_wait_series,
    epoch_hour,
    most_visited,
    train_reward_net,
)

logger = logging.getLogger(__name__)


@dataclass
class DataBundle:
    """Everything derived from the raw files that models and reports need."""

    config: Config
    events: list[ChargingEvent]
    trajectories: dict[str, DriverTrajectory]          # private (post warm-up cut)
    splits: dict[str, Split]
    excluded: list[str]
    warmup_trajectories: dict[str, DriverTrajectory]   # anonymized pool, may be empty
    index: StationIndex                                # with reward norms
    obs_space: ObservationSpace
    train_series: dict[str, WaitSeries]                # training-window series
    full_series: dict[str, WaitSeries]                 # all events, queried causally
    train_events: list[ChargingEvent]
    familiarity: dict[str, str | None]
    train_end_hour: int = 0
    extras: dict = field(default_factory=dict)

    def train_events_by_driver(self) -> dict[str, list[ChargingEvent]]:
        return {d: s.train for d, s in self.splits.items()}


def load_data_bundle(config: Config, events: list[ChargingEvent] | None = None) -> DataBundle:
    """Build features and splits from the configured files (or given events).

    With warm-up on, each eligible driver's earliest pool slice is moved into
    the anonymized shared pool and the private split covers the remainder.
    Feature scalers, reward norms, familiarity and the reward-net training
    window all come from training data only; drivers too small to split still
    contribute their events to the environment series.
    """
    if events is None:
        if not config.events:
            raise ConfigError("no events file configured")
        events, _ = parse_events(config.events, "canonical")
    if not events:
        raise ConfigError("no events to work with")

    stations = load_stations(config.stations) if config.stations else _stations_from_events(events)
    if config.poi:
        poi = load_poi(config.poi, sorted(stations))
        stations = {
            sid: _with_poi(st, poi[sid]) for sid, st in stations.items()
        }
    index = StationIndex(stations)

    all_trajectories = build_trajectories(events)
    if config.warmup:
        pool = warmup_pool(all_trajectories)
        cuts = warmup_cut_counts(all_trajectories)
        private = {
            d: DriverTrajectory(d, t.events[cuts.get(d, 0) :])
            for d, t in all_trajectories.items()
            if len(t.events) > cuts.get(d, 0)
        }
        warmup_trajs = build_trajectories(pool)
    else:
        private = all_trajectories
        warmup_trajs = {}

    splits, excluded = split_all(private)
    train_events = [e for d in sorted(splits) for e in splits[d].train]
    # Unsplittable drivers still shape the station-side environment.
    train_events += [e for d in excluded for e in private[d].events]
    train_events.sort(key=lambda e: (e.start_time, e.event_id))
    if not train_events:
        raise ConfigError("no training events after splitting")

    train_series = build_wait_series(train_events)
    full_series = build_wait_series(events)
    norms = station_norms(train_events, index, train_series)
    index = index.with_norms(norms)

    obs_space = ObservationSpace(
        index, max_duration(train_events), max_energy(train_events), config.k_actor
    )
    familiarity = most_visited([e for s in splits.values() for e in s.train])
    train_end = max(epoch_hour(e.start_time) for e in train_events)

    return DataBundle(
        config=config,
        events=events,
        trajectories=private,
        splits=splits,
        excluded=excluded,
        warmup_trajectories=warmup_trajs,
        index=index,
        obs_space=obs_space,
        train_series=train_series,
        full_series=full_series,
        train_events=train_events,
        familiarity=familiarity,
        train_end_hour=train_end,
    )


def _stations_from_events(events: list[ChargingEvent]):
    """Fallback station set at the origin when no stations file is given."""
    from .geospatial import NUM_POI_TYPES, Station

    ids = sorted({e.station_id for e in events})
    logger.warning("no stations file; placing %d stations at (0, 0)", len(ids))
    return {sid: Station(sid, 0.0, 0.0, np.zeros(NUM_POI_TYPES)) for sid in ids}


def _with_poi(station, counts):
    import dataclasses

    return dataclasses.replace(station, poi_counts=counts)


# ---------------------------------------------------------------------------
# Environments
# ---------------------------------------------------------------------------

def training_environment(bundle: DataBundle, net: WaitForecastNet | None) -> RewardEnvironment:
    """Rewards for the RAC loop: forecasts over the training-window series."""
    if net is None:
        forecaster = MeanWaitForecaster(bundle.index)
    else:
        forecaster = NetWaitForecaster(net, bundle.train_series, bundle.index, bundle.config.k_reward)
    return RewardEnvironment(bundle.index, forecaster, bundle.familiarity)


def evaluation_environment(bundle: DataBundle, net: WaitForecastNet | None) -> RewardEnvironment:
    """Rewards for reports: forecasts over the full causal series."""
    if net is None:
        forecaster = MeanWaitForecaster(bundle.index)
    else:
        forecaster = NetWaitForecaster(net, bundle.full_series, bundle.index, bundle.config.k_reward)
    return RewardEnvironment(bundle.index, forecaster, bundle.familiarity)


# ---------------------------------------------------------------------------
# Training entry points
# ---------------------------------------------------------------------------

def train_reward_model(bundle: DataBundle) -> tuple[WaitForecastNet, dict]:
    hyper = bundle.config.reward_hyper()
    return train_reward_net(bundle.train_series, bundle.index, hyper, bundle.train_end_hour)


def train_shared_model(
    bundle: DataBundle,
    env: RewardEnvironment,
    epsilon: float | None = None,
    seed: int | None = None,
) -> tuple[RacModel, list[dict]]:
    """One model over every driver's training windows."""
    hyper = bundle.config.rac_hyper(epsilon=epsilon, seed=seed)
    max_steps = {d: len(s.train) for d, s in bundle.splits.items()}
    buffer = build_buffer(bundle.obs_space, bundle.trajectories, max_steps, hyper)
    model = RacModel(bundle.obs_space.obs_dim, len(bundle.index), hyper)
    records = train_rac(buffer, model, env, hyper)
    return model, records


def train_per_driver_models(
    bundle: DataBundle,
    env: RewardEnvironment,
    epsilon: float | None = None,
    seed: int | None = None,
) -> tuple[RacModel, dict[str, RacModel]]:
    """Warm-up (when a pool exists) then per-driver fine-tuning."""
    cfg = bundle.config
    hyper = cfg.rac_hyper(epsilon=epsilon, seed=seed)
    return warmup_then_finetune(
        bundle.obs_space,
        env,
        bundle.trajectories,
        bundle.splits,
        hyper,
        warmup_trajectories=bundle.warmup_trajectories or None,
        finetune_epochs=cfg.finetune_epochs,
        patience=cfg.patience,
        jobs=cfg.jobs,
    )


def train_baseline_model(bundle: DataBundle, kind: str, seed: int | None = None):
    train = bundle.train_events_by_driver()
    stations = bundle.index.order
    if kind == "mc":
        return MarkovRecommender(stations).fit(train)
    if kind == "fpmc":
        hyper = FpmcHyper(seed=bundle.config.seed if seed is None else seed)
        return FpmcRecommender(stations, hyper).fit(train)
    if kind == "popularity":
        return PopularityRecommender(stations).fit(train)
    raise UsageError(f"unknown baseline {kind!r}; expected mc, fpmc or popularity")


# ---------------------------------------------------------------------------
# Evaluation entry points
# ---------------------------------------------------------------------------

def evaluate_recommender(
    bundle: DataBundle,
    recommender,
    env: RewardEnvironment | None,
    ks=(1, 3, 5),
    config_echo: dict | None = None,
    per_driver_models: dict[str, RacModel] | None = None,
) -> EvalReport:
    models = None
    if per_driver_models is not None:
        models = {
            d: RacRecommender(m, bundle.obs_space) for d, m in per_driver_models.items()
        }
    return evaluate(
        recommender,
        bundle.trajectories,
        bundle.splits,
        env,
        ks=ks,
        config=config_echo or bundle.config.as_dict(),
        models=models,
    )


def sweep_runner(bundle: DataBundle, env: RewardEnvironment, eval_env: RewardEnvironment, ks=(1, 3, 5)):
    """Returns run(eps) for epsilon sweeps: shared seed, one model per eps."""

    def run(eps: float) -> EvalReport:
        model, _ = train_shared_model(bundle, env, epsilon=eps)
        rec = RacRecommender(model, bundle.obs_space)
        echo = dict(bundle.config.as_dict(), epsilon=eps)
        return evaluate_recommender(bundle, rec, eval_env, ks=ks, config_echo=echo)

    return run
