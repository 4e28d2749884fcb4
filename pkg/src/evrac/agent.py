"""Regularized actor-critic recommender.

A shared history encoder (per-step embedding MLP + stacked LSTM) feeds a
softmax actor head over the station set and a critic MLP over
[state || one-hot action]. Training samples logged trajectory windows from a
replay buffer and updates the actor by a convex mix of an off-policy policy
gradient (weight 1-epsilon) and a preference cross-entropy ascent toward the
driver's logged choice (weight epsilon). The critic is trained by semi-
gradient TD with a hard-copied target network.

epsilon = 1 reduces the actor-network update to exactly the standalone
supervised cross-entropy update: the policy-gradient term is dropped and the
critic's TD gradient into the shared encoder is scaled by (1 - epsilon).
"""

from __future__ import annotations

import copy
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .dataset import ChargingEvent, DriverTrajectory, Split, approximate_soc
from .errors import ConfigError, TrainingDiverged, UsageError
from .geospatial import StationIndex
from .reward import (
    NetWaitForecaster,
    RewardEnvironment,
    TIME_FEATURE_WIDTH,
    epoch_hour,
    time_features,
)
from .seeding import derive_seed, rng_for

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Hyperparameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RacHyper:
    alpha: float = 0.001
    epsilon: float = 0.5
    gamma: float = 0.99
    horizon: int = 10        # replay window length T
    history: int = 5         # observations encoded per state
    embed: int = 100
    hidden: int = 100
    layers: int = 2
    critic_hidden: int = 100
    epochs: int = 200
    samples_per_epoch: int = 32
    target_interval: int = 100
    clip_norm: float = 5.0
    seed: int = 0
    pg_weight: str = "q"              # q | delta
    regularizer: str = "softmax_ce"   # softmax_ce | eta
    reward_update: str = "supervised"  # supervised | td_coupled

    def __post_init__(self):
        if not (0.0 <= self.epsilon <= 1.0):
            raise ConfigError("epsilon must be in [0, 1]")
        if not (0.0 <= self.gamma <= 1.0):
            raise ConfigError("gamma must be in [0, 1]")
        if self.pg_weight not in ("q", "delta"):
            raise ConfigError(f"unknown pg_weight {self.pg_weight!r}")
        if self.regularizer not in ("softmax_ce", "eta"):
            raise ConfigError(f"unknown regularizer {self.regularizer!r}")
        if self.reward_update not in ("supervised", "td_coupled"):
            raise ConfigError(f"unknown reward_update {self.reward_update!r}")


# ---------------------------------------------------------------------------
# Observations
# ---------------------------------------------------------------------------

@dataclass
class TrajectoryTensors:
    """Precomputed per-event features for one driver, in event order."""

    driver_id: str
    obs: np.ndarray            # (n, obs_dim)
    action_idx: np.ndarray     # (n,) station index of each event
    station_ids: list[str]
    hours: np.ndarray          # (n,) epoch hour of each event

    def __len__(self) -> int:
        return self.obs.shape[0]


class ObservationSpace:
    """Builds observation vectors [location || charging || time] per event.

    Width = (1 + M + 76) + 2 + 31. The charging block is the SOC proxy
    (duration / train max, clipped) and energy / train max; both scalers come
    from the training split only.
    """

    def __init__(self, index: StationIndex, max_duration: float, max_energy: float, history: int = 5):
        if max_duration <= 0:
            raise ConfigError("max_duration must be positive (training split empty?)")
        self.index = index
        self.max_duration = max_duration
        self.max_energy = max_energy
        self.history = history
        self.obs_dim = index.context_width() + 2 + TIME_FEATURE_WIDTH

    def observation(self, event: ChargingEvent, prev_station: str | None) -> np.ndarray:
        loc = self.index.location_context(event.station_id, prev_station).as_vector()
        soc = approximate_soc(event, self.max_duration)
        energy = event.energy_kwh / self.max_energy if self.max_energy > 0 else 0.0
        return np.concatenate([loc, [soc, energy], time_features(event.start_time)])

    def trajectory_tensors(self, traj: DriverTrajectory) -> TrajectoryTensors:
        n = len(traj)
        obs = np.zeros((n, self.obs_dim))
        actions = np.zeros(n, dtype=int)
        hours = np.zeros(n, dtype=int)
        ids: list[str] = []
        prev: str | None = None
        for i, e in enumerate(traj.events):
            obs[i] = self.observation(e, prev)
            actions[i] = self.index.index_of(e.station_id)
            hours[i] = epoch_hour(e.start_time)
            ids.append(e.station_id)
            prev = e.station_id
        return TrajectoryTensors(traj.driver_id, obs, actions, ids, hours)


def pad_history(observations: np.ndarray, k: int) -> np.ndarray:
    """Last k rows, left-padded with zero rows when fewer are available."""
    m = observations.shape[0]
    if m >= k:
        return observations[m - k :]
    out = np.zeros((k, observations.shape[1]))
    out[k - m :] = observations
    return out


# ---------------------------------------------------------------------------
# Replay buffer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Window:
    driver_id: str
    start: int   # first decision step (event index being predicted)
    length: int


class ReplayBuffer:
    """Logged decision windows: overlapping length-T slices, stride 1.

    Decision step j of a trajectory predicts event j from the observations of
    events < j, so steps run 1..n-1. Each window is one finite-horizon
    episode: its last step takes no bootstrap, which keeps action values
    bounded by the T-step discounted return. Stored tensors are immutable
    once added; sampling is reproducible for a fixed generator.
    """

    def __init__(self, history: int = 5, horizon: int = 10, capacity: int | None = None):
        self.history = history
        self.horizon = horizon
        self.capacity = capacity
        self.trajectories: dict[str, TrajectoryTensors] = {}
        self.windows: list[Window] = []

    def add_trajectory(self, tensors: TrajectoryTensors, max_step: int | None = None) -> int:
        """Add windows over decision steps [1, max_step); max_step defaults to n.

        Returns the number of windows added.
        """
        n = len(tensors)
        hi = n if max_step is None else min(max_step, n)
        steps = hi - 1  # decisions 1..hi-1
        if steps < 1:
            return 0
        self.trajectories[tensors.driver_id] = tensors
        added = []
        if steps <= self.horizon:
            added.append(Window(tensors.driver_id, 1, steps))
        else:
            for start in range(1, hi - self.horizon + 1):
                added.append(Window(tensors.driver_id, start, self.horizon))
        self.windows.extend(added)
        if self.capacity is not None and len(self.windows) > self.capacity:
            self.windows = self.windows[-self.capacity :]
        return len(added)

    def __len__(self) -> int:
        return len(self.windows)

    def sample(self, rng: np.random.Generator, count: int) -> list[Window]:
        if not self.windows:
            raise UsageError("replay buffer is empty")
        idx = rng.integers(0, len(self.windows), size=count)
        return [self.windows[i] for i in idx]

    def is_terminal(self, driver_id: str, step: int) -> bool:
        return step == len(self.trajectories[driver_id]) - 1


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

class HistoryEncoder:
    """Per-step embedding MLP (tanh) into a stacked LSTM; the final top-layer
    hidden state is the encoded state."""

    def __init__(self, obs_dim: int, embed: int, hidden: int, layers: int, rng: np.random.Generator):
        self.obs_dim = obs_dim
        self.embed_dim = embed
        self.hidden = hidden
        self.embed = nn.Mlp([obs_dim, embed], rng, output_activation="tanh")
        self.lstm = nn.StackedLstm(embed, hidden, layers, rng)

    @property
    def params(self) -> dict[str, np.ndarray]:
        out = {f"embed.{k}": v for k, v in self.embed.params.items()}
        out.update({f"lstm.{k}": v for k, v in self.lstm.params.items()})
        return out

    def forward(self, histories: np.ndarray) -> tuple[np.ndarray, dict]:
        B, k, d = histories.shape
        flat = histories.reshape(B * k, d)
        emb, embed_cache = self.embed.forward(flat)
        seq = emb.reshape(B, k, self.embed_dim)
        c, lstm_cache = self.lstm.final_hidden(seq)
        return c, {"embed": embed_cache, "lstm": lstm_cache, "shape": (B, k)}

    def backward(self, cache: dict, dc: np.ndarray) -> dict[str, np.ndarray]:
        B, k = cache["shape"]
        dseq, lstm_grads = self.lstm.backward_last(cache["lstm"], dc)
        _, embed_grads = self.embed.backward(cache["embed"], dseq.reshape(B * k, self.embed_dim))
        grads = {f"embed.{k2}": v for k2, v in embed_grads.items()}
        grads.update({f"lstm.{k2}": v for k2, v in lstm_grads.items()})
        return grads


class RacModel:
    """Parameter bundle: encoder, actor head, critic and target critic."""

    def __init__(
        self,
        obs_dim: int,
        num_stations: int,
        hyper: RacHyper,
        seed: int | None = None,
    ):
        self.obs_dim = obs_dim
        self.num_stations = num_stations
        self.hyper = hyper
        init_seed = hyper.seed if seed is None else seed
        self.encoder = HistoryEncoder(
            obs_dim, hyper.embed, hyper.hidden, hyper.layers, rng_for(init_seed, "encoder-init")
        )
        self.actor_head = nn.Dense(hyper.hidden, num_stations, rng_for(init_seed, "actor-init"))
        self.critic = nn.Mlp(
            [hyper.hidden + num_stations, hyper.critic_hidden, 1],
            rng_for(init_seed, "critic-init"),
        )
        self.critic_target = copy.deepcopy(self.critic)
        self.critic_updates = 0

    # -- parameter views ----------------------------------------------------
    def actor_params(self) -> dict[str, np.ndarray]:
        out = {f"encoder.{k}": v for k, v in self.encoder.params.items()}
        out.update({f"actor.{k}": v for k, v in self.actor_head.params.items()})
        return out

    def critic_params(self) -> dict[str, np.ndarray]:
        return {f"critic.{k}": v for k, v in self.critic.params.items()}

    def all_params(self) -> dict[str, np.ndarray]:
        out = self.actor_params()
        out.update(self.critic_params())
        out.update({f"critic_target.{k}": v for k, v in self.critic_target.params.items()})
        return out

    def clone(self) -> "RacModel":
        return copy.deepcopy(self)

    # -- forward helpers ----------------------------------------------------
    def policy(self, histories: np.ndarray) -> tuple[np.ndarray, dict]:
        c, enc_cache = self.encoder.forward(histories)
        logits, head_cache = self.actor_head.forward(c)
        pi = nn.softmax(logits)
        return pi, {"c": c, "enc": enc_cache, "head": head_cache, "pi": pi}

    def q_values(self, c: np.ndarray, action_onehot: np.ndarray, target: bool = False):
        net = self.critic_target if target else self.critic
        q, cache = net.forward(np.concatenate([c, action_onehot], axis=1))
        return q[:, 0], cache


def encode_history(encoder: HistoryEncoder, observations: np.ndarray, k: int) -> np.ndarray:
    """Encode the last <=k observations into the state vector."""
    observations = np.atleast_2d(np.asarray(observations, dtype=float))
    if observations.shape[0] == 0:
        raise UsageError("cannot encode an empty history")
    padded = pad_history(observations, k)
    c, _ = encoder.forward(padded[None, :, :])
    return c[0]


def actor_forward(model: RacModel, observations: np.ndarray) -> np.ndarray:
    """Policy distribution over stations for one history."""
    padded = pad_history(np.atleast_2d(observations), model.hyper.history)
    pi, _ = model.policy(padded[None, :, :])
    return pi[0]


# ---------------------------------------------------------------------------
# Update components
# ---------------------------------------------------------------------------

def td_target(r: np.ndarray, gamma: float, q_next: np.ndarray, terminal: np.ndarray) -> np.ndarray:
    """y = r + gamma * Q_target(next state, next action); y = r at terminals."""
    r = np.asarray(r, dtype=float)
    q_next = np.asarray(q_next, dtype=float)
    out = r + gamma * np.where(terminal, 0.0, q_next)
    return np.where(terminal, r, out)


PROB_CLAMP = 1e-7


def regularization_gradient(pi: np.ndarray, a_hat: np.ndarray, m: int | None = None) -> np.ndarray:
    """Elementwise ascent direction of the per-station binary cross-entropy
    preference term w.r.t. the policy outputs: (a_hat - pi) / ((1-pi) pi),
    scaled by 1/M. Probabilities are clamped away from {0, 1}."""
    pi = np.asarray(pi, dtype=float)
    a_hat = np.asarray(a_hat, dtype=float)
    if pi.shape != a_hat.shape:
        raise UsageError("pi and a_hat shapes differ")
    m_val = m if m is not None else pi.shape[-1]
    clamped = np.clip(pi, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return (a_hat - clamped) / ((1.0 - clamped) * clamped) / m_val


def update_target(model: RacModel, interval: int) -> bool:
    """Hard-copy the live critic into the target every `interval` updates."""
    if model.critic_updates % interval == 0:
        for name, p in model.critic.params.items():
            np.copyto(model.critic_target.params[name], p)
        return True
    return False


def _onehot_rows(idx: np.ndarray, m: int) -> np.ndarray:
    out = np.zeros((idx.shape[0], m))
    out[np.arange(idx.shape[0]), idx] = 1.0
    return out


@dataclass
class Batch:
    windows: list[Window]
    histories: np.ndarray        # (B, k, obs_dim)
    next_histories: np.ndarray   # (B, k, obs_dim)
    actions: np.ndarray          # (B,) logged station indices
    drivers: list[str]
    prev_stations: list[str]
    action_stations: list[str]
    hours: np.ndarray            # (B,)
    terminal: np.ndarray         # (B,) bool

    def __len__(self) -> int:
        return self.actions.shape[0]


def _gather_batch(buffer: ReplayBuffer, windows: list[Window]) -> Batch:
    k = buffer.history
    hists, next_hists = [], []
    actions, hours, terminal = [], [], []
    drivers, prevs, act_ids = [], [], []
    for w in windows:
        t = buffer.trajectories[w.driver_id]
        last = w.start + w.length - 1
        for j in range(w.start, w.start + w.length):
            hists.append(pad_history(t.obs[:j], k))
            next_hists.append(pad_history(t.obs[: j + 1], k))
            actions.append(t.action_idx[j])
            hours.append(t.hours[j])
            # horizon boundary or end of the logged trajectory
            terminal.append(j == last or buffer.is_terminal(w.driver_id, j))
            drivers.append(t.driver_id)
            prevs.append(t.station_ids[j - 1])
            act_ids.append(t.station_ids[j])
    return Batch(
        windows=windows,
        histories=np.stack(hists),
        next_histories=np.stack(next_hists),
        actions=np.array(actions, dtype=int),
        drivers=drivers,
        prev_stations=prevs,
        action_stations=act_ids,
        hours=np.array(hours, dtype=int),
        terminal=np.array(terminal, dtype=bool),
    )


def _preference_ascent(pi: np.ndarray, a_hat_onehot: np.ndarray, regularizer: str) -> np.ndarray:
    """Ascent direction w.r.t. the actor logits for the preference term."""
    if regularizer == "softmax_ce":
        return a_hat_onehot - pi
    eta = regularization_gradient(pi, a_hat_onehot)
    return nn.softmax_backward(pi, eta)


def _ce_loss(pi: np.ndarray, actions: np.ndarray) -> float:
    picked = pi[np.arange(actions.shape[0]), actions]
    return float(-np.mean(np.log(np.clip(picked, 1e-300, None))))


def _actor_apply(model: RacModel, cache: dict, ascent_dlogits: np.ndarray,
                 extra_dc: np.ndarray | None, hyper: RacHyper) -> None:
    """Backprop a mean-ascent logits direction (plus an optional extra descent
    gradient on the encoded state), clip and apply one SGD step to the actor
    group (head + shared encoder)."""
    dlogits = -ascent_dlogits / ascent_dlogits.shape[0]
    dc, head_grads = model.actor_head.backward(cache["head"], dlogits)
    if extra_dc is not None:
        dc = dc + extra_dc
    enc_grads = model.encoder.backward(cache["enc"], dc)
    grads = {f"actor.{k}": v for k, v in head_grads.items()}
    grads.update({f"encoder.{k}": v for k, v in enc_grads.items()})
    nn.clip_global_norm(grads, hyper.clip_norm)
    nn.sgd_step(model.actor_params(), grads, hyper.alpha)


def _require_finite_losses(epoch: int, batch: Batch, **losses: float) -> None:
    bad = {k: v for k, v in losses.items() if not np.isfinite(v)}
    if bad:
        dump = {
            "epoch": epoch,
            "losses": {k: float(v) for k, v in losses.items()},
            "windows": [(w.driver_id, w.start, w.length) for w in batch.windows],
        }
        raise TrainingDiverged(f"non-finite losses at epoch {epoch}: {sorted(bad)}", dump)


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

def train_supervised(buffer: ReplayBuffer, model: RacModel, hyper: RacHyper) -> list[dict]:
    """Standalone preference trainer: cross-entropy toward logged choices.

    Uses the same window sampling stream, batch assembly, gradient clipping
    and SGD as the actor-critic loop, so a train_rac step at epsilon = 1
    matches it bitwise.
    """
    rng_buffer = rng_for(hyper.seed, "buffer")
    records = []
    for epoch in range(hyper.epochs):
        start = time.perf_counter()
        batch = _gather_batch(buffer, buffer.sample(rng_buffer, hyper.samples_per_epoch))
        pi, cache = model.policy(batch.histories)
        a_hat = _onehot_rows(batch.actions, model.num_stations)
        ce_loss = _ce_loss(pi, batch.actions)
        _require_finite_losses(epoch, batch, ce_loss=ce_loss)
        ascent = _preference_ascent(pi, a_hat, hyper.regularizer)
        _actor_apply(model, cache, ascent, None, hyper)
        records.append(
            {"epoch": epoch, "ce_loss": ce_loss,
             "wallclock_ms": (time.perf_counter() - start) * 1000.0}
        )
    return records


def train_rac(
    buffer: ReplayBuffer,
    model: RacModel,
    env: RewardEnvironment,
    hyper: RacHyper,
) -> list[dict]:
    """Off-policy regularized actor-critic training.

    Per epoch: sample windows; encode states; price the logged actions with
    the reward environment; form TD targets with the target critic and a
    next action sampled from the current policy; update the critic by
    semi-gradient TD; update the actor by (1-eps) * policy gradient +
    eps * preference cross-entropy. Deterministic for a fixed seed.
    """
    if len(buffer) == 0:
        raise UsageError("replay buffer is empty")
    eps = hyper.epsilon
    rng_buffer = rng_for(hyper.seed, "buffer")
    rng_actions = rng_for(hyper.seed, "actions")
    m = model.num_stations

    reward_net = None
    if hyper.reward_update == "td_coupled":
        if not isinstance(env.forecaster, NetWaitForecaster):
            raise ConfigError("td_coupled reward updates need a NetWaitForecaster environment")
        reward_net = env.forecaster.net

    records: list[dict] = []
    for epoch in range(hyper.epochs):
        start = time.perf_counter()
        batch = _gather_batch(buffer, buffer.sample(rng_buffer, hyper.samples_per_epoch))
        B = len(batch)
        pi, cache = model.policy(batch.histories)
        a_hat = _onehot_rows(batch.actions, m)
        ce_loss = _ce_loss(pi, batch.actions)

        # External rewards for the logged actions.
        rewards = np.array(
            [
                env.reward(batch.drivers[i], batch.prev_stations[i], batch.action_stations[i], int(batch.hours[i]))
                for i in range(B)
            ]
        )

        # TD target: bootstrap with the target critic at the next state and a
        # next action sampled from the current policy.
        c_next, _ = model.encoder.forward(batch.next_histories)
        logits_next, _ = model.actor_head.forward(c_next)
        pi_next = nn.softmax(logits_next)
        a_next = nn.sample_categorical(rng_actions, pi_next)
        q_next, _ = model.q_values(c_next, _onehot_rows(a_next, m), target=True)
        y = td_target(rewards, hyper.gamma, q_next, batch.terminal)

        # Critic semi-gradient at the logged actions.
        q_logged, critic_cache = model.q_values(cache["c"], a_hat)
        delta = q_logged - y
        critic_mse = float(np.mean(delta * delta))
        mean_reward = float(np.mean(rewards))
        _require_finite_losses(epoch, batch, critic_mse=critic_mse, ce_loss=ce_loss, mean_reward=mean_reward)

        dqin, critic_grads = model.critic.backward(critic_cache, (delta / B)[:, None])
        critic_grads = {f"critic.{k}": v for k, v in critic_grads.items()}
        dc_critic = dqin[:, : hyper.hidden]

        # Actor ascent: policy-gradient and preference terms.
        ce_ascent = _preference_ascent(pi, a_hat, hyper.regularizer)
        if eps == 1.0:
            ascent = ce_ascent
            extra_dc = None
        else:
            if hyper.pg_weight == "q":
                a_smp = nn.sample_categorical(rng_actions, pi)
                q_smp, _ = model.q_values(cache["c"], _onehot_rows(a_smp, m))
                pg_ascent = (_onehot_rows(a_smp, m) - pi) * q_smp[:, None]
            else:
                pg_ascent = (a_hat - pi) * (-delta)[:, None]
            ascent = pg_ascent if eps == 0.0 else (1.0 - eps) * pg_ascent + eps * ce_ascent
            extra_dc = (1.0 - eps) * dc_critic

        # Optional literal TD coupling of the wait forecaster.
        if reward_net is not None:
            _td_couple_reward_net(reward_net, env, batch, delta, hyper)

        nn.clip_global_norm(critic_grads, hyper.clip_norm)
        nn.sgd_step(model.critic_params(), critic_grads, hyper.alpha)
        model.critic_updates += 1
        update_target(model, hyper.target_interval)

        _actor_apply(model, cache, ascent, extra_dc, hyper)

        records.append(
            {
                "epoch": epoch,
                "critic_mse": critic_mse,
                "ce_loss": ce_loss,
                "mean_reward": mean_reward,
                "wallclock_ms": (time.perf_counter() - start) * 1000.0,
            }
        )
    return records


def _td_couple_reward_net(reward_net, env: RewardEnvironment, batch: Batch,
                          delta: np.ndarray, hyper: RacHyper) -> None:
    """Literal delta-weighted update of the forecaster parameters."""
    from .reward import _forecast_inputs  # local import to keep the surface small

    fc: NetWaitForecaster = env.forecaster  # type: ignore[assignment]
    xs, keep = [], []
    for i in range(len(batch)):
        sid = batch.action_stations[i]
        st = env.index.require(sid)
        s = fc.series.get(sid)
        first = s.first_hour if s is not None else None
        eh = int(batch.hours[i])
        if first is None or eh - fc.k < first:
            continue
        lags = s.lags(eh, fc.k) / st.mean_wait
        xs.append(_forecast_inputs(env.index, sid, lags, eh))
        keep.append(i)
    if not xs:
        return
    _, cache = reward_net.forward(np.stack(xs))
    grads = reward_net.backward(cache, delta[keep] / len(batch))
    nn.clip_global_norm(grads, hyper.clip_norm)
    nn.sgd_step(reward_net.params, grads, hyper.alpha)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Recommendation:
    station_id: str
    prob: float
    est_wait_min: float
    est_dist_km: float
    est_reward: float
    flags: frozenset[str] = frozenset()


def recommend(
    model: RacModel,
    obs_space: ObservationSpace,
    env: RewardEnvironment,
    driver_id: str,
    history: list[ChargingEvent],
    k: int,
    when=None,
) -> list[Recommendation]:
    """Top-k stations by policy probability (ties by station id), each
    annotated with the forecast wait, distance and reward it would earn.

    `when` is the decision time; defaults to the last event's start time.
    """
    if k < 1 or k > model.num_stations:
        raise UsageError(f"k must be in [1, {model.num_stations}]")
    if not history:
        raise UsageError("recommendation needs at least one past event")
    history = sorted(history, key=lambda e: (e.start_time, e.event_id))
    # Observations for the trailing window, with correct previous-station links.
    tail = history[-obs_space.history :]
    prev: str | None = None
    if len(history) > len(tail):
        prev = history[len(history) - len(tail) - 1].station_id
    obs_rows = []
    for e in tail:
        obs_rows.append(obs_space.observation(e, prev))
        prev = e.station_id
    pi = actor_forward(model, np.stack(obs_rows))
    order = sorted(range(model.num_stations), key=lambda i: (-pi[i], obs_space.index.order[i]))
    when = when or history[-1].start_time
    eh = epoch_hour(when)
    last_station = history[-1].station_id
    out = []
    for idx in order[:k]:
        sid = obs_space.index.order[idx]
        b = env.breakdown(driver_id, last_station, sid, eh)
        out.append(
            Recommendation(sid, float(pi[idx]), b.wait_forecast, b.dist_km, b.reward, b.flags)
        )
    return out


class RacRecommender:
    """Ranking adapter used by the shared evaluation harness."""

    def __init__(self, model: RacModel, obs_space: ObservationSpace):
        self.model = model
        self.obs_space = obs_space

    def rank(self, driver_id: str, history: list[ChargingEvent], k: int, when=None) -> list[str]:
        if not history:
            return list(self.obs_space.index.order[:k])
        tail = history[-self.obs_space.history :]
        prev = None
        if len(history) > len(tail):
            prev = history[len(history) - len(tail) - 1].station_id
        obs_rows = []
        for e in tail:
            obs_rows.append(self.obs_space.observation(e, prev))
            prev = e.station_id
        pi = actor_forward(self.model, np.stack(obs_rows))
        order = sorted(
            range(self.model.num_stations),
            key=lambda i: (-pi[i], self.obs_space.index.order[i]),
        )
        return [self.obs_space.index.order[i] for i in order[:k]]


# ---------------------------------------------------------------------------
# Warm-up and per-driver fine-tuning
# ---------------------------------------------------------------------------

def build_buffer(
    obs_space: ObservationSpace,
    trajectories: dict[str, DriverTrajectory],
    max_steps: dict[str, int] | None = None,
    hyper: RacHyper = RacHyper(),
) -> ReplayBuffer:
    """Replay buffer over each driver's decision steps (optionally capped at
    the training-split boundary)."""
    buffer = ReplayBuffer(hyper.history, hyper.horizon)
    for driver_id in sorted(trajectories):
        tensors = obs_space.trajectory_tensors(trajectories[driver_id])
        cap = None if max_steps is None else max_steps.get(driver_id)
        buffer.add_trajectory(tensors, cap)
    return buffer


def _val_p1(model: RacModel, obs_space: ObservationSpace, traj: DriverTrajectory,
            val_events: list[ChargingEvent]) -> float:
    rec = RacRecommender(model, obs_space)
    hits, total = 0, 0
    for e in val_events:
        past = [x for x in traj.events if (x.start_time, x.event_id) < (e.start_time, e.event_id)]
        if not past:
            continue
        top = rec.rank(traj.driver_id, past, 1, when=e.start_time)
        hits += int(top[0] == e.station_id)
        total += 1
    return hits / total if total else 0.0


def finetune_driver(
    shared: RacModel,
    obs_space: ObservationSpace,
    env: RewardEnvironment,
    traj: DriverTrajectory,
    split: Split | None,
    hyper: RacHyper,
    epochs: int = 50,
    patience: int = 10,
) -> RacModel:
    """Clone the shared model and fine-tune on one driver's training split,
    early-stopping on validation precision@1."""
    model = shared.clone()
    n_train = len(split.train) if split is not None else len(traj)
    buffer = ReplayBuffer(hyper.history, hyper.horizon)
    buffer.add_trajectory(obs_space.trajectory_tensors(traj), n_train)
    if len(buffer) == 0:
        return model
    per_driver = replace(
        hyper,
        epochs=1,
        seed=derive_seed(hyper.seed, f"finetune:{traj.driver_id}"),
        samples_per_epoch=min(hyper.samples_per_epoch, max(len(buffer), 1)),
    )
    val_events = split.val if split is not None else []
    best_params = None
    best_p1 = -1.0
    stale = 0
    if val_events:
        # Epoch-0 snapshot: fine-tuning must never end up worse than the
        # shared starting point on validation.
        best_p1 = _val_p1(model, obs_space, traj, val_events)
        best_params = {k: v.copy() for k, v in model.all_params().items()}
    for _ in range(epochs):
        train_rac(buffer, model, env, per_driver)
        if not val_events:
            continue
        p1 = _val_p1(model, obs_space, traj, val_events)
        if p1 > best_p1:
            best_p1 = p1
            best_params = {k: v.copy() for k, v in model.all_params().items()}
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break
    if best_params is not None:
        params = model.all_params()
        for k, v in best_params.items():
            np.copyto(params[k], v)
    return model


def _finetune_job(args) -> tuple[str, RacModel]:
    shared, obs_space, env, traj, split, hyper, epochs, patience = args
    return traj.driver_id, finetune_driver(shared, obs_space, env, traj, split, hyper, epochs, patience)


def warmup_then_finetune(
    obs_space: ObservationSpace,
    env: RewardEnvironment,
    trajectories: dict[str, DriverTrajectory],
    splits: dict[str, Split],
    hyper: RacHyper,
    warmup_trajectories: dict[str, DriverTrajectory] | None = None,
    finetune_epochs: int = 50,
    patience: int = 10,
    jobs: int = 1,
) -> tuple[RacModel, dict[str, RacModel]]:
    """Train one shared model on the anonymized warm-up pool (when present),
    then clone and fine-tune it per driver on that driver's training split.

    An empty pool falls back to from-scratch per-driver training (the
    zero-warm-up variant). Per-driver jobs are independent; results merge in
    driver-id order regardless of worker scheduling.
    """
    shared = RacModel(obs_space.obs_dim, len(obs_space.index), hyper)
    if warmup_trajectories:
        pool_buffer = build_buffer(obs_space, warmup_trajectories, None, hyper)
        if len(pool_buffer) > 0:
            train_rac(pool_buffer, shared, env, hyper)
        else:
            logger.warning("warm-up pool has no usable windows; training from scratch")

    job_args = [
        (shared, obs_space, env, trajectories[d], splits.get(d), hyper, finetune_epochs, patience)
        for d in sorted(trajectories)
    ]
    results: dict[str, RacModel] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for driver_id, model in pool.map(_finetune_job, job_args):
                results[driver_id] = model
    else:
        for args in job_args:
            driver_id, model = _finetune_job(args)
            results[driver_id] = model
    return shared, {d: results[d] for d in sorted(results)}
