"""Finite-difference validation of every gradient path used in training.

Each registered path builds a tiny random instance (dims <= 8, sequence
length <= 4), computes analytic gradients through the same backward code the
trainers use, and compares against central differences at h = 1e-6.

Probe losses are scaled by LOSS_SCALE and regression targets sit close to the
clean predictions: central differences subtract two nearly equal loss values,
so their noise floor is ~eps*|loss|/(2h). Keeping |loss| small keeps that
floor orders of magnitude below the pass tolerance even for near-zero
gradient entries, while any systematic backward bug still scales with the
gradient and is caught.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .agent import HistoryEncoder
from .reward import WaitForecastNet
from .seeding import rng_for

TOLERANCE = 1e-5
LOSS_SCALE = 3e-5
RESIDUAL = 0.3


def _check_mlp(rng: np.random.Generator, h: float) -> float:
    widths = [int(rng.integers(2, 6)) for _ in range(3)]
    model = nn.Mlp(widths, rng)
    x = rng.normal(size=(2, widths[0]))
    clean, _ = model.forward(x)
    target = clean + RESIDUAL * rng.normal(size=clean.shape)

    def loss_fn() -> float:
        y, _ = model.forward(x)
        return LOSS_SCALE * float(np.sum(0.5 * (y - target) ** 2))

    def grads_fn():
        y, cache = model.forward(x)
        _, grads = model.backward(cache, LOSS_SCALE * (y - target))
        return grads

    return nn.grad_check(model.params, loss_fn, grads_fn, h)


def _check_lstm_cell(rng: np.random.Generator, h: float) -> float:
    in_dim, hidden = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    layer = nn.LstmLayer(in_dim, hidden, rng)
    x = rng.normal(size=(1, 1, in_dim))
    clean, _ = layer.forward(x)
    target = clean + RESIDUAL * rng.normal(size=clean.shape)

    def loss_fn() -> float:
        hs, _ = layer.forward(x)
        return LOSS_SCALE * float(np.sum(0.5 * (hs - target) ** 2))

    def grads_fn():
        hs, cache = layer.forward(x)
        _, grads = layer.backward(cache, LOSS_SCALE * (hs - target))
        return grads

    return nn.grad_check(layer.params, loss_fn, grads_fn, h)


def _check_actor(rng: np.random.Generator, h: float) -> float:
    obs_dim, embed, hidden, m = 5, 4, 4, 3
    seq = int(rng.integers(2, 5))
    encoder = HistoryEncoder(obs_dim, embed, hidden, 2, rng)
    head = nn.Dense(hidden, m, rng)
    histories = rng.normal(size=(2, seq, obs_dim))
    targets = np.zeros((2, m))
    targets[np.arange(2), rng.integers(0, m, size=2)] = 1.0
    params = {f"encoder.{k}": v for k, v in encoder.params.items()}
    params.update({f"actor.{k}": v for k, v in head.params.items()})

    def loss_fn() -> float:
        c, _ = encoder.forward(histories)
        logits, _ = head.forward(c)
        loss, _ = nn.softmax_cross_entropy(logits, targets)
        return LOSS_SCALE * float(np.sum(loss))

    def grads_fn():
        c, enc_cache = encoder.forward(histories)
        logits, head_cache = head.forward(c)
        _, dlogits = nn.softmax_cross_entropy(logits, targets)
        dc, head_grads = head.backward(head_cache, LOSS_SCALE * dlogits)
        enc_grads = encoder.backward(enc_cache, dc)
        out = {f"encoder.{k}": v for k, v in enc_grads.items()}
        out.update({f"actor.{k}": v for k, v in head_grads.items()})
        return out

    return nn.grad_check(params, loss_fn, grads_fn, h)


def _check_critic(rng: np.random.Generator, h: float) -> float:
    obs_dim, embed, hidden, m = 5, 3, 4, 3
    seq = int(rng.integers(2, 5))
    encoder = HistoryEncoder(obs_dim, embed, hidden, 2, rng)
    critic = nn.Mlp([hidden + m, 5, 1], rng)
    histories = rng.normal(size=(2, seq, obs_dim))
    actions = np.zeros((2, m))
    actions[np.arange(2), rng.integers(0, m, size=2)] = 1.0
    clean, _ = critic.forward(
        np.concatenate([encoder.forward(histories)[0], actions], axis=1)
    )
    y = clean[:, 0] + RESIDUAL * rng.normal(size=2)
    params = {f"encoder.{k}": v for k, v in encoder.params.items()}
    params.update({f"critic.{k}": v for k, v in critic.params.items()})

    def loss_fn() -> float:
        c, _ = encoder.forward(histories)
        q, _ = critic.forward(np.concatenate([c, actions], axis=1))
        return LOSS_SCALE * float(np.sum(0.5 * (q[:, 0] - y) ** 2))

    def grads_fn():
        c, enc_cache = encoder.forward(histories)
        q, cr_cache = critic.forward(np.concatenate([c, actions], axis=1))
        dqin, cr_grads = critic.backward(cr_cache, LOSS_SCALE * (q[:, 0] - y)[:, None])
        enc_grads = encoder.backward(enc_cache, dqin[:, :hidden])
        out = {f"encoder.{k}": v for k, v in enc_grads.items()}
        out.update({f"critic.{k}": v for k, v in cr_grads.items()})
        return out

    return nn.grad_check(params, loss_fn, grads_fn, h)


def _check_reward(rng: np.random.Generator, h: float) -> float:
    in_dim, hidden = int(rng.integers(3, 6)), int(rng.integers(2, 5))
    seq = int(rng.integers(2, 5))
    net = WaitForecastNet(in_dim, hidden, 2, rng)
    xs = rng.normal(size=(2, seq, in_dim))
    clean, _ = net.forward(xs)
    y = clean + RESIDUAL * rng.normal(size=2)

    def loss_fn() -> float:
        pred, _ = net.forward(xs)
        return LOSS_SCALE * float(np.sum(0.5 * (pred - y) ** 2))

    def grads_fn():
        pred, cache = net.forward(xs)
        return net.backward(cache, LOSS_SCALE * (pred - y))

    return nn.grad_check(net.params, loss_fn, grads_fn, h)


PATHS = {
    "mlp": _check_mlp,
    "lstm_cell": _check_lstm_cell,
    "actor_softmax_ce": _check_actor,
    "critic_mse": _check_critic,
    "reward_mse": _check_reward,
}


def run_gradcheck(instances: int = 20, seed: int = 0, h: float = 1e-6) -> dict[str, float]:
    """Max relative error per path over `instances` random instances each."""
    results = {}
    for name, fn in PATHS.items():
        worst = 0.0
        for i in range(instances):
            rng = rng_for(seed, f"gradcheck:{name}:{i}")
            worst = max(worst, fn(rng, h))
        results[name] = worst
    return results
