"""Minimal deterministic neural toolkit.

Dense layers, tanh MLPs, a stacked LSTM with full backpropagation through
time, softmax/sigmoid heads, cross-entropy and squared losses, plain SGD with
optional global-norm clipping, seeded initialization and finite-difference
gradient checking.

Conventions:
  * everything is float64; non-finite inputs are rejected at layer entry
  * arrays are batch-first: vectors (B, D), sequences (B, T, D)
  * parameters live in plain dicts name -> ndarray, so SGD, clipping,
    checkpointing and gradient checks all share the same machinery
  * forward passes return (output, cache); backward passes consume the cache
    and return (input gradients, parameter gradients)

Initialization: weights ~ uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)); LSTM
forget-gate bias starts at 1.0 for gradient flow; all other biases at 0.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .errors import DomainError, ShapeError

# LSTM pre-activation block layout within the 4h axis.
GATE_ORDER = ("input", "forget", "cell", "output")


def _require_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"non-finite values in {name}")


def uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign to avoid overflow in exp.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax; positive and sums to 1 for any finite input."""
    _require_finite("logits", logits)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. softmax outputs back to the logits."""
    inner = (probs * dprobs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - inner)


def sample_categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """Sample one index per row of a (B, M) probability matrix."""
    cum = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0])
    idx = (cum < u[:, None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


class Dense:
    """Affine map y = x @ W + b."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None):
        self.in_dim = in_dim
        self.out_dim = out_dim
        if rng is None:
            self.W = np.zeros((in_dim, out_dim))
        else:
            self.W = uniform_init(rng, in_dim, (in_dim, out_dim))
        self.b = np.zeros(out_dim)

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, dict]:
        _require_finite("dense input", x)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"dense expected input width {self.in_dim}, got {x.shape[-1]}")
        return x @ self.W + self.b, {"x": x}

    def backward(self, cache: dict, dy: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        x = cache["x"]
        grads = {"W": x.T @ dy, "b": dy.sum(axis=0)}
        return dy @ self.W.T, grads


_ACTIVATIONS = ("linear", "tanh", "sigmoid", "softmax")


class Mlp:
    """Fully connected stack: tanh hidden layers, configurable output head."""

    def __init__(
        self,
        widths: list[int],
        rng: np.random.Generator,
        output_activation: str = "linear",
    ):
        if len(widths) < 2:
            raise ShapeError("an MLP needs at least input and output widths")
        if output_activation not in _ACTIVATIONS:
            raise DomainError(f"unknown output activation {output_activation!r}")
        self.widths = list(widths)
        self.output_activation = output_activation
        self.layers = [Dense(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]

    @property
    def params(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                out[f"l{i}.{k}"] = v
        return out

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, dict]:
        caches = []
        h = x
        last = len(self.layers) - 1
        acts = []
        for i, layer in enumerate(self.layers):
            h, cache = layer.forward(h)
            caches.append(cache)
            if i < last:
                h = np.tanh(h)
            acts.append(h)
        y = h
        if self.output_activation == "tanh":
            y = np.tanh(h)
        elif self.output_activation == "sigmoid":
            y = sigmoid(h)
        elif self.output_activation == "softmax":
            y = softmax(h)
        return y, {"caches": caches, "acts": acts, "out": y}

    def backward(self, cache: dict, dy: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        caches, acts, out = cache["caches"], cache["acts"], cache["out"]
        if self.output_activation == "tanh":
            d = dy * (1.0 - out * out)
        elif self.output_activation == "sigmoid":
            d = dy * out * (1.0 - out)
        elif self.output_activation == "softmax":
            d = softmax_backward(out, dy)
        else:
            d = dy
        grads: dict[str, np.ndarray] = {}
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            if i < last:
                # acts[i] is the tanh output feeding layer i+1
                d = d * (1.0 - acts[i] * acts[i])
            d, layer_grads = self.layers[i].backward(caches[i], d)
            for k, v in layer_grads.items():
                grads[f"l{i}.{k}"] = v
        return d, grads


class LstmLayer:
    """One LSTM layer over a (B, T, in) sequence.

    Pre-activations z_t = x_t W + h_{t-1} U + b are split into four h-wide
    blocks in GATE_ORDER; the cell follows the standard recurrences
    c_t = f*c + i*g, h_t = o*tanh(c_t). Parameter count is 4h(in + h + 1).
    """

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator | None = None):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        h = hidden_dim
        if rng is None:
            self.W = np.zeros((input_dim, 4 * h))
            self.U = np.zeros((h, 4 * h))
        else:
            self.W = uniform_init(rng, input_dim, (input_dim, 4 * h))
            self.U = uniform_init(rng, h, (h, 4 * h))
        self.b = np.zeros(4 * h)
        self.b[h : 2 * h] = 1.0  # forget gate starts open

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "U": self.U, "b": self.b}

    def forward(self, xs: np.ndarray) -> tuple[np.ndarray, dict]:
        _require_finite("lstm input", xs)
        if xs.ndim != 3 or xs.shape[2] != self.input_dim:
            raise ShapeError(
                f"lstm expected (B, T, {self.input_dim}), got {xs.shape}"
            )
        B, T, _ = xs.shape
        h = self.hidden_dim
        hs = np.zeros((B, T, h))
        cs = np.zeros((B, T, h))
        gates = np.zeros((B, T, 4 * h))
        h_prev = np.zeros((B, h))
        c_prev = np.zeros((B, h))
        for t in range(T):
            z = xs[:, t] @ self.W + h_prev @ self.U + self.b
            i = sigmoid(z[:, :h])
            f = sigmoid(z[:, h : 2 * h])
            g = np.tanh(z[:, 2 * h : 3 * h])
            o = sigmoid(z[:, 3 * h :])
            c = f * c_prev + i * g
            h_t = o * np.tanh(c)
            gates[:, t, :h] = i
            gates[:, t, h : 2 * h] = f
            gates[:, t, 2 * h : 3 * h] = g
            gates[:, t, 3 * h :] = o
            cs[:, t] = c
            hs[:, t] = h_t
            h_prev, c_prev = h_t, c
        return hs, {"xs": xs, "hs": hs, "cs": cs, "gates": gates}

    def backward(self, cache: dict, dhs: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """BPTT. `dhs` is the upstream gradient on every step's hidden state."""
        xs, hs, cs, gates = cache["xs"], cache["hs"], cache["cs"], cache["gates"]
        B, T, _ = xs.shape
        h = self.hidden_dim
        dW = np.zeros_like(self.W)
        dU = np.zeros_like(self.U)
        db = np.zeros_like(self.b)
        dxs = np.zeros_like(xs)
        dh_carry = np.zeros((B, h))
        dc_carry = np.zeros((B, h))
        for t in range(T - 1, -1, -1):
            i = gates[:, t, :h]
            f = gates[:, t, h : 2 * h]
            g = gates[:, t, 2 * h : 3 * h]
            o = gates[:, t, 3 * h :]
            c = cs[:, t]
            c_prev = cs[:, t - 1] if t > 0 else np.zeros((B, h))
            h_prev = hs[:, t - 1] if t > 0 else np.zeros((B, h))
            tanh_c = np.tanh(c)

            dh = dhs[:, t] + dh_carry
            do = dh * tanh_c
            dc = dh * o * (1.0 - tanh_c * tanh_c) + dc_carry
            df = dc * c_prev
            di = dc * g
            dg = dc * i

            dz = np.concatenate(
                [
                    di * i * (1.0 - i),
                    df * f * (1.0 - f),
                    dg * (1.0 - g * g),
                    do * o * (1.0 - o),
                ],
                axis=1,
            )
            dW += xs[:, t].T @ dz
            dU += h_prev.T @ dz
            db += dz.sum(axis=0)
            dxs[:, t] = dz @ self.W.T
            dh_carry = dz @ self.U.T
            dc_carry = dc * f
        return dxs, {"W": dW, "U": dU, "b": db}


class StackedLstm:
    """Stack of LSTM layers; layer l consumes layer l-1's hidden sequence."""

    def __init__(
        self,
        input_dim: int,
        hidden_dim: int,
        num_layers: int = 2,
        rng: np.random.Generator | None = None,
    ):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.layers = []
        for l in range(num_layers):
            in_l = input_dim if l == 0 else hidden_dim
            self.layers.append(LstmLayer(in_l, hidden_dim, rng))

    @property
    def params(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for l, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                out[f"l{l}.{k}"] = v
        return out

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def forward(self, xs: np.ndarray) -> tuple[np.ndarray, dict]:
        """Returns the top layer's full hidden sequence (B, T, h) and a cache."""
        caches = []
        seq = xs
        for layer in self.layers:
            seq, cache = layer.forward(seq)
            caches.append(cache)
        return seq, {"caches": caches}

    def final_hidden(self, xs: np.ndarray) -> tuple[np.ndarray, dict]:
        hs, cache = self.forward(xs)
        return hs[:, -1], cache

    def backward(self, cache: dict, dhs_top: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        grads: dict[str, np.ndarray] = {}
        d = dhs_top
        for l in range(self.num_layers - 1, -1, -1):
            d, layer_grads = self.layers[l].backward(cache["caches"][l], d)
            for k, v in layer_grads.items():
                grads[f"l{l}.{k}"] = v
        return d, grads

    def backward_last(self, cache: dict, dh_last: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Backward when only the final step's hidden state was consumed."""
        top = cache["caches"][-1]
        B, T, _ = top["xs"].shape
        dhs = np.zeros((B, T, self.hidden_dim))
        dhs[:, -1] = dh_last
        return self.backward(cache, dhs)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _check_one_hot(target: np.ndarray) -> None:
    ok = np.all(np.isin(target, (0.0, 1.0))) and np.all(target.sum(axis=-1) == 1.0)
    if not ok:
        raise DomainError("target is not one-hot")


def softmax_cross_entropy(
    logits: np.ndarray, target: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample loss -log p[target] and its gradient w.r.t. the logits, p - target.

    Accepts a single (M,) pair or a batch (B, M).
    """
    squeeze = logits.ndim == 1
    l2 = np.atleast_2d(logits)
    t2 = np.atleast_2d(target)
    if l2.shape != t2.shape:
        raise ShapeError(f"logits {l2.shape} vs target {t2.shape}")
    _check_one_hot(t2)
    shifted = l2 - l2.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1))
    loss = log_z - (shifted * t2).sum(axis=-1)
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=-1, keepdims=True)
    grad = probs - t2
    if squeeze:
        return loss[0], grad[0]
    return loss, grad


def squared_loss(pred: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-element 0.5*(pred-target)^2 and gradient (pred-target)."""
    diff = pred - target
    return 0.5 * diff * diff, diff


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

def sgd_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], alpha: float
) -> dict[str, np.ndarray]:
    """In-place p <- p - alpha*g. Ascent callers negate their gradients first."""
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        p -= alpha * g
    return params


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale the whole gradient dict so its global norm is <= max_norm.

    max_norm <= 0 disables clipping. Returns the pre-clip norm.
    """
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def grad_check(
    params: dict[str, np.ndarray],
    loss_fn: Callable[[], float],
    grads_fn: Callable[[], dict[str, np.ndarray]],
    h: float = 1e-6,
) -> float:
    """Max relative error between analytic gradients and central differences.

    `loss_fn` recomputes the scalar loss from the current parameter values;
    `grads_fn` returns analytic gradients at the current values. Only suitable
    for small models: runs 2 forward passes per scalar parameter.
    """
    analytic = grads_fn()
    worst = 0.0
    for name, p in params.items():
        g = analytic[name]
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            lp = loss_fn()
            flat[idx] = orig - h
            lm = loss_fn()
            flat[idx] = orig
            numeric = (lp - lm) / (2.0 * h)
            worst = max(worst, relative_error(float(gflat[idx]), numeric))
    return worst
