"""From-scratch LSTM: gated cell forward pass, full backpropagation through time,
mini-batch gradient-descent training with a regression or 4-way softmax head, and
a finite-difference gradient checker. All arithmetic is double precision."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np

from .dataset import Scaler, WindowConfig, WindowedDataset, apply_scaler, fit_scaler, invert_scaler

GATES = ("input", "forget", "output", "candidate")

REGRESSION = "regression"
SOFTMAX4 = "softmax4"

FORMAT_VERSION = "cellflow-model v1"


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp overflow for very negative z saturates to exactly 0.0, which is the
    # correct limit; silence the spurious warning.
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


@dataclass(eq=False)
class LstmParams:
    """Per-gate weights: w[g] maps the input, u[g] the previous hidden state,
    b[g] is the bias; g ranges over input/forget/output/candidate."""

    w: dict[str, np.ndarray]  # gate -> (hidden, input)
    u: dict[str, np.ndarray]  # gate -> (hidden, hidden)
    b: dict[str, np.ndarray]  # gate -> (hidden,)
    hidden_size: int
    input_size: int

    def __post_init__(self):
        for g in GATES:
            if self.w[g].shape != (self.hidden_size, self.input_size):
                raise ValueError(f"w[{g}] has shape {self.w[g].shape}, expected {(self.hidden_size, self.input_size)}")
            if self.u[g].shape != (self.hidden_size, self.hidden_size):
                raise ValueError(f"u[{g}] has shape {self.u[g].shape}, expected {(self.hidden_size, self.hidden_size)}")
            if self.b[g].shape != (self.hidden_size,):
                raise ValueError(f"b[{g}] has shape {self.b[g].shape}, expected {(self.hidden_size,)}")
            if not (np.isfinite(self.w[g]).all() and np.isfinite(self.u[g]).all() and np.isfinite(self.b[g]).all()):
                raise ValueError(f"non-finite entries in gate {g!r} parameters")

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        """All parameter arrays in a fixed, documented order."""
        out = []
        for g in GATES:
            out.extend([(f"w.{g}", self.w[g]), (f"u.{g}", self.u[g]), (f"b.{g}", self.b[g])])
        return out


@dataclass(eq=False)
class HeadParams:
    """Dense output head: a 1-unit affine layer for regression or a 4-way
    softmax classifier."""

    kind: str  # REGRESSION or SOFTMAX4
    weights: np.ndarray  # (output_dim, hidden)
    bias: np.ndarray  # (output_dim,)

    def __post_init__(self):
        if self.kind not in (REGRESSION, SOFTMAX4):
            raise ValueError(f"unknown head kind {self.kind!r}")
        if self.weights.shape[0] != self.output_dim or self.bias.shape != (self.output_dim,):
            raise ValueError(f"head shapes {self.weights.shape}/{self.bias.shape} do not match output_dim {self.output_dim}")

    @property
    def output_dim(self) -> int:
        return 1 if self.kind == REGRESSION else 4

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        return [("head.weights", self.weights), ("head.bias", self.bias)]


@dataclass(eq=False)
class CellState:
    h: np.ndarray
    c: np.ndarray


@dataclass(frozen=True)
class TrainConfig:
    seed: int  # mandatory: no wall-clock seeding anywhere
    learning_rate: float = 0.01
    epochs: int = 50
    batch_size: int = 32
    clip_norm: float | None = 5.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")


@dataclass(eq=False)
class CellCache:
    """Single-step values needed by the backward pass: inputs, pre-activations
    and gate outputs."""

    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    pre: dict[str, np.ndarray]
    gates: dict[str, np.ndarray]
    c: np.ndarray
    tanh_c: np.ndarray


@dataclass(eq=False)
class ForwardCache:
    """Per-step values of a full unrolled forward pass plus the parameters that
    produced them."""

    x: np.ndarray  # (n, T, input)
    h: np.ndarray  # (n, T+1, hidden); h[:, 0] is the zero initial state
    c: np.ndarray  # (n, T+1, hidden)
    gates: dict[str, np.ndarray]  # gate -> (n, T, hidden)
    tanh_c: np.ndarray  # (n, T, hidden)
    params: LstmParams
    head: HeadParams
    pred: np.ndarray  # (n,) regression output or (n, 4) probabilities


@dataclass(eq=False)
class Gradients:
    """Gradient arrays mirroring LstmParams plus the head."""

    w: dict[str, np.ndarray]
    u: dict[str, np.ndarray]
    b: dict[str, np.ndarray]
    head_weights: np.ndarray
    head_bias: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        out = []
        for g in GATES:
            out.extend([self.w[g], self.u[g], self.b[g]])
        out.extend([self.head_weights, self.head_bias])
        return out


@dataclass(eq=False)
class LstmModel:
    """Everything needed to predict: cell and head parameters, the scaler fitted
    on the training data, and the window configuration. ``class_names`` maps
    softmax output positions to application labels."""

    params: LstmParams
    head: HeadParams
    scaler: Scaler
    window: WindowConfig
    class_names: tuple[str, ...] | None = None


def init_params(hidden_size: int, input_size: int, rng: np.random.Generator) -> LstmParams:
    """Uniform init in [-1/sqrt(hidden), +1/sqrt(hidden)], drawn in gate order."""
    k = 1.0 / np.sqrt(hidden_size)
    w, u, b = {}, {}, {}
    for g in GATES:
        w[g] = rng.uniform(-k, k, size=(hidden_size, input_size))
        u[g] = rng.uniform(-k, k, size=(hidden_size, hidden_size))
        b[g] = rng.uniform(-k, k, size=hidden_size)
    return LstmParams(w=w, u=u, b=b, hidden_size=hidden_size, input_size=input_size)


def init_head(kind: str, hidden_size: int, rng: np.random.Generator) -> HeadParams:
    k = 1.0 / np.sqrt(hidden_size)
    out = 1 if kind == REGRESSION else 4
    return HeadParams(kind=kind, weights=rng.uniform(-k, k, size=(out, hidden_size)), bias=rng.uniform(-k, k, size=out))


def _check_finite(name: str, value: np.ndarray) -> None:
    if not np.isfinite(value).all():
        raise FloatingPointError(f"non-finite values in {name}")


def cell_forward(x: np.ndarray, state: CellState, p: LstmParams) -> tuple[CellState, CellCache]:
    """One LSTM step: gate the input, update the cell, emit the hidden state.

        i = sigmoid(W_i x + U_i h + b_i)      f, o analogous
        g = tanh(W_g x + U_g h + b_g)
        c' = f * c + i * g
        h' = o * tanh(c')

    ``x`` may be a single input vector or a (batch, input) matrix.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.input_size:
        raise ValueError(f"input has {x.shape[-1]} features, parameters expect {p.input_size}")
    if state.h.shape != state.c.shape or state.h.shape[-1] != p.hidden_size:
        raise ValueError(f"state shape {state.h.shape} does not match hidden_size {p.hidden_size}")

    pre = {g: x @ p.w[g].T + state.h @ p.u[g].T + p.b[g] for g in GATES}
    gates = {g: (np.tanh(pre[g]) if g == "candidate" else _sigmoid(pre[g])) for g in GATES}
    for name in GATES:
        _check_finite(f"{name} gate", gates[name])
    c_new = gates["forget"] * state.c + gates["input"] * gates["candidate"]
    _check_finite("cell state", c_new)
    tanh_c = np.tanh(c_new)
    h_new = gates["output"] * tanh_c
    _check_finite("hidden state", h_new)

    cache = CellCache(x=x, h_prev=state.h, c_prev=state.c, pre=pre, gates=gates, c=c_new, tanh_c=tanh_c)
    return CellState(h=h_new, c=c_new), cache


def _apply_head(h_final: np.ndarray, head: HeadParams) -> np.ndarray:
    logits = h_final @ head.weights.T + head.bias
    if head.kind == REGRESSION:
        return logits[..., 0]
    # numerically stable softmax; invariant under adding a constant to all logits
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_seq(x: np.ndarray, p: LstmParams, head: HeadParams) -> tuple[np.ndarray, ForwardCache]:
    """Unrolled forward over a batch of windows, x: (n, T, input)."""
    n, steps, _ = x.shape
    hs = p.hidden_size
    h = np.zeros((n, steps + 1, hs))
    c = np.zeros((n, steps + 1, hs))
    gates = {g: np.empty((n, steps, hs)) for g in GATES}
    tanh_c = np.empty((n, steps, hs))

    state = CellState(h=h[:, 0], c=c[:, 0])
    for t in range(steps):
        state, cache = cell_forward(x[:, t], state, p)
        h[:, t + 1] = state.h
        c[:, t + 1] = state.c
        for g in GATES:
            gates[g][:, t] = cache.gates[g]
        tanh_c[:, t] = cache.tanh_c

    pred = _apply_head(h[:, -1], head)
    return pred, ForwardCache(x=x, h=h, c=c, gates=gates, tanh_c=tanh_c, params=p, head=head, pred=pred)


def forward(window: np.ndarray, p: LstmParams, head: HeadParams) -> tuple[float | np.ndarray, ForwardCache]:
    """Run one window (rows = time steps) from a zero state through the LSTM and
    the head. Returns a scalar for regression, a 4-probability vector for the
    softmax head, plus the cache for backward."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2 or window.shape[0] == 0:
        raise ValueError(f"window must be a non-empty (steps, features) matrix, got shape {window.shape}")
    pred, cache = _forward_seq(window[None, :, :], p, head)
    return (float(pred[0]) if head.kind == REGRESSION else pred[0]), cache


def backward(cache: ForwardCache, loss_gradient: np.ndarray) -> Gradients:
    """Backpropagation through time over the cached forward pass.

    ``loss_gradient`` is dLoss/dPrediction, shaped like ``cache.pred``:
    (n,) for regression, (n, 4) w.r.t. the probabilities for softmax.
    """
    p, head = cache.params, cache.head
    loss_gradient = np.asarray(loss_gradient, dtype=np.float64)
    if loss_gradient.shape != cache.pred.shape:
        raise ValueError(f"loss gradient shape {loss_gradient.shape} does not match prediction shape {cache.pred.shape}")

    h_final = cache.h[:, -1]
    if head.kind == REGRESSION:
        dlogits = loss_gradient[:, None]
    else:
        probs = cache.pred
        inner = (loss_gradient * probs).sum(axis=-1, keepdims=True)
        dlogits = probs * (loss_gradient - inner)
    head_w_grad = dlogits.T @ h_final
    head_b_grad = dlogits.sum(axis=0)
    dh = dlogits @ head.weights

    grads = Gradients(
        w={g: np.zeros_like(p.w[g]) for g in GATES},
        u={g: np.zeros_like(p.u[g]) for g in GATES},
        b={g: np.zeros_like(p.b[g]) for g in GATES},
        head_weights=head_w_grad,
        head_bias=head_b_grad,
    )

    steps = cache.x.shape[1]
    dc = np.zeros_like(dh)
    for t in reversed(range(steps)):
        i = cache.gates["input"][:, t]
        f = cache.gates["forget"][:, t]
        o = cache.gates["output"][:, t]
        g = cache.gates["candidate"][:, t]
        tanh_c = cache.tanh_c[:, t]
        c_prev = cache.c[:, t]
        x_t = cache.x[:, t]
        h_prev = cache.h[:, t]

        dc = dc + dh * o * (1.0 - tanh_c**2)
        dz = {
            "output": dh * tanh_c * o * (1.0 - o),
            "input": dc * g * i * (1.0 - i),
            "forget": dc * c_prev * f * (1.0 - f),
            "candidate": dc * i * (1.0 - g**2),
        }
        dh = np.zeros_like(dh)
        for gate in GATES:
            grads.w[gate] += dz[gate].T @ x_t
            grads.u[gate] += dz[gate].T @ h_prev
            grads.b[gate] += dz[gate].sum(axis=0)
            dh += dz[gate] @ p.u[gate]
        dc = dc * f
    return grads


def _global_norm(grads: Gradients) -> float:
    return float(np.sqrt(sum(float((a * a).sum()) for a in grads.arrays())))


def _clip_gradients(grads: Gradients, clip_norm: float) -> None:
    norm = _global_norm(grads)
    if norm > clip_norm:
        scale = clip_norm / norm
        for a in grads.arrays():
            a *= scale


def _sgd_step(p: LstmParams, head: HeadParams, grads: Gradients, lr: float) -> None:
    for g in GATES:
        p.w[g] -= lr * grads.w[g]
        p.u[g] -= lr * grads.u[g]
        p.b[g] -= lr * grads.b[g]
    head.weights -= lr * grads.head_weights
    head.bias -= lr * grads.head_bias


def _batch_loss_and_gradient(pred, targets, head_kind, batch_n):
    """Returns (summed loss over the batch, dLoss/dPred for the batch-mean loss)."""
    if head_kind == REGRESSION:
        res = pred - targets
        return float((res**2).sum()), 2.0 * res / batch_n
    labels = targets.astype(int)
    picked = np.clip(pred[np.arange(len(labels)), labels], 1e-300, None)
    loss_sum = float(-np.log(picked).sum())
    dldp = np.zeros_like(pred)
    dldp[np.arange(len(labels)), labels] = -1.0 / picked / batch_n
    return loss_sum, dldp


def train(
    ds: WindowedDataset,
    cfg: TrainConfig,
    head_kind: str = REGRESSION,
    hidden_size: int = 100,
) -> tuple[LstmModel, list[float]]:
    """Train by mini-batch gradient descent: MSE loss for the regression head,
    cross-entropy for the softmax head, optional global-norm clipping.

    The scaler is fitted on ``ds`` (pass the training split only), features and
    regression targets are scaled to [0,1], and everything downstream of the
    seed is deterministic. Returns the model and one mean loss per epoch.
    """
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    if head_kind == SOFTMAX4:
        if not ds.classification:
            raise ValueError("softmax head requires a classification dataset")
        labels = ds.targets.astype(int)
        if labels.min() < 0 or labels.max() > 3:
            raise ValueError("softmax head expects class labels in 0..3")
    elif head_kind == REGRESSION:
        if ds.classification:
            raise ValueError("regression head requires scalar targets, got a classification dataset")
    else:
        raise ValueError(f"unknown head kind {head_kind!r}")

    scaler = fit_scaler(ds)
    scaled = apply_scaler(ds, scaler)
    x, y = scaled.histories, scaled.targets
    n = len(scaled)

    rng = np.random.default_rng(cfg.seed)
    params = init_params(hidden_size, ds.n_features, rng)
    head = init_head(head_kind, hidden_size, rng)

    loss_history: list[float] = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        epoch_loss_sum = 0.0
        for batch_no, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[lo : lo + cfg.batch_size]
            pred, cache = _forward_seq(x[idx], params, head)
            loss_sum, dpred = _batch_loss_and_gradient(pred, y[idx], head_kind, len(idx))
            if not np.isfinite(loss_sum):
                raise RuntimeError(f"non-finite loss at epoch {epoch}, batch {batch_no}")
            grads = backward(cache, dpred)
            if cfg.clip_norm is not None:
                _clip_gradients(grads, cfg.clip_norm)
            _sgd_step(params, head, grads, cfg.learning_rate)
            epoch_loss_sum += loss_sum
        loss_history.append(epoch_loss_sum / n)

    return LstmModel(params=params, head=head, scaler=scaler, window=ds.config), loss_history


def predict(ds: WindowedDataset, model: LstmModel, chunk_size: int = 1024) -> np.ndarray:
    """Predictions in original target units, one per window, order preserved.

    Regression outputs are un-scaled and clamped at 0 from below (packet counts
    cannot be negative). With a softmax head, returns the (n, 4) probability
    rows instead.
    """
    if len(ds) == 0:
        return np.empty((0,), dtype=np.float64)
    if ds.n_features != model.params.input_size:
        raise ValueError(f"dataset has {ds.n_features} features, model expects {model.params.input_size}")
    scaled = apply_scaler(ds, model.scaler)
    chunks = [
        _forward_seq(scaled.histories[lo : lo + chunk_size], model.params, model.head)[0]
        for lo in range(0, len(ds), chunk_size)
    ]
    pred = np.concatenate(chunks)
    if model.head.kind == REGRESSION:
        return np.maximum(invert_scaler(pred, model.scaler), 0.0)
    return pred


def _sample_loss(window, target, p, head):
    pred, cache = forward(window, p, head)
    if head.kind == REGRESSION:
        return (pred - target) ** 2, cache, pred
    probs = pred
    return -float(np.log(probs[int(target)])), cache, probs


def grad_check(
    p: LstmParams,
    head: HeadParams,
    sample: tuple[np.ndarray, float],
    eps: float = 1e-5,
) -> float:
    """Compare analytic BPTT gradients against central finite differences for
    every parameter; returns the maximum relative error, with the relative error
    defined as |analytic - numeric| / max(|analytic|, |numeric|, 1e-12)."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    window, target = sample
    _, cache, out = _sample_loss(window, target, p, head)
    if head.kind == REGRESSION:
        dpred = 2.0 * (out - target)
        analytic = backward(cache, np.array([dpred]))
    else:
        dldp = np.zeros((1, 4))
        dldp[0, int(target)] = -1.0 / out[int(target)]
        analytic = backward(cache, dldp)

    param_arrays = [a for _, a in p.arrays()] + [a for _, a in head.arrays()]
    grad_arrays = analytic.arrays()

    worst = 0.0
    for values, grad in zip(param_arrays, grad_arrays):
        flat_v = values.reshape(-1)
        flat_g = grad.reshape(-1)
        for j in range(flat_v.size):
            orig = flat_v[j]
            flat_v[j] = orig + eps
            up, _, _ = _sample_loss(window, target, p, head)
            flat_v[j] = orig - eps
            down, _, _ = _sample_loss(window, target, p, head)
            flat_v[j] = orig
            numeric = (up - down) / (2.0 * eps)
            rel = abs(flat_g[j] - numeric) / max(abs(flat_g[j]), abs(numeric), 1e-12)
            worst = max(worst, rel)
    return worst


def _write_matrix(sink: IO[str], name: str, a: np.ndarray) -> None:
    mat = np.atleast_2d(a)
    sink.write(f"param {name} {mat.shape[0]} {mat.shape[1]}\n")
    for row in mat:
        sink.write(" ".join(repr(float(v)) for v in row) + "\n")


def save_model(model: LstmModel, sink: IO[str]) -> None:
    """Text persistence: a format-version line, a config block, then row-major
    parameter matrices written with full round-trip decimal precision."""
    p, head, s, w = model.params, model.head, model.scaler, model.window
    sink.write(FORMAT_VERSION + "\n")
    sink.write(f"head {head.kind}\n")
    sink.write(f"hidden_size {p.hidden_size}\n")
    sink.write(f"input_size {p.input_size}\n")
    sink.write(f"bin_size {w.bin_size!r}\n")
    sink.write(f"history_len {w.history_len}\n")
    sink.write(f"features {','.join(w.feature_names)}\n")
    sink.write(f"target {w.target_name}\n")
    if model.class_names:
        sink.write(f"classes {','.join(model.class_names)}\n")
    sink.write("scaler.feature_min " + " ".join(repr(float(v)) for v in s.feature_min) + "\n")
    sink.write("scaler.feature_max " + " ".join(repr(float(v)) for v in s.feature_max) + "\n")
    sink.write(f"scaler.target_min {s.target_min!r}\n")
    sink.write(f"scaler.target_max {s.target_max!r}\n")
    for name, a in p.arrays() + head.arrays():
        _write_matrix(sink, name, a)
    sink.write("end\n")


def load_model(source: IO[str]) -> LstmModel:
    lines = [ln.rstrip("\n") for ln in source]
    if not lines or lines[0] != FORMAT_VERSION:
        raise ValueError(f"unsupported model format (expected {FORMAT_VERSION!r})")

    kv: dict[str, str] = {}
    i = 1
    while i < len(lines) and not lines[i].startswith("param "):
        key, _, value = lines[i].partition(" ")
        kv[key] = value
        i += 1

    matrices: dict[str, np.ndarray] = {}
    while i < len(lines) and lines[i] != "end":
        _, name, rows, cols = lines[i].split(" ")
        rows, cols = int(rows), int(cols)
        block = [[float(v) for v in lines[i + 1 + r].split(" ")] for r in range(rows)]
        matrices[name] = np.array(block, dtype=np.float64).reshape(rows, cols)
        i += 1 + rows
    if i >= len(lines) or lines[i] != "end":
        raise ValueError("truncated model file: missing end marker")

    hidden = int(kv["hidden_size"])
    inp = int(kv["input_size"])
    params = LstmParams(
        w={g: matrices[f"w.{g}"] for g in GATES},
        u={g: matrices[f"u.{g}"] for g in GATES},
        b={g: matrices[f"b.{g}"].reshape(-1) for g in GATES},
        hidden_size=hidden,
        input_size=inp,
    )
    head = HeadParams(kind=kv["head"], weights=matrices["head.weights"], bias=matrices["head.bias"].reshape(-1))
    scaler = Scaler(
        feature_min=np.array([float(v) for v in kv["scaler.feature_min"].split(" ")]),
        feature_max=np.array([float(v) for v in kv["scaler.feature_max"].split(" ")]),
        target_min=float(kv["scaler.target_min"]),
        target_max=float(kv["scaler.target_max"]),
    )
    window = WindowConfig(
        bin_size=float(kv["bin_size"]),
        history_len=int(kv["history_len"]),
        feature_names=tuple(kv["features"].split(",")),
        target_name=kv["target"],
    )
    class_names = tuple(kv["classes"].split(",")) if "classes" in kv else None
    return LstmModel(params=params, head=head, scaler=scaler, window=window, class_names=class_names)
