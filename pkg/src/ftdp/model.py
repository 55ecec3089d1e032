"""Deterministic toy workload: a two-layer tanh MLP on synthetic regression.

The model is small on purpose; what matters is that every quantity is a
pure function of seeds and counters. Parameters live in one flat float32
vector with a named (offset, shape) layout so collectives and checkpoints
can treat state as bytes. Forward/backward math runs in float64 and casts
results back, keeping gradients friendly to finite-difference checking
while stored state stays bit-deterministic float32.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from ftdp.errors import InvariantViolation

Dims = tuple[int, int, int]  # input, hidden, output

_TASK_SALT = 0xFEED  # namespaces the task map away from batch streams
_NOISE_SCALE = 0.05


def param_count(dims: Dims) -> int:
    din, dhid, dout = dims
    return din * dhid + dhid + dhid * dout + dout


def layout(dims: Dims) -> list[tuple[str, int, tuple[int, ...]]]:
    """Flat-vector layout: name, offset, shape, in storage order."""
    din, dhid, dout = dims
    out = []
    off = 0
    for name, shape in (("w1", (din, dhid)), ("b1", (dhid,)),
                        ("w2", (dhid, dout)), ("b2", (dout,))):
        out.append((name, off, shape))
        off += int(np.prod(shape))
    return out


@dataclass
class ModelState:
    dims: Dims
    params: np.ndarray  # float32, flat
    step: int = 0

    def view(self, name: str) -> np.ndarray:
        for n, off, shape in layout(self.dims):
            if n == name:
                return self.params[off:off + int(np.prod(shape))].reshape(shape)
        raise KeyError(name)


@dataclass
class OptimizerState:
    momentum: np.ndarray  # float32, same length as params
    beta: float = 0.9


@dataclass
class Batch:
    inputs: np.ndarray   # (micro_batch, input_dim) float32
    targets: np.ndarray  # (micro_batch, output_dim) float32
    replica_id: int
    cursor: int

    @property
    def batch_id(self) -> tuple[int, int]:
        return (self.replica_id, self.cursor)


def _generator(*entropy: int) -> np.random.Generator:
    # Counter-based RNG: the same key always yields the same stream,
    # regardless of how many draws other streams made.
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(entropy))))


def init_model(dims: Dims, seed: int) -> ModelState:
    din, dhid, dout = dims
    if min(din, dhid, dout) < 1:
        raise InvariantViolation(f"model dims must be positive: {dims}")
    rng = _generator(seed, 0)
    params = np.zeros(param_count(dims), dtype=np.float32)
    state = ModelState(dims, params)
    state.view("w1")[:] = (rng.standard_normal((din, dhid)) / np.sqrt(din)).astype(np.float32)
    state.view("w2")[:] = (rng.standard_normal((dhid, dout)) / np.sqrt(dhid)).astype(np.float32)
    # biases stay zero
    return state


def init_optimizer(dims: Dims, beta: float = 0.9) -> OptimizerState:
    return OptimizerState(momentum=np.zeros(param_count(dims), dtype=np.float32), beta=beta)


def task_map(data_seed: int, dims: Dims) -> np.ndarray:
    """The fixed linear map defining the regression task. Same for every
    replica and batch; this is the signal the replicas jointly learn."""
    din, _, dout = dims
    rng = _generator(data_seed, _TASK_SALT, 0)
    return (rng.standard_normal((din, dout)) / np.sqrt(din)).astype(np.float32)


def next_batch(data_seed: int, replica_id: int, cursor: int,
               micro_batch: int, dims: Dims) -> Batch:
    """Batch fully determined by (data_seed, replica_id, cursor)."""
    din, _, dout = dims
    rng = _generator(data_seed, 1, replica_id, cursor)
    inputs = rng.standard_normal((micro_batch, din)).astype(np.float32)
    noise = rng.standard_normal((micro_batch, dout)).astype(np.float32)
    targets = inputs @ task_map(data_seed, dims) + _NOISE_SCALE * noise
    return Batch(inputs, targets.astype(np.float32), replica_id, cursor)


def forward_backward(state: ModelState, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean-squared-error loss and the full flat gradient.

    Internally float64; the returned gradient is float32 so downstream
    reduction and optimizer arithmetic are bit-reproducible.
    """
    x = batch.inputs.astype(np.float64)
    t = batch.targets.astype(np.float64)
    w1 = state.view("w1").astype(np.float64)
    b1 = state.view("b1").astype(np.float64)
    w2 = state.view("w2").astype(np.float64)
    b2 = state.view("b2").astype(np.float64)

    h = np.tanh(x @ w1 + b1)
    y = h @ w2 + b2
    r = y - t
    loss = float(np.mean(r * r))

    dy = (2.0 / r.size) * r
    dw2 = h.T @ dy
    db2 = dy.sum(axis=0)
    dh = dy @ w2.T
    dpre = dh * (1.0 - h * h)
    dw1 = x.T @ dpre
    db1 = dpre.sum(axis=0)

    grad = np.concatenate([dw1.ravel(), db1.ravel(), dw2.ravel(), db2.ravel()])
    return loss, grad.astype(np.float32)


def optimizer_step(state: ModelState, opt: OptimizerState, grad: np.ndarray,
                   lr: float) -> tuple[ModelState, OptimizerState]:
    """SGD with momentum, in float32: m <- beta*m + g; p <- p - lr*m."""
    if grad.shape != state.params.shape:
        raise InvariantViolation(
            f"gradient length {grad.shape} != params {state.params.shape}")
    opt.momentum *= np.float32(opt.beta)
    opt.momentum += grad
    state.params -= np.float32(lr) * opt.momentum
    return state, opt


@dataclass
class LrPolicy:
    initial_lr: float = 0.05
    decay_horizon: int = 0       # 0 = constant
    final_fraction: float = 1.0  # lr at/after the horizon, as a fraction
    intervention: str = "none"   # none | linear | sqrt

    def __post_init__(self):
        if self.intervention not in ("none", "linear", "sqrt"):
            raise InvariantViolation(f"unknown lr intervention: {self.intervention}")


def compute_lr(policy: LrPolicy, step: int, healthy_count: int, total_replicas: int) -> float:
    """Base schedule times the degraded-fleet factor.

    With h healthy of N total: none -> 1, linear -> h/N, sqrt -> sqrt(h/N).
    h = 0 is an invalid quorum and a caller bug.
    """
    if healthy_count <= 0:
        raise InvariantViolation("invalid quorum: healthy_count must be >= 1")
    if healthy_count > total_replicas:
        raise InvariantViolation(
            f"healthy_count {healthy_count} exceeds total {total_replicas}")
    base = policy.initial_lr
    if policy.decay_horizon > 0:
        frac = min(step / policy.decay_horizon, 1.0)
        base = policy.initial_lr * (1.0 - (1.0 - policy.final_fraction) * frac)
    ratio = healthy_count / total_replicas
    if policy.intervention == "linear":
        factor = ratio
    elif policy.intervention == "sqrt":
        factor = float(np.sqrt(ratio))
    else:
        factor = 1.0
    return base * factor


def hash_state(params: np.ndarray, momentum: np.ndarray, step: int) -> str:
    """Order-stable digest of replicated state."""
    h = hashlib.sha256()
    h.update(step.to_bytes(8, "little"))
    h.update(np.ascontiguousarray(params, dtype=np.float32).tobytes())
    h.update(np.ascontiguousarray(momentum, dtype=np.float32).tobytes())
    return h.hexdigest()
