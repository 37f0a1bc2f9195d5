"""Coordinated Q optimizing network.

A small MLP scores the pair (environment traffic information, Q-matrix). The
joint action is found by a single greedy sweep over pursuers: for each row,
try making each other legal action the row's argmax by swapping its value
with the current maximum, and keep the swap only if the score strictly
improves.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import nn_core as nn
from .errors import ContractError, NumericError
from .nn_core import LayerSpec, ParamStore
from .state_codec import EnvInfo

calls: Counter = Counter()


@dataclass
class QMatrix:
    values: np.ndarray  # (M, 3)
    mask: np.ndarray  # (M, 3) bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape or self.values.ndim != 2 or self.values.shape[1] != 3:
            raise ContractError(f"QMatrix needs matching (M, 3) values and mask, got {self.values.shape}")
        if not self.mask.any(axis=1).all():
            raise ContractError("every QMatrix row needs at least one legal action")

    def copy(self) -> "QMatrix":
        return QMatrix(self.values.copy(), self.mask.copy())


@dataclass(frozen=True)
class CoordinatorSpec:
    rows: int
    cols: int
    n_lanes: int
    M: int
    hidden: tuple[int, ...] = (128, 64)

    @property
    def input_size(self) -> int:
        return 2 * self.rows * self.cols + self.n_lanes + 3 * self.M

    @property
    def layers(self) -> list[LayerSpec]:
        widths = (self.input_size, *self.hidden)
        out = [LayerSpec("dense", a, b) for a, b in zip(widths, widths[1:])]
        return out + [LayerSpec("dense", widths[-1], 1, activation=None)]


def init_store(spec: CoordinatorSpec, N: int, B: int, rng: np.random.Generator,
               qm_divisor: float = 1.0) -> ParamStore:
    # QM entries track returns, which are far larger than the count features; unscaled
    # they make plain SGD on the scorer diverge within a couple of episodes.
    store = ParamStore({"divisors": [float(spec.M), float(max(N, 1)), float(max(B, 1))],
                        "qm_divisor": float(qm_divisor)})
    store.add_layers("coord", spec.layers, rng)
    return store


def env_features(x: EnvInfo, store: ParamStore) -> np.ndarray:
    dm, dn, db = store.meta["divisors"]
    return np.concatenate([x.SP.ravel() / dm, x.SE.ravel() / dn, x.BN.ravel() / db])


def build_input(x: EnvInfo, qm: QMatrix | np.ndarray, store: ParamStore) -> np.ndarray:
    values = qm.values if isinstance(qm, QMatrix) else np.asarray(qm)
    return np.concatenate([env_features(x, store), values.ravel() / store.meta.get("qm_divisor", 1.0)])


def q_tot_batch(inputs: np.ndarray, store: ParamStore, spec: CoordinatorSpec) -> nn.Tensor:
    if inputs.ndim != 2 or inputs.shape[1] != spec.input_size:
        raise ContractError(f"coordinator expects (B, {spec.input_size}) inputs, got {inputs.shape}")
    calls["q_tot"] += 1
    dtype = store.params["coord.0.w"].dtype
    out = store.forward_layers("coord", spec.layers, inputs.astype(dtype))
    return nn.reshape(out, (len(inputs),))


def q_tot(x: EnvInfo, qm: QMatrix, store: ParamStore, spec: CoordinatorSpec) -> float:
    with nn.no_grad():
        return float(q_tot_batch(build_input(x, qm, store)[None], store, spec).data[0])


def actions_from(qm: QMatrix) -> np.ndarray:
    """Per-row argmax over legal entries, lowest index on ties."""
    return np.argmax(np.where(qm.mask, qm.values, -np.inf), axis=1)


@dataclass
class JointResult:
    qm: QMatrix
    actions: np.ndarray
    score: float
    initial_score: float
    evaluations: int
    improvements: int


def optimize_joint(x: EnvInfo, qm: QMatrix, store: ParamStore, spec: CoordinatorSpec) -> JointResult:
    env = env_features(x, store)

    def score(values: np.ndarray) -> float:
        with nn.no_grad():
            inp = np.concatenate([env, values.ravel() / store.meta.get("qm_divisor", 1.0)])[None]
            return float(q_tot_batch(inp, store, spec).data[0])

    best = qm.values.copy()
    best_score = initial = score(best)
    evaluations, improvements = 1, 0
    for m in range(best.shape[0]):
        legal = np.flatnonzero(qm.mask[m])
        start = int(legal[np.argmax(best[m, legal])])
        for a in legal:
            if a == start:
                continue
            cur = int(legal[np.argmax(best[m, legal])])
            if a == cur:
                continue
            cand = best.copy()
            cand[m, a], cand[m, cur] = best[m, cur], best[m, a]
            s = score(cand)
            evaluations += 1
            if s > best_score:
                best, best_score = cand, s
                improvements += 1
    out = QMatrix(best, qm.mask.copy())
    return JointResult(out, actions_from(out), best_score, initial, evaluations, improvements)


@dataclass
class GlobalExperience:
    x: EnvInfo
    qm: QMatrix
    reward: float


class GlobalMemory:
    """FIFO pool of (coordinator input vector, global reward) pairs."""

    def __init__(self, capacity: int, input_size: int):
        self.capacity = capacity
        self.inputs = np.zeros((capacity, input_size), dtype=np.float64)
        self.rewards = np.zeros(capacity, dtype=np.float64)
        self.size = 0
        self.head = 0

    def __len__(self) -> int:
        return self.size

    def store(self, e: GlobalExperience, store: ParamStore) -> None:
        self.inputs[self.head] = build_input(e.x, e.qm, store)
        self.rewards[self.head] = e.reward
        self.head = (self.head + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        if self.size < batch_size:
            return None
        idx = rng.choice(self.size, size=batch_size, replace=False)
        return self.inputs[idx], self.rewards[idx]

    def state_dict(self) -> dict[str, np.ndarray]:
        order = np.arange(self.size) if self.size < self.capacity else (np.arange(self.capacity) + self.head) % self.capacity
        return {"inputs": self.inputs[order], "rewards": self.rewards[order]}

    def load_state_dict(self, d) -> None:
        n = len(d["rewards"])
        self.inputs[:n] = d["inputs"]
        self.rewards[:n] = d["rewards"]
        self.size = n
        self.head = n % self.capacity


def learn_step(store: ParamStore, spec: CoordinatorSpec, inputs: np.ndarray, rewards: np.ndarray, lr: float,
               max_grad_norm: float | None = None) -> float:
    """One SGD step regressing the score onto the global reward; returns the pre-step loss."""
    if len(rewards) == 0:
        raise ContractError("coordinator learn_step on an empty batch")
    store.zero_grad()
    loss = nn.mse_loss(q_tot_batch(inputs, store, spec), np.asarray(rewards, dtype=np.float64))
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError("non-finite coordinator loss")
    loss.backward()
    nn.sgd_step(store, lr, max_grad_norm)
    return value
