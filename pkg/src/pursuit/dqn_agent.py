"""Per-pursuer deep Q network with replay memory and a periodically synced target copy."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import iese, nn_core as nn
from .errors import ContractError, NumericError
from .iese import IeseSpec
from .nn_core import LayerSpec, ParamStore, Tensor
from .state_codec import AgentState

N_ACTIONS = 3


@dataclass(frozen=True)
class DqnSpec:
    encoder: IeseSpec
    use_iese: bool = True
    hidden: int = 64
    target_sync: int = 100

    @property
    def head_layers(self) -> list[LayerSpec]:
        return [
            LayerSpec("dense", self.encoder.d_out, self.hidden),
            LayerSpec("dense", self.hidden, N_ACTIONS, activation=None),
        ]

    @property
    def flat_layers(self) -> list[LayerSpec]:
        e = self.encoder
        return [LayerSpec("dense", 3 * e.rows * e.cols, e.d_out)]


def init_store(spec: DqnSpec, scale: tuple[float, float, float], rng: np.random.Generator) -> ParamStore:
    store = ParamStore({"scale": [float(v) for v in scale], "encoder": "iese" if spec.use_iese else "flat"})
    if spec.use_iese:
        iese.init_params(store, spec.encoder, rng)
    else:
        store.add_layers("flat", spec.flat_layers, rng)
    store.add_layers("head", spec.head_layers, rng)
    return store


def encode_states(x: np.ndarray, store: ParamStore, spec: DqnSpec) -> Tensor:
    if spec.use_iese:
        return iese.encode_batch(x, store, spec.encoder)[0]
    e = spec.encoder
    if x.ndim != 4 or x.shape[1:] != (3, e.rows, e.cols):
        raise ContractError(f"expected (B, 3, {e.rows}, {e.cols}) states, got {x.shape}")
    flat = iese.scale_inputs(x, store).reshape(len(x), -1)
    return store.forward_layers("flat", spec.flat_layers, flat)


def q_values_batch(x: np.ndarray, store: ParamStore, spec: DqnSpec) -> Tensor:
    return store.forward_layers("head", spec.head_layers, encode_states(x, store, spec))


def q_values(s: AgentState, store: ParamStore, spec: DqnSpec) -> np.ndarray:
    """Q-list (left, right, straight) for one state."""
    with nn.no_grad():
        return q_values_batch(s.stacked()[None], store, spec).data[0].copy()


def masked_argmax(q: np.ndarray, mask: np.ndarray) -> int:
    return int(np.argmax(np.where(mask, q, -np.inf)))


def select_action(q: np.ndarray, mask: np.ndarray, eps: float, rng: np.random.Generator) -> int:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ContractError("select_action: no legal action in mask")
    if rng.random() < eps:
        valid = np.flatnonzero(mask)
        return int(valid[rng.integers(len(valid))])
    return masked_argmax(q, mask)


@dataclass
class Experience:
    state: np.ndarray  # (3, rows, cols) raw counts
    action: int
    reward: float
    next_state: np.ndarray
    terminal: bool
    next_mask: np.ndarray = field(default_factory=lambda: np.ones(N_ACTIONS, dtype=bool))


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminal: np.ndarray
    next_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    def repeat(self, k: int) -> "Batch":
        return Batch(*(np.concatenate([a] * k) for a in (
            self.states, self.actions, self.rewards, self.next_states, self.terminal, self.next_mask)))


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions."""

    def __init__(self, capacity: int, state_shape: tuple[int, int, int]):
        if capacity < 1:
            raise ContractError("replay capacity must be positive")
        self.capacity = capacity
        self.states = np.zeros((capacity, *state_shape), dtype=np.int16)
        self.next_states = np.zeros_like(self.states)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float64)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.next_mask = np.ones((capacity, N_ACTIONS), dtype=bool)
        self.size = 0
        self.head = 0

    def __len__(self) -> int:
        return self.size

    def store(self, e: Experience) -> None:
        if e.action not in (0, 1, 2):
            raise ContractError(f"experience action {e.action} outside 0..2")
        i = self.head
        self.states[i] = e.state
        self.next_states[i] = e.next_state
        self.actions[i] = e.action
        self.rewards[i] = e.reward
        self.terminal[i] = e.terminal
        self.next_mask[i] = e.next_mask
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _order(self) -> np.ndarray:
        # slot indices from oldest to newest
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self.head) % self.capacity

    def items(self) -> list[Experience]:
        return [
            Experience(self.states[i].copy(), int(self.actions[i]), float(self.rewards[i]),
                       self.next_states[i].copy(), bool(self.terminal[i]), self.next_mask[i].copy())
            for i in self._order()
        ]

    def take(self, idx: np.ndarray) -> Batch:
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx],
                     self.next_states[idx], self.terminal[idx], self.next_mask[idx])

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch | None:
        """Uniform sample without replacement; None while fewer than ``batch_size`` are stored."""
        if self.size < batch_size:
            return None
        return self.take(rng.choice(self.size, size=batch_size, replace=False))

    def state_dict(self) -> dict[str, np.ndarray]:
        order = self._order()
        return {
            "states": self.states[order], "next_states": self.next_states[order], "actions": self.actions[order],
            "rewards": self.rewards[order], "terminal": self.terminal[order], "next_mask": self.next_mask[order],
        }

    def load_state_dict(self, d: dict[str, np.ndarray]) -> None:
        n = len(d["actions"])
        if n > self.capacity:
            raise ContractError("replay snapshot larger than capacity")
        for key in ("states", "next_states", "actions", "rewards", "terminal", "next_mask"):
            getattr(self, key)[:n] = d[key]
        self.size = n
        self.head = n % self.capacity


@dataclass
class AgentParams:
    spec: DqnSpec
    primary: ParamStore
    target: ParamStore
    learn_count: int = 0

    @classmethod
    def create(cls, spec: DqnSpec, scale, rng: np.random.Generator) -> "AgentParams":
        primary = init_store(spec, scale, rng)
        target = primary.copy()
        return cls(spec, primary, target)


def td_targets(agent: AgentParams, batch: Batch, gamma: float) -> np.ndarray:
    with nn.no_grad():
        q_next = q_values_batch(batch.next_states, agent.target, agent.spec).data.astype(np.float64)
    best = np.where(batch.next_mask, q_next, -np.inf).max(axis=1)
    best = np.where(batch.terminal, 0.0, best)
    return batch.rewards + gamma * best


def learn_step(agent: AgentParams, batch: Batch, gamma: float, lr: float, max_grad_norm: float | None = None) -> float:
    """One SGD step on the mean squared TD error; returns the pre-step loss."""
    if len(batch) == 0:
        raise ContractError("learn_step on an empty batch")
    y = td_targets(agent, batch, gamma)
    agent.primary.zero_grad()
    q = q_values_batch(batch.states, agent.primary, agent.spec)
    loss = nn.mse_loss(nn.gather_rows(q, batch.actions), y)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError(f"non-finite DQN loss at learn step {agent.learn_count}")
    loss.backward()
    nn.sgd_step(agent.primary, lr, max_grad_norm)
    agent.learn_count += 1
    if agent.learn_count % agent.spec.target_sync == 0:
        nn.sync_copy(agent.primary, agent.target)
    return value
