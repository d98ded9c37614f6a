"""Tabular Q-learning over quantized barring actions, plus the shared utility.

Actions are vectors of per-class barring factors drawn from the grid
{i/X1 : 1 <= i <= X1}; states pair the previous quantized action with the
previous quantized detection accuracy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, replace

import numpy as np

from .env import ClassConfig


@dataclass(frozen=True)
class RlConfig:
    x1: int = 5
    x2: int = 5
    learning_rate: float = 0.98
    discount: float = 0.3
    epsilon_initial: float = 0.9
    epsilon_final: float = 0.1
    epsilon_decay_slots: int = 1000
    # optional linear decay of the learning rate (stochastic-approximation
    # style averaging); None keeps the rate constant
    learning_rate_final: float | None = None
    learning_rate_decay_slots: int = 1

    def __post_init__(self):
        if self.x1 < 2 or self.x2 < 1:
            raise ValueError("x1 must be >= 2 and x2 >= 1")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.learning_rate_final is not None and not (
            0.0 < self.learning_rate_final <= self.learning_rate
        ):
            raise ValueError(
                "learning_rate_final must lie in (0, learning_rate]"
            )
        if self.learning_rate_decay_slots < 1:
            raise ValueError("learning_rate_decay_slots must be >= 1")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        if self.epsilon_final > self.epsilon_initial:
            raise ValueError("epsilon_final must not exceed epsilon_initial")
        if self.epsilon_decay_slots < 1:
            raise ValueError("epsilon_decay_slots must be >= 1")


@dataclass(frozen=True)
class DiscreteState:
    """Grid indices of the previous action (1..X1 each) and accuracy bin."""

    quantized_action: tuple
    quantized_accuracy: int


@dataclass(frozen=True)
class UtilityParams:
    rho1: float = 0.0
    rho2: float = 0.0

    def __post_init__(self):
        if self.rho1 < 0 or self.rho2 < 0:
            raise ValueError("penalty weights must be non-negative")


def utility(
    accuracy: float, p: np.ndarray, classes, params: UtilityParams
) -> float:
    """Priority-weighted permitted count scaled by accuracy, minus the
    action-variance and detection-error penalties."""
    p = np.asarray(p, dtype=float)
    scores = np.array([c.priority_score for c in classes])
    sizes = np.array([c.n_members for c in classes], dtype=float)
    gain = accuracy * float(np.sum(p * scores * sizes))
    variance = float(np.mean((p - p.mean()) ** 2))
    return gain - params.rho1 * variance - params.rho2 * (1.0 - accuracy)


def n_actions(cfg: RlConfig, n_classes: int) -> int:
    return cfg.x1**n_classes


def n_states(cfg: RlConfig, n_classes: int) -> int:
    return cfg.x1**n_classes * cfg.x2


def action_factors(index: int, cfg: RlConfig, n_classes: int) -> np.ndarray:
    """Decode an action index into per-class barring factors on the grid."""
    digits = np.empty(n_classes, dtype=np.int64)
    for l in range(n_classes):
        digits[l] = index % cfg.x1
        index //= cfg.x1
    return (digits + 1) / cfg.x1


def factors_to_action(p: np.ndarray, cfg: RlConfig) -> int:
    """Encode barring factors as an action index, snapping to the grid."""
    p = np.asarray(p, dtype=float)
    digits = np.clip(np.rint(p * cfg.x1).astype(np.int64), 1, cfg.x1) - 1
    index = 0
    for d in digits[::-1]:
        index = index * cfg.x1 + int(d)
    return index


def quantize_accuracy(accuracy: float, cfg: RlConfig) -> int:
    """Uniform bins [j/X2, (j+1)/X2), with 1.0 falling in the top bin."""
    if not 0.0 <= accuracy <= 1.0:
        raise ValueError("accuracy must lie in [0, 1]")
    return min(int(accuracy * cfg.x2), cfg.x2 - 1)


def quantize_state(p: np.ndarray, accuracy: float, cfg: RlConfig) -> DiscreteState:
    p = np.asarray(p, dtype=float)
    indices = tuple(int(i) for i in np.clip(np.rint(p * cfg.x1), 1, cfg.x1))
    return DiscreteState(indices, quantize_accuracy(accuracy, cfg))


def state_index(s: DiscreteState, cfg: RlConfig) -> int:
    index = 0
    for i in s.quantized_action[::-1]:
        index = index * cfg.x1 + (int(i) - 1)
    return index * cfg.x2 + s.quantized_accuracy


@dataclass
class QTable:
    """Zero-initialized table of state-action values."""

    values: np.ndarray

    @classmethod
    def zeros(cls, cfg: RlConfig, n_classes: int) -> "QTable":
        return cls(np.zeros((n_states(cfg, n_classes), n_actions(cfg, n_classes))))


def select_action(
    q: QTable, s: DiscreteState, epsilon: float, cfg: RlConfig,
    rng: np.random.Generator,
) -> int:
    """Epsilon-greedy: the argmax action with probability 1 - epsilon (ties
    broken uniformly), otherwise a uniformly random action."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    row = q.values[state_index(s, cfg)]
    if rng.random() < epsilon:
        return int(rng.integers(row.size))
    best = np.flatnonzero(row == row.max())
    return int(best[rng.integers(best.size)])


def update_q(
    q: QTable, s: DiscreteState, action: int, u: float, s_next: DiscreteState,
    cfg: RlConfig,
) -> None:
    """Bellman update with a single learning-rate coefficient."""
    si = state_index(s, cfg)
    target = u + cfg.discount * q.values[state_index(s_next, cfg)].max()
    q.values[si, action] = (
        (1.0 - cfg.learning_rate) * q.values[si, action]
        + cfg.learning_rate * target
    )


def epsilon_at(slot: int, cfg: RlConfig) -> float:
    """Linear decay from the initial to the final exploration rate."""
    frac = min(max(slot, 0) / cfg.epsilon_decay_slots, 1.0)
    return cfg.epsilon_initial + frac * (cfg.epsilon_final - cfg.epsilon_initial)


def learning_rate_at(slot: int, cfg: RlConfig) -> float:
    """Linear decay of the learning rate, or the constant configured rate."""
    if cfg.learning_rate_final is None:
        return cfg.learning_rate
    frac = min(max(slot, 0) / cfg.learning_rate_decay_slots, 1.0)
    return cfg.learning_rate + frac * (
        cfg.learning_rate_final - cfg.learning_rate
    )


class QLearningAgent:
    """Owns a Q-table and the slot-indexed exploration schedule."""

    def __init__(self, cfg: RlConfig, n_classes: int):
        self.cfg = cfg
        self.n_classes = n_classes
        self.table = QTable.zeros(cfg, n_classes)
        self.slot = 0

    def act(self, state: DiscreteState, rng: np.random.Generator) -> int:
        return select_action(
            self.table, state, epsilon_at(self.slot, self.cfg), self.cfg, rng
        )

    def factors(self, action: int) -> np.ndarray:
        return action_factors(action, self.cfg, self.n_classes)

    def learn(
        self, state: DiscreteState, action: int, u: float, next_state: DiscreteState
    ) -> None:
        cfg = self.cfg
        lr = learning_rate_at(self.slot, cfg)
        if lr != cfg.learning_rate:
            cfg = replace(cfg, learning_rate=lr, learning_rate_final=None)
        update_q(self.table, state, action, u, next_state, cfg)
        self.slot += 1

    def greedy_action(self, state: DiscreteState) -> int:
        return int(np.argmax(self.table.values[state_index(state, self.cfg)]))

    def to_json(self) -> str:
        return json.dumps(
            {
                "config": asdict(self.cfg),
                "n_classes": self.n_classes,
                "slot": self.slot,
                "values": self.table.values.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "QLearningAgent":
        blob = json.loads(text)
        agent = cls(RlConfig(**blob["config"]), blob["n_classes"])
        values = np.asarray(blob["values"], dtype=float)
        if values.shape != agent.table.values.shape:
            raise ValueError("serialized table shape does not match config")
        agent.table.values = values
        agent.slot = blob["slot"]
        return agent
