"""Twin-delayed deterministic actor-critic controller for the barring factors.

Six networks (actor, twin critics, and their targets) share one architecture:
a convolutional branch over a 2-D map of per-user channel energies, whose
features are concatenated with the previous action/accuracy (and, for the
critics, the action under evaluation) before two fully connected layers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .env import ChannelTensor
from .nn import (
    Activation,
    Conv2D,
    Dense,
    Flatten,
    Nadam,
    Network,
    soft_update,
)


@dataclass(frozen=True)
class Td3Config:
    gamma: float = 0.3
    delta: float = 0.05
    policy_delay: int = 4
    explore_sigma: float = 0.15
    # optional linear decay of the exploration noise over recorded
    # transitions, mirroring the tabular agent's epsilon schedule
    explore_sigma_final: float | None = None
    explore_sigma_decay_slots: int = 1
    smooth_sigma: float = 0.25
    clip_g: float = 0.4
    batch_size: int = 128
    buffer_capacity: int = 1000
    actor_lr: float = 5e-5
    critic_lr: float = 1e-5
    # noise magnitudes above are standard deviations; flip to treat them as
    # variances instead
    noise_is_variance: bool = False
    hidden: int = 64
    conv_channels: int = 4
    conv_kernel: int = 3
    conv_stride: int = 1

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 < self.delta <= 1.0:
            raise ValueError("delta must lie in (0, 1]")
        if self.clip_g <= 0:
            raise ValueError("clip_g must be positive")
        if self.policy_delay < 1:
            raise ValueError("policy_delay must be >= 1")
        if self.batch_size > self.buffer_capacity:
            raise ValueError("batch_size must not exceed buffer_capacity")
        if self.explore_sigma_final is not None:
            if self.explore_sigma_final > self.explore_sigma:
                raise ValueError("explore_sigma_final must not exceed explore_sigma")
            if self.explore_sigma_decay_slots < 1:
                raise ValueError("explore_sigma_decay_slots must be >= 1")

    def noise_std(self, value: float) -> float:
        return float(np.sqrt(value)) if self.noise_is_variance else float(value)

    def explore_sigma_at(self, slot: int) -> float:
        if self.explore_sigma_final is None:
            return self.explore_sigma
        frac = min(max(slot, 0) / self.explore_sigma_decay_slots, 1.0)
        return self.explore_sigma + frac * (
            self.explore_sigma_final - self.explore_sigma
        )


class ReplayBuffer:
    """Fixed-capacity ring: insertion beyond capacity evicts the oldest."""

    def __init__(self, capacity: int, state_len: int, action_len: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.states = np.zeros((capacity, state_len))
        self.actions = np.zeros((capacity, action_len))
        self.utilities = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_len))
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, state, action, utility, next_state) -> None:
        i = self._next
        self.states[i] = state
        self.actions[i] = action
        self.utilities[i] = utility
        self.next_states[i] = next_state
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def ordered(self):
        """Contents oldest-first (for inspection and tests)."""
        if self._size < self.capacity:
            idx = np.arange(self._size)
        else:
            idx = (np.arange(self.capacity) + self._next) % self.capacity
        return (
            self.states[idx],
            self.actions[idx],
            self.utilities[idx],
            self.next_states[idx],
        )

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.integers(self._size, size=batch_size)
        return (
            self.states[idx],
            self.actions[idx],
            self.utilities[idx],
            self.next_states[idx],
        )


class StateCodec:
    """Packs (prev action, prev accuracy, per-user channel energies) into a
    flat vector and splits batches into the conv-map and trunk-extra inputs."""

    def __init__(self, n_users: int, n_classes: int):
        self.n_users = n_users
        self.n_classes = n_classes
        self.side = int(np.ceil(np.sqrt(n_users)))
        self.extra_len = n_classes + 1
        self.state_len = self.extra_len + n_users

    def encode(self, p, accuracy: float, channel_feats) -> np.ndarray:
        return np.concatenate(
            [np.asarray(p, float), [float(accuracy)], np.asarray(channel_feats, float)]
        )

    def split(self, states: np.ndarray):
        states = np.atleast_2d(states)
        extra = states[:, : self.extra_len]
        feats = states[:, self.extra_len :]
        grid = np.zeros((states.shape[0], 1, self.side, self.side))
        grid.reshape(states.shape[0], -1)[:, : self.n_users] = feats
        return grid, extra


def channel_features(ch: ChannelTensor) -> np.ndarray:
    """Per-user mean channel energy across subcarriers and antennas."""
    return np.mean(np.abs(ch.h) ** 2, axis=(0, 1))


class SplitNet:
    """Conv branch on the channel map + dense trunk on (features, extras)."""

    def __init__(self, conv_net: Network, trunk_net: Network, feature_len: int):
        self.conv_net = conv_net
        self.trunk_net = trunk_net
        self.feature_len = feature_len

    def parameters(self):
        return self.conv_net.parameters() + self.trunk_net.parameters()

    def forward(self, grid, extra):
        feats, conv_caches = self.conv_net.forward(grid)
        trunk_in = np.concatenate([feats, extra], axis=1)
        out, trunk_caches = self.trunk_net.forward(trunk_in)
        return out, (conv_caches, trunk_caches)

    def backward(self, dout, caches):
        conv_caches, trunk_caches = caches
        dtrunk_in, trunk_grads = self.trunk_net.backward(dout, trunk_caches)
        dfeats = dtrunk_in[:, : self.feature_len]
        dextra = dtrunk_in[:, self.feature_len :]
        dgrid, conv_grads = self.conv_net.backward(dfeats, conv_caches)
        return dgrid, dextra, conv_grads + trunk_grads

    def copy(self):
        return SplitNet(self.conv_net.copy(), self.trunk_net.copy(), self.feature_len)


def _build_net(
    codec: StateCodec,
    cfg: Td3Config,
    extra_len: int,
    out_dim: int,
    out_activation: str,
    rng: np.random.Generator,
    final_scale=None,
) -> SplitNet:
    conv = Conv2D(
        1, cfg.conv_channels, cfg.conv_kernel, cfg.conv_stride, codec.side, rng
    )
    feature_len = cfg.conv_channels * conv.out_width**2
    conv_net = Network([conv, Activation("relu"), Flatten()])
    trunk_net = Network(
        [
            Dense(feature_len + extra_len, cfg.hidden, rng),
            Activation("relu"),
            Dense(cfg.hidden, out_dim, rng, init_scale=final_scale),
            Activation(out_activation),
        ]
    )
    return SplitNet(conv_net, trunk_net, feature_len)


def build_actor(codec: StateCodec, cfg: Td3Config, rng) -> SplitNet:
    # small final layer keeps initial actions near mid-range after squashing
    return _build_net(
        codec, cfg, codec.extra_len, codec.n_classes, "sigmoid", rng, final_scale=1e-3
    )


def build_critic(codec: StateCodec, cfg: Td3Config, rng) -> SplitNet:
    return _build_net(
        codec, cfg, codec.extra_len + codec.n_classes, 1, "identity", rng
    )


def policy_action(
    actor: SplitNet,
    codec: StateCodec,
    state: np.ndarray,
    sigma: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Actor output plus zero-mean Gaussian exploration noise, clamped to [0,1]."""
    grid, extra = codec.split(state)
    out, _ = actor.forward(grid, extra)
    action = out[0]
    if sigma > 0:
        action = action + rng.normal(0.0, sigma, size=action.shape)
    return np.clip(action, 0.0, 1.0)


def target_action(
    target_actor: SplitNet,
    codec: StateCodec,
    next_states: np.ndarray,
    cfg: Td3Config,
    rng: np.random.Generator,
) -> np.ndarray:
    """Smoothed reference actions: target-actor output plus clipped noise."""
    grid, extra = codec.split(next_states)
    out, _ = target_actor.forward(grid, extra)
    std = cfg.noise_std(cfg.smooth_sigma)
    noise = np.clip(
        rng.normal(0.0, std, size=out.shape) if std > 0 else np.zeros_like(out),
        -cfg.clip_g,
        cfg.clip_g,
    )
    return np.clip(out + noise, 0.0, 1.0)


def target_q(
    critic1_t: SplitNet,
    critic2_t: SplitNet,
    codec: StateCodec,
    next_states: np.ndarray,
    p_tilde: np.ndarray,
    utilities: np.ndarray,
    gamma: float,
) -> np.ndarray:
    """Reference values: utility plus the discounted minimum of the twin
    target critics at the smoothed action."""
    grid, extra = codec.split(next_states)
    extra_a = np.concatenate([extra, p_tilde], axis=1)
    q1, _ = critic1_t.forward(grid, extra_a)
    q2, _ = critic2_t.forward(grid, extra_a)
    return utilities + gamma * np.minimum(q1[:, 0], q2[:, 0])


class Td3Agent:
    """Owns the six networks, their optimizers, the replay buffer, and the
    critic/actor update cadence."""

    def __init__(
        self,
        n_users: int,
        n_classes: int,
        cfg: Td3Config,
        rng: np.random.Generator,
        utility_scale: float = 1.0,
    ):
        self.cfg = cfg
        self.codec = StateCodec(n_users, n_classes)
        self.utility_scale = float(utility_scale)
        self.actor = build_actor(self.codec, cfg, rng)
        self.critic1 = build_critic(self.codec, cfg, rng)
        self.critic2 = build_critic(self.codec, cfg, rng)
        self.target_actor = self.actor.copy()
        self.target_critic1 = self.critic1.copy()
        self.target_critic2 = self.critic2.copy()
        self.actor_opt = Nadam(self.actor.parameters(), cfg.actor_lr)
        self.critic1_opt = Nadam(self.critic1.parameters(), cfg.critic_lr)
        self.critic2_opt = Nadam(self.critic2.parameters(), cfg.critic_lr)
        self.buffer = ReplayBuffer(
            cfg.buffer_capacity, self.codec.state_len, n_classes
        )
        self.n_critic_updates = 0
        self.n_actor_updates = 0
        self.n_recorded = 0

    def act(self, state: np.ndarray, rng: np.random.Generator, explore=True):
        sigma = (
            self.cfg.noise_std(self.cfg.explore_sigma_at(self.n_recorded))
            if explore
            else 0.0
        )
        return policy_action(self.actor, self.codec, state, sigma, rng)

    def record(self, state, action, utility, next_state) -> None:
        self.buffer.add(state, action, utility, next_state)
        self.n_recorded += 1

    def train_step(self, rng: np.random.Generator) -> bool:
        """One learning iteration; no-op until the buffer holds a full batch."""
        cfg = self.cfg
        if len(self.buffer) < cfg.batch_size:
            return False
        states, actions, utilities, next_states = self.buffer.sample(
            cfg.batch_size, rng
        )
        utilities = utilities / self.utility_scale

        p_tilde = target_action(self.target_actor, self.codec, next_states, cfg, rng)
        targets = target_q(
            self.target_critic1,
            self.target_critic2,
            self.codec,
            next_states,
            p_tilde,
            utilities,
            cfg.gamma,
        )

        grid, extra = self.codec.split(states)
        extra_a = np.concatenate([extra, actions], axis=1)
        for critic, opt in (
            (self.critic1, self.critic1_opt),
            (self.critic2, self.critic2_opt),
        ):
            q, caches = critic.forward(grid, extra_a)
            err = q[:, 0] - targets
            dout = (2.0 / cfg.batch_size) * err[:, np.newaxis]
            _, _, grads = critic.backward(dout, caches)
            opt.step(critic.parameters(), grads)
        self.n_critic_updates += 1

        if self.n_critic_updates % cfg.policy_delay == 0:
            self._actor_update(grid, extra)
            for target, current in (
                (self.target_actor, self.actor),
                (self.target_critic1, self.critic1),
                (self.target_critic2, self.critic2),
            ):
                soft_update(target.parameters(), current.parameters(), cfg.delta)
            self.n_actor_updates += 1
        return True

    def _actor_update(self, grid, extra) -> None:
        """Deterministic policy-gradient ascent on mean Q1(s, pi(s))."""
        actions, actor_caches = self.actor.forward(grid, extra)
        extra_a = np.concatenate([extra, actions], axis=1)
        _, critic_caches = self.critic1.forward(grid, extra_a)
        batch = grid.shape[0]
        dq = np.full((batch, 1), -1.0 / batch)
        _, dextra, _ = self.critic1.backward(dq, critic_caches)
        daction = dextra[:, self.codec.extra_len :]
        _, _, actor_grads = self.actor.backward(daction, actor_caches)
        self.actor_opt.step(self.actor.parameters(), actor_grads)

    def fingerprint(self) -> str:
        return json.dumps(asdict(self.cfg), sort_keys=True)

    def save(self, path) -> None:
        """Checkpoint all six networks, optimizer state, and the config."""
        arrays = {"config": np.frombuffer(self.fingerprint().encode(), dtype=np.uint8)}
        nets = self._named_nets()
        for name, net in nets.items():
            for i, p in enumerate(net.parameters()):
                arrays[f"{name}.{i}"] = p
        for name, opt in self._named_opts().items():
            for i, (m, v) in enumerate(zip(opt.first_moment, opt.second_moment)):
                arrays[f"{name}.m{i}"] = m
                arrays[f"{name}.v{i}"] = v
            arrays[f"{name}.t"] = np.array(opt.step_count)
        arrays["counters"] = np.array(
            [self.n_critic_updates, self.n_actor_updates, self.n_recorded]
        )
        np.savez(path, **arrays)

    def load(self, path) -> None:
        with np.load(path) as blob:
            stored = bytes(blob["config"]).decode()
            if stored != self.fingerprint():
                raise ValueError("checkpoint config fingerprint does not match")
            for name, net in self._named_nets().items():
                for i, p in enumerate(net.parameters()):
                    p[...] = blob[f"{name}.{i}"]
            for name, opt in self._named_opts().items():
                for i in range(len(opt.first_moment)):
                    opt.first_moment[i][...] = blob[f"{name}.m{i}"]
                    opt.second_moment[i][...] = blob[f"{name}.v{i}"]
                opt.step_count = int(blob[f"{name}.t"])
            self.n_critic_updates, self.n_actor_updates, self.n_recorded = (
                int(x) for x in blob["counters"]
            )

    def _named_nets(self):
        return {
            "actor": self.actor,
            "critic1": self.critic1,
            "critic2": self.critic2,
            "target_actor": self.target_actor,
            "target_critic1": self.target_critic1,
            "target_critic2": self.target_critic2,
        }

    def _named_opts(self):
        return {
            "actor_opt": self.actor_opt,
            "critic1_opt": self.critic1_opt,
            "critic2_opt": self.critic2_opt,
        }
