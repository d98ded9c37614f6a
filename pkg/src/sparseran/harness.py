"""Experiment orchestration: scenario configs, the closed control loop for
fixed / tabular / actor-critic agents, baseline sweeps, metric aggregation,
and CSV/JSON emission.
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict, field, replace
from pathlib import Path

import numpy as np

from . import env, rl, saud, td3

STEADY_STATE_FRACTION = 0.25
FLOAT_FORMAT = "%.10g"


def mmtc_utility() -> rl.UtilityParams:
    """Access-quantity regime: variance penalty only."""
    return rl.UtilityParams(rho1=120.0, rho2=0.0)


def urllc_utility() -> rl.UtilityParams:
    """Reliability regime: detection-error penalty switched on."""
    return rl.UtilityParams(rho1=120.0, rho2=100.0)


def desk_network(priorities=(1.0, 1.0)) -> env.NetworkConfig:
    """Desk-scale network used by the bundled experiments: 64 users in two
    bursty classes, 32 antennas, 16 subcarriers.

    Each class trickles arrivals when quiet and saturates its population
    during Markov-modulated bursts, so the load the barring controller faces
    alternates between near-idle, one saturated class, and both saturated.
    Burst phases dwell for ~100-150 slots, long enough for an adaptive
    controller to settle into the per-phase optimum; a small abandonment
    probability bounds the retry backlog so sustained overload cannot
    snowball into a congestion collapse no policy can escape.
    """
    classes = tuple(
        env.ClassConfig(
            n_members=32,
            priority_score=float(r),
            activation_prob=0.02,
            burst_activation_prob=0.5,
            burst_start_prob=1.0 / 150.0,
            burst_stop_prob=1.0 / 100.0,
        )
        for r in priorities
    )
    return env.NetworkConfig(
        n_users=64,
        n_antennas=32,
        n_subcarriers=16,
        classes=classes,
        backoff_window=2,
        abandonment_prob=0.15,
    )


def desk_recovery() -> saud.RecoveryConfig:
    """Recovery settings matched to the desk network (larger greedy steps
    keep the per-slot cost down at 16 subcarriers)."""
    return saud.recovery_for(
        32, env.DEFAULT_NOISE_VARIANCE, step_size=3, max_stages=6
    )


def desk_q_agent(horizon_slots: int = 30000) -> dict:
    """Tabular-agent settings for the desk scale: a long exploration
    schedule paired with a decaying learning rate, so the table averages out
    phase-mix noise instead of chasing it. The schedules scale with the
    intended run length (exploration ends ~73% in, the learning rate bottoms
    out ~83% in) so the trailing quarter of any horizon is near-greedy."""
    return {
        "kind": "q",
        "x1": 5,
        "x2": 8,
        "learning_rate": 0.5,
        "learning_rate_final": 0.03,
        "learning_rate_decay_slots": int(horizon_slots * 25 / 30),
        "epsilon_initial": 0.9,
        "epsilon_final": 0.02,
        "epsilon_decay_slots": int(horizon_slots * 22 / 30),
    }


def desk_td3_agent() -> dict:
    """Actor-critic settings for the desk scale: learning rates raised and
    batch reduced relative to the large-network defaults so training moves
    within a couple thousand slots, and exploration noise decayed to a small
    floor so late-run actions are close to the deterministic policy (the
    floor keeps the replay buffer informative; decaying to ~0 makes the
    actor drift once the critic loses local landscape coverage)."""
    return {
        "kind": "td3",
        "batch_size": 64,
        "buffer_capacity": 1000,
        "actor_lr": 3e-4,
        "critic_lr": 1e-3,
        "hidden": 48,
        "policy_delay": 4,
        "explore_sigma": 0.15,
        "explore_sigma_final": 0.05,
        "explore_sigma_decay_slots": 5000,
    }


def desk_scenario(
    agent: dict,
    name: str = "desk",
    utility: rl.UtilityParams | None = None,
    priorities=(1.0, 1.0),
    seed: int = 0,
    slots_per_episode: int = 1200,
    warmup_slots: int = 0,
) -> Scenario:
    """Assemble a desk-scale scenario around the given agent spec."""
    return Scenario(
        name=name,
        network=desk_network(priorities),
        utility=mmtc_utility() if utility is None else utility,
        agent=agent,
        recovery=desk_recovery(),
        episodes=1,
        slots_per_episode=slots_per_episode,
        warmup_slots=warmup_slots,
        seed=seed,
    )


@dataclass(frozen=True)
class Scenario:
    """One reproducible experiment: network, utility, agent, and horizon."""

    name: str
    network: env.NetworkConfig
    utility: rl.UtilityParams
    agent: dict
    recovery: saud.RecoveryConfig = field(default_factory=saud.RecoveryConfig)
    episodes: int = 1
    slots_per_episode: int = 500
    warmup_slots: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.episodes < 0 or self.slots_per_episode < 0:
            raise ValueError("episodes and slots_per_episode must be non-negative")
        kind = self.agent.get("kind")
        if kind not in ("fixed", "q", "td3"):
            raise ValueError(f"unknown agent kind {kind!r}")
        if kind == "fixed":
            p = np.asarray(self.agent["p"], dtype=float)
            if p.shape != (self.network.n_classes,):
                raise ValueError("fixed agent needs one factor per class")
            if np.any(p < 0) or np.any(p > 1):
                raise ValueError("fixed factors must lie in [0, 1]")

    def to_dict(self) -> dict:
        blob = asdict(self)
        blob["network"]["classes"] = [asdict(c) for c in self.network.classes]
        return blob

    def fingerprint(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()


def scenario_from_dict(blob: dict) -> Scenario:
    net = dict(blob["network"])
    net["classes"] = tuple(env.ClassConfig(**c) for c in net["classes"])
    network = env.NetworkConfig(**net)
    if "recovery" in blob:
        recovery = saud.RecoveryConfig(**blob["recovery"])
    else:
        recovery = saud.recovery_for(network.n_antennas, network.noise_variance)
    return Scenario(
        name=blob["name"],
        network=network,
        utility=rl.UtilityParams(**blob["utility"]),
        agent=dict(blob["agent"]),
        recovery=recovery,
        episodes=blob.get("episodes", 1),
        slots_per_episode=blob.get("slots_per_episode", 500),
        warmup_slots=blob.get("warmup_slots", 0),
        seed=blob.get("seed", 0),
    )


def load_scenario(path) -> Scenario:
    with open(path) as handle:
        return scenario_from_dict(json.load(handle))


@dataclass
class MetricSeries:
    """Per-slot records plus run metadata; one record per simulated slot."""

    records: list
    metadata: dict

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=float)

    def steady_state(self, name: str, fraction: float = STEADY_STATE_FRACTION):
        values = self.column(name)
        if values.size == 0:
            return values
        start = values.size - max(1, int(np.ceil(fraction * values.size)))
        return values[start:]

    def steady_state_mean(
        self, name: str, fraction: float = STEADY_STATE_FRACTION
    ) -> float:
        return float(np.mean(self.steady_state(name, fraction)))


def _columns(n_classes: int):
    return ["slot", "utility", "n_permitted", "n_valid", "accuracy"] + [
        f"access_ratio_class_{l + 1}" for l in range(n_classes)
    ]


class _FixedPolicy:
    def __init__(self, p):
        self.p = np.asarray(p, dtype=float)
        self.greedy = False

    def act(self, context, rng):
        return self.p

    def learn(self, context, p, outcome, utility_value):
        pass


class _QPolicy:
    def __init__(self, cfg: rl.RlConfig, n_classes: int):
        self.agent = rl.QLearningAgent(cfg, n_classes)
        self.greedy = False
        self._state = None
        self._action = None

    def act(self, context, rng):
        self._state = rl.quantize_state(
            context["prev_p"], context["prev_accuracy"], self.agent.cfg
        )
        if self.greedy:
            self._action = rl.select_action(
                self.agent.table, self._state, 0.0, self.agent.cfg, rng
            )
        else:
            self._action = self.agent.act(self._state, rng)
        return self.agent.factors(self._action)

    def learn(self, context, p, outcome, utility_value):
        next_state = rl.quantize_state(p, outcome.accuracy, self.agent.cfg)
        self.agent.learn(self._state, self._action, utility_value, next_state)


class _Td3Policy:
    def __init__(
        self, cfg: td3.Td3Config, network: env.NetworkConfig, warmup_slots: int,
        rng: np.random.Generator,
    ):
        scale = float(
            sum(c.priority_score * c.n_members for c in network.classes)
        )
        self.agent = td3.Td3Agent(
            network.n_users, network.n_classes, cfg, rng, utility_scale=scale
        )
        self.warmup_slots = warmup_slots
        self.greedy = False
        self.slot = 0
        self._state = None

    def act(self, context, rng):
        self._state = self.agent.codec.encode(
            context["prev_p"], context["prev_accuracy"], context["prev_feats"]
        )
        if self.greedy:
            return self.agent.act(self._state, rng, explore=False)
        if self.slot < self.warmup_slots:
            return rng.random(self.agent.codec.n_classes)
        return self.agent.act(self._state, rng)

    def learn(self, context, p, outcome, utility_value):
        next_state = self.agent.codec.encode(
            p, outcome.accuracy, context["feats"]
        )
        self.agent.record(self._state, p, utility_value, next_state)
        self.agent.train_step(context["rng"])
        self.slot += 1


def _build_policy(scenario: Scenario, rng: np.random.Generator):
    spec = dict(scenario.agent)
    kind = spec.pop("kind")
    if kind == "fixed":
        return _FixedPolicy(spec["p"])
    if kind == "q":
        return _QPolicy(rl.RlConfig(**spec), scenario.network.n_classes)
    return _Td3Policy(
        td3.Td3Config(**spec), scenario.network, scenario.warmup_slots, rng
    )


def run(scenario: Scenario, policy=None, train: bool = True) -> MetricSeries:
    """Execute the closed loop: act, gate, detect, handshake, score, learn.

    Deterministic given the scenario (all randomness flows from its seed).

    Passing the ``policy`` of a previous run reuses that trained agent
    instead of building a fresh one; with ``train=False`` the loop evaluates
    it frozen and greedy (no exploration noise, no learning updates), which
    is how a trained controller is scored on held-out seeds.
    """
    net = scenario.network
    root = np.random.SeedSequence(scenario.seed)
    env_rng, phase_rng, agent_rng = (np.random.default_rng(s) for s in root.spawn(3))
    if policy is None:
        policy = _build_policy(scenario, agent_rng)
    policy.greedy = not train

    class_map = net.class_of_user()
    class_sizes = net.class_sizes()
    records = []
    prev_p = np.full(net.n_classes, 0.5)
    prev_accuracy = 0.0
    prev_feats = np.zeros(net.n_users)
    slot = 0
    for _ in range(scenario.episodes):
        traffic = env.TrafficState(net)
        for _ in range(scenario.slots_per_episode):
            channel = env.generate_channel(net, env_rng)
            feats = td3.channel_features(channel)
            active = traffic.step_activity(env_rng, phase_rng)
            context = {
                "prev_p": prev_p,
                "prev_accuracy": prev_accuracy,
                "prev_feats": prev_feats,
                "feats": feats,
                "rng": agent_rng,
            }
            p = np.clip(np.asarray(policy.act(context, agent_rng), float), 0.0, 1.0)
            passed = env.acb_check(active, p, net, env_rng)
            measurement = env.synthesize_measurement(channel, passed, net, env_rng)
            estimate = saud.recover_activity(channel, measurement, scenario.recovery)
            detected = np.flatnonzero(estimate.indicator)
            outcome = env.handshake(detected, passed, p, net)
            traffic.complete_slot(
                active, passed, outcome.detected & outcome.passed, env_rng
            )
            utility_value = rl.utility(
                outcome.accuracy, p, net.classes, scenario.utility
            )
            if train:
                policy.learn(context, p, outcome, utility_value)

            passed_per_class = np.bincount(
                class_map[np.asarray(passed, bool)], minlength=net.n_classes
            )
            record = {
                "slot": slot,
                "utility": utility_value,
                "n_permitted": outcome.n_permitted,
                "n_valid": outcome.n_valid,
                "accuracy": outcome.accuracy,
            }
            for l in range(net.n_classes):
                record[f"access_ratio_class_{l + 1}"] = (
                    passed_per_class[l] / class_sizes[l]
                )
            records.append(record)
            prev_p = p
            prev_accuracy = outcome.accuracy
            prev_feats = feats
            slot += 1

    metadata = {
        "scenario": scenario.to_dict(),
        "fingerprint": scenario.fingerprint(),
        "n_records": len(records),
        "train": bool(train),
    }
    series = MetricSeries(records=records, metadata=metadata)
    series.policy = policy
    return series


def derived_seed(master_seed: int, index: int) -> int:
    """Documented splitting rule for independent sub-runs: child streams of
    SeedSequence((master_seed, index))."""
    return int(np.random.SeedSequence((master_seed, index)).generate_state(1)[0])


def _sweep_worker(scenario: Scenario) -> float:
    return run(scenario).steady_state_mean("utility")


def sweep_fixed_baseline(scenario: Scenario, grid, max_workers: int = 1):
    """Run every fixed barring vector in the grid and return the strongest
    (vector, steady-state mean utility) pair."""
    grid = [np.asarray(p, dtype=float) for p in grid]
    if not grid:
        raise ValueError("grid must be nonempty")
    runs = [
        replace(
            scenario,
            name=f"{scenario.name}-fixed-{i}",
            agent={"kind": "fixed", "p": list(map(float, p))},
            warmup_slots=0,
            seed=derived_seed(scenario.seed, i),
        )
        for i, p in enumerate(grid)
    ]
    if max_workers > 1:
        with ProcessPoolExecutor(max_workers=max_workers) as pool:
            utilities = list(pool.map(_sweep_worker, runs))
    else:
        utilities = [_sweep_worker(r) for r in runs]
    best = int(np.argmax(utilities))
    return grid[best], float(utilities[best])


def emit(series: MetricSeries, fmt: str, path) -> None:
    """Write the series with a schema-stable layout; JSON carries the full
    config fingerprint."""
    path = Path(path)
    n_classes = len(series.metadata["scenario"]["network"]["classes"])
    columns = _columns(n_classes)
    try:
        if fmt == "csv":
            with open(path, "w", newline="") as handle:
                writer = csv.writer(handle)
                writer.writerow(columns)
                for record in series.records:
                    writer.writerow(
                        [record["slot"]]
                        + [FLOAT_FORMAT % record[c] for c in columns[1:]]
                    )
        elif fmt == "json":
            with open(path, "w") as handle:
                json.dump(
                    {"metadata": series.metadata, "records": series.records},
                    handle,
                    indent=1,
                )
        else:
            raise ValueError(f"unknown format {fmt!r}")
    except OSError as err:
        raise OSError(f"failed writing {path}: {err}") from err


def load_series(path) -> MetricSeries:
    with open(path) as handle:
        blob = json.load(handle)
    return MetricSeries(records=blob["records"], metadata=blob["metadata"])


def bootstrap_ci(
    values: np.ndarray, n_resamples: int = 1000, seed: int = 0, level: float = 0.95
):
    """Seeded percentile bootstrap interval for the mean."""
    values = np.asarray(values, dtype=float)
    rng = np.random.default_rng(seed)
    idx = rng.integers(values.size, size=(n_resamples, values.size))
    means = values[idx].mean(axis=1)
    tail = (1.0 - level) / 2.0
    return (
        float(np.quantile(means, tail)),
        float(np.quantile(means, 1.0 - tail)),
    )


def compare(series_list, n_resamples: int = 1000, seed: int = 0):
    """Steady-state summary per series with bootstrap confidence intervals."""
    if len(series_list) < 2:
        raise ValueError("need at least two series to compare")
    rows = []
    for series in series_list:
        util = series.steady_state("utility")
        lo, hi = bootstrap_ci(util, n_resamples, seed)
        rows.append(
            {
                "name": series.metadata["scenario"]["name"],
                "fingerprint": series.metadata["fingerprint"],
                "mean_utility": float(util.mean()),
                "utility_ci": [lo, hi],
                "mean_accuracy": series.steady_state_mean("accuracy"),
                "mean_permitted": series.steady_state_mean("n_permitted"),
                "mean_valid": series.steady_state_mean("n_valid"),
            }
        )
    return rows
