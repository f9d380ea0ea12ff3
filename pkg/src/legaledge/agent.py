"""Per-client DQN agent: replay (uniform or prioritized), epsilon-greedy, target net."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .contract import ContractDesk, ContractError, compute_schedule
from .env import CENTI, FEATURE_DIM, ChargingEnv
from .nn import AdamState, ModelParams, adam_step, backward, forward, forward_cached, init_params

PRIORITY_EPS = 1e-6


class BufferTooSmall(RuntimeError):
    pass


class AgentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    gamma: float = Field(0.99, ge=0, lt=1)
    epsilon_start: float = Field(1.0, ge=0, le=1)
    epsilon_decay: float = Field(0.995, gt=0, le=1)
    epsilon_min: float = Field(0.05, ge=0, le=1)
    buffer_capacity: int = Field(10_000, ge=1)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(5e-4, gt=0)
    target_sync: int = Field(100, ge=1)
    per: bool = True
    per_alpha: float = Field(0.6, ge=0)
    per_beta: float = Field(0.4, ge=0)
    double_dqn: bool = True
    loss: str = Field("huber", pattern="^(huber|mse)$")
    hidden: tuple[int, ...] = (64, 64)
    updates_per_step: int = Field(1, ge=1)
    reward_scale: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def _check(self) -> "AgentConfig":
        if self.batch_size > self.buffer_capacity:
            raise ValueError("batch_size must not exceed buffer_capacity")
        if self.epsilon_min > self.epsilon_start:
            raise ValueError("epsilon_min must not exceed epsilon_start")
        return self


def episodes_to_floor(cfg: AgentConfig) -> int:
    """Number of per-episode decays until epsilon first reaches its floor."""
    if cfg.epsilon_start <= cfg.epsilon_min:
        return 0
    if cfg.epsilon_decay >= 1:
        return math.inf
    return math.ceil(math.log(cfg.epsilon_min / cfg.epsilon_start) / math.log(cfg.epsilon_decay))


class Batch(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray


class ReplayBuffer:
    """Ring buffer of transitions; the oldest entry is overwritten first."""

    def __init__(self, capacity: int, state_dim: int = FEATURE_DIM):
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.dones = np.zeros(capacity, dtype=bool)
        self.pos = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def push(self, state, action: int, reward: float, next_state, done: bool) -> int:
        if not (np.isfinite(state).all() and np.isfinite(next_state).all() and math.isfinite(reward)):
            raise ValueError("transition contains non-finite values")
        i = self.pos
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.dones[i] = done
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return i

    def get(self, idx: np.ndarray) -> Batch:
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx], self.dones[idx])

    def sample(self, batch_size: int, rng: np.random.Generator) -> tuple[np.ndarray, Batch, np.ndarray]:
        if self.size < batch_size:
            raise BufferTooSmall(f"{self.size} transitions < batch {batch_size}")
        idx = rng.integers(0, self.size, size=batch_size)
        return idx, self.get(idx), np.ones(batch_size)

    def update_priorities(self, idx: np.ndarray, td: np.ndarray) -> None:
        pass


class PrioritizedReplayBuffer(ReplayBuffer):
    """Proportional prioritized replay.

    Sampling probability is ``p_i**alpha / sum_j p_j**alpha``; importance
    weights ``(N * P(i))**-beta`` are divided by the batch maximum. New
    transitions enter with the current maximum priority.
    """

    def __init__(self, capacity: int, state_dim: int = FEATURE_DIM, alpha: float = 0.6, beta: float = 0.4):
        super().__init__(capacity, state_dim)
        self.alpha = alpha
        self.beta = beta
        self.priorities = np.zeros(capacity)
        self.max_priority = 1.0

    def push(self, state, action, reward, next_state, done) -> int:
        i = super().push(state, action, reward, next_state, done)
        self.priorities[i] = self.max_priority
        return i

    def probabilities(self) -> np.ndarray:
        p = self.priorities[: self.size] ** self.alpha
        total = p.sum()
        if total <= 0:
            return np.full(self.size, 1.0 / self.size)
        return p / total

    def sample(self, batch_size, rng):
        if self.size < batch_size:
            raise BufferTooSmall(f"{self.size} transitions < batch {batch_size}")
        probs = self.probabilities()
        cdf = np.cumsum(probs)
        cdf /= cdf[-1]
        idx = np.searchsorted(cdf, rng.random(batch_size), side="right")
        idx = np.minimum(idx, self.size - 1)
        w = (self.size * probs[idx]) ** (-self.beta)
        w /= w.max()
        return idx, self.get(idx), w

    def update_priorities(self, idx, td):
        pr = np.abs(td) + PRIORITY_EPS
        self.priorities[idx] = pr
        self.max_priority = max(self.max_priority, float(pr.max()))


def select_action(qnet: ModelParams, state: np.ndarray, epsilon: float, rng: np.random.Generator, qat: bool = False) -> int:
    """Epsilon-greedy over Q-values; argmax ties go to the lowest index."""
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must lie in [0, 1]")
    n = qnet.sizes[-1]
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(n))
    return int(np.argmax(forward(qnet, state, qat)))


def bellman_target(batch: Batch, online: ModelParams, target: ModelParams, gamma: float,
                   double: bool = True, qat: bool = False) -> np.ndarray:
    q_next = forward(target, batch.next_states, qat)
    rows = np.arange(len(batch.rewards))
    if double:
        a_star = np.argmax(forward(online, batch.next_states, qat), axis=1)
        boot = q_next[rows, a_star]
    else:
        boot = q_next.max(axis=1)
    return batch.rewards + gamma * np.where(batch.dones, 0.0, boot)


@dataclass
class TrainStats:
    mean_abs_td: float
    loss: float


@dataclass
class EpisodeReport:
    transitions: int = 0
    rewards: list[float] = field(default_factory=list)
    td_errors: list[float] = field(default_factory=list)
    contract_errors: int = 0

    @property
    def mean_td(self) -> float:
        return float(np.mean(self.td_errors)) if self.td_errors else float("nan")


class DQNAgent:
    def __init__(self, cfg: AgentConfig | None = None, seed: int = 0, state_dim: int = FEATURE_DIM,
                 n_actions: int = 11, qat: bool = False):
        self.cfg = cfg or AgentConfig()
        self.rng = np.random.default_rng(seed)
        self.qat = qat
        sizes = (state_dim, *self.cfg.hidden, n_actions)
        self.online = init_params(sizes, self.rng)
        self.target = self.online.copy()
        self.opt = AdamState.for_params(self.online)
        if self.cfg.per:
            self.buffer: ReplayBuffer = PrioritizedReplayBuffer(
                self.cfg.buffer_capacity, state_dim, self.cfg.per_alpha, self.cfg.per_beta)
        else:
            self.buffer = ReplayBuffer(self.cfg.buffer_capacity, state_dim)
        self.epsilon = self.cfg.epsilon_start
        self.grad_steps = 0
        self.episodes = 0

    def load(self, params: ModelParams) -> None:
        """Adopt broadcast global weights for both online and target nets."""
        self.online.assign(params)
        self.target.assign(params)

    def act(self, state: np.ndarray, greedy: bool = False) -> int:
        return select_action(self.online, state, 0.0 if greedy else self.epsilon, self.rng, self.qat)

    def remember(self, state, action, reward, next_state, done) -> None:
        self.buffer.push(state, action, reward * self.cfg.reward_scale, next_state, done)

    def end_episode(self) -> None:
        self.episodes += 1
        self.epsilon = max(self.cfg.epsilon_min, self.epsilon * self.cfg.epsilon_decay)

    def train_on(self, batch: Batch, weights: np.ndarray | None = None) -> tuple[TrainStats, np.ndarray]:
        cfg = self.cfg
        n = len(batch.rewards)
        w = np.ones(n) if weights is None else weights
        rows = np.arange(n)
        target = bellman_target(batch, self.online, self.target, cfg.gamma, cfg.double_dqn, self.qat)
        q, cache = forward_cached(self.online, batch.states, self.qat)
        td = q[rows, batch.actions] - target
        if cfg.loss == "huber":
            a = np.abs(td)
            per = np.where(a <= 1.0, 0.5 * td * td, a - 0.5)
            g = np.clip(td, -1.0, 1.0)
        else:
            per = td * td
            g = 2.0 * td
        grad_out = np.zeros_like(q)
        grad_out[rows, batch.actions] = w * g / n
        grads = backward(self.online, cache, grad_out)
        adam_step(self.online, grads, self.opt, cfg.lr)
        self.grad_steps += 1
        if self.grad_steps % cfg.target_sync == 0:
            self.target.assign(self.online)
        return TrainStats(float(np.mean(np.abs(td))), float(np.mean(w * per))), td

    def train_step(self) -> TrainStats:
        idx, batch, w = self.buffer.sample(self.cfg.batch_size, self.rng)
        stats, td = self.train_on(batch, w)
        self.buffer.update_priorities(idx, td)
        return stats


def run_local_episodes(agent: DQNAgent, env: ChargingEnv, desk: ContractDesk, episodes: int) -> EpisodeReport:
    """Roll ``episodes`` contract-governed charging sessions and learn from them.

    Every session drafts the cheapest-slot schedule for the EV's demand, signs
    and deposits, steps the environment with epsilon-greedy actions, and
    confirms delivery and settles at the end. Contract errors are recorded by
    the desk and counted here; they never abort the episode.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    report = EpisodeReport()
    ledger = desk.ledger
    cfg = env.cfg

    def commit():
        if ledger is not None:
            ledger.commit()

    for _ in range(episodes):
        state = env.reset()
        schedule = compute_schedule(state.demand_centi / CENTI, env.prices(), cfg.max_rate_kwh,
                                    desk.model.terms.deposit_margin)
        contract = desk.open(schedule)
        try:
            desk.sign_and_deposit(contract)
        except ContractError:
            report.contract_errors += 1
        commit()
        total = 0.0
        done = False
        while not done:
            feats = state.features()
            action = agent.act(feats)
            price = state.price
            state, energy, done = env.step(action)
            if done:
                try:
                    desk.confirm_delivery(contract, state.delivered_total)
                except ContractError:
                    report.contract_errors += 1
            r = desk.reward_query(contract, energy, price, done, state.soc)
            total += r
            agent.remember(feats, action, r, state.features(), done)
            report.transitions += 1
            if len(agent.buffer) >= agent.cfg.batch_size:
                for _ in range(agent.cfg.updates_per_step):
                    report.td_errors.append(agent.train_step().mean_abs_td)
            commit()
        try:
            desk.settle(contract)
        except ContractError:
            report.contract_errors += 1
        commit()
        report.rewards.append(total)
        agent.end_episode()
    return report


def greedy_rollout(params: ModelParams, env: ChargingEnv, desk: ContractDesk, seed: int, qat: bool = False) -> tuple[float, float]:
    """Play one greedy episode from ``seed``; returns (episode reward, initial SoC)."""
    state = env.reset(seed)
    soc0 = state.soc
    schedule = compute_schedule(state.demand_centi / CENTI, env.prices(), env.cfg.max_rate_kwh,
                                desk.model.terms.deposit_margin)
    contract = desk.open(schedule)
    desk.sign_and_deposit(contract)
    total = 0.0
    done = False
    while not done:
        a = int(np.argmax(forward(params, state.features(), qat)))
        price = state.price
        state, energy, done = env.step(a)
        if done:
            desk.confirm_delivery(contract, state.delivered_total)
        total += desk.reward_query(contract, energy, price, done, state.soc)
    desk.settle(contract)
    return total, soc0
