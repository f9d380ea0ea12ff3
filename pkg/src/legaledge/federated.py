"""Synchronous federated rounds over in-process DQN clients.

The coordinator broadcasts the global weights, lets every client run its local
episodes, collects (optionally int8-quantized) uploads and replaces the global
model by the sample-weighted average of the client weights.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .agent import DQNAgent, greedy_rollout, run_local_episodes
from .config import ExperimentConfig
from .contract import ContractDesk, FaultPlan, RewardModel
from .env import ChargingEnv, EnvConfig
from .ledger import Ledger, SyntheticLatency, integrity_score, latency_stats
from .metrics import RoundMetrics, efficiency, oracle_bounds
from .nn import ModelParams, ShapeMismatch, init_params
from .quant import QuantizedParams, dequantize, quantize

log = logging.getLogger(__name__)


class EmptyRound(RuntimeError):
    pass


@dataclass
class ClientUpdate:
    client_id: int
    sample_count: int
    round: int
    params: ModelParams | None = None
    quantized: QuantizedParams | None = None
    mean_td: float = float("nan")
    mean_reward: float = float("nan")
    td_errors: list[float] = field(default_factory=list)

    def weights(self) -> ModelParams:
        if self.quantized is not None:
            return dequantize(self.quantized)
        if self.params is None:
            raise ValueError(f"client {self.client_id} uploaded nothing")
        return self.params


def pairwise_sum(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Sum in a fixed balanced-tree order (left half + right half)."""
    n = len(vectors)
    if n == 1:
        return vectors[0].copy()
    mid = n // 2
    return pairwise_sum(vectors[:mid]) + pairwise_sum(vectors[mid:])


def aggregate(updates: Sequence[ClientUpdate]) -> ModelParams:
    """Sample-count weighted average of client weights (quantized ones first dequantized)."""
    if not updates:
        raise EmptyRound("no client updates to aggregate")
    ups = sorted(updates, key=lambda u: u.client_id)
    if any(u.sample_count < 1 for u in ups):
        raise ValueError("every update needs sample_count >= 1")
    params = [u.weights() for u in ups]
    shapes = params[0].shapes
    for u, p in zip(ups, params):
        if p.shapes != shapes:
            raise ShapeMismatch(f"client {u.client_id} shapes {p.shapes} != {shapes}")
    total = sum(u.sample_count for u in ups)
    terms = [(u.sample_count / total) * p.flat() for u, p in zip(ups, params)]
    return ModelParams.from_flat(shapes, pairwise_sum(terms))


def params_digest(params: ModelParams) -> str:
    return hashlib.sha256(np.ascontiguousarray(params.flat(), dtype="<f8").tobytes()).hexdigest()


class Client:
    def __init__(self, client_id: int, cfg: ExperimentConfig, master_seed: int, ledger: Ledger | None,
                 faults: FaultPlan | None):
        self.client_id = client_id
        self.seed = master_seed + client_id
        env_ss, agent_ss, quant_ss, eval_ss = np.random.SeedSequence(self.seed).spawn(4)
        self.env_cfg: EnvConfig = cfg.env.for_client(client_id)
        self.env = ChargingEnv(self.env_cfg, seed=env_ss)
        self.agent = DQNAgent(cfg.agent, seed=agent_ss, n_actions=self.env_cfg.n_actions, qat=cfg.qat)
        self.model = RewardModel(self.env_cfg, cfg.contract)
        self.desk = ContractDesk(client_id, ledger, self.model, faults)
        self.eval_desk = ContractDesk(client_id, None, self.model)
        self.quant_rng = np.random.default_rng(quant_ss)
        self.eval_seeds = [int(s) for s in eval_ss.generate_state(cfg.eval_episodes)]
        self.episodes_per_round = cfg.local_epochs * cfg.episodes_per_epoch
        self.quantize_uploads = cfg.quantize_uploads
        self._oracle = [oracle_bounds(self.env_cfg, ChargingEnv(self.env_cfg).reset(s).soc, self.model)
                        for s in self.eval_seeds]

    def local_round(self, global_params: ModelParams, rnd: int) -> ClientUpdate:
        self.agent.load(global_params)
        rep = run_local_episodes(self.agent, self.env, self.desk, self.episodes_per_round)
        upd = ClientUpdate(
            client_id=self.client_id,
            sample_count=rep.transitions,
            round=rnd,
            mean_td=rep.mean_td,
            mean_reward=float(np.mean(rep.rewards)),
            td_errors=rep.td_errors,
        )
        weights = self.agent.online.copy()
        if self.quantize_uploads == "off":
            upd.params = weights
        else:
            upd.quantized = quantize(weights, self.quantize_uploads, self.quant_rng)
        return upd

    def evaluate(self, params: ModelParams) -> float:
        env = ChargingEnv(self.env_cfg)
        rewards = [greedy_rollout(params, env, self.eval_desk, s, self.agent.qat)[0] for s in self.eval_seeds]
        best = [o for o, _ in self._oracle]
        worst = [w for _, w in self._oracle]
        return efficiency(rewards, best, worst)


@dataclass
class FedRoundState:
    round: int
    total_rounds: int
    params: ModelParams
    sample_total: int = 0
    metrics: list[RoundMetrics] = field(default_factory=list)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    seed: int
    params: ModelParams
    ledger: Ledger
    metrics: list[RoundMetrics]
    clients: list[Client]

    @property
    def model_hash(self) -> str:
        return params_digest(self.params)

    @property
    def ledger_hash(self) -> str:
        return self.ledger.head_hash.hex()


class Coordinator:
    def __init__(self, cfg: ExperimentConfig, seed: int | None = None):
        self.cfg = cfg
        self.seed = seed if seed is not None else (cfg.seed if cfg.seed is not None else 0)
        latency = None
        if cfg.synthetic_latency is not None:
            latency = SyntheticLatency(cfg.synthetic_latency.mean_s, cfg.synthetic_latency.std_s, self.seed)
        self.ledger = Ledger(latency_source=latency)
        self.faults = FaultPlan(cfg.fault_period) if cfg.fault_period else None
        self.clients = [Client(k, cfg, self.seed, self.ledger, self.faults) for k in range(cfg.clients)]
        sizes = self.clients[0].agent.online.sizes
        self.state = FedRoundState(0, cfg.rounds, init_params(sizes, np.random.default_rng(self.seed)))

    def run_round(self) -> RoundMetrics:
        st = self.state
        if st.round >= st.total_rounds:
            raise RuntimeError("all rounds already completed")
        rnd = st.round + 1
        tx_before = self.ledger.tx_count
        updates = []
        for c in self.clients:
            try:
                updates.append(c.local_round(st.params, rnd))
            except Exception:
                log.exception("client %d failed in round %d; excluded", c.client_id, rnd)
        st.params = aggregate(updates)
        st.sample_total = sum(u.sample_count for u in updates)
        st.round = rnd

        eff = float(np.mean([c.evaluate(st.params) for c in self.clients]))
        tds = [t for u in updates for t in u.td_errors]
        new_tx = self.ledger.tx_count - tx_before
        if new_tx:
            lat = latency_stats(list(self.ledger.transactions())[-new_tx:])
            integ = integrity_score(self.ledger, window=new_tx)
        else:
            lat, integ = None, 1.0
        m = RoundMetrics(
            round=rnd,
            efficiency=eff,
            td_error=float(np.mean(tds)) if tds else float("nan"),
            reward=float(np.mean([u.mean_reward for u in updates])),
            tx_count=new_tx,
            latency_mean_s=lat.mean if lat else 0.0,
            latency_p99_s=lat.p99 if lat else 0.0,
            integrity=integ,
        )
        st.metrics.append(m)
        log.info("round %d: eff=%.3f td=%.4f integrity=%.3f", rnd, m.efficiency, m.td_error, m.integrity)
        return m

    def run(self) -> ExperimentResult:
        while self.state.round < self.state.total_rounds:
            self.run_round()
        return ExperimentResult(self.cfg, self.seed, self.state.params, self.ledger, self.state.metrics, self.clients)


def run_experiment(cfg: ExperimentConfig, seed: int | None = None) -> ExperimentResult:
    return Coordinator(cfg, seed).run()
