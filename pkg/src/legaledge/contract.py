"""Escrow charging contract: schedule, deposit, delivery confirmation, settlement.

Money is held in integer minor units (``MONEY_SCALE`` per currency unit) and
energy in integer centi-kWh, so every fund movement is exact and conservation
can be checked with ``==``. A schedule slot costs ``energy_centi * price_milli``
minor units, which is why the scale is 10**5.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Sequence

from pydantic import BaseModel, ConfigDict, Field

from .dfa import Event, MachineInstance, State, new_contract_machine
from .env import CENTI, EnvConfig
from .ledger import Ledger, Timer

MONEY_SCALE = 100_000
PRICE_SCALE = 1000  # milli-currency per kWh


class ContractError(Exception):
    pass


class InfeasibleDemand(ContractError):
    pass


class WrongState(ContractError):
    def __init__(self, op: str, state: str, event: str | None = None):
        super().__init__(f"{op} not allowed in state {state}")
        self.op = op
        self.state = state
        self.event = event


class InsufficientDeposit(ContractError):
    pass


class SettleBeforeConfirm(ContractError):
    pass


class AlreadyConfirmed(ContractError):
    pass


class ContractTerms(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    penalty_rate: float = Field(1.0, ge=0)
    unmet_rate: float = Field(1.0, ge=0)
    deposit_margin: float = Field(0.0, ge=0)


def _round_half_even(x: Fraction) -> int:
    return round(x)  # Fraction.__round__ rounds half to even


def to_money(amount: float) -> int:
    return _round_half_even(Fraction(amount) * MONEY_SCALE)


def from_money(units: int) -> float:
    return units / MONEY_SCALE


@dataclass(frozen=True)
class ChargingSchedule:
    """Predefined per-hour energy plan; ``deposit_required`` is its exact cost."""

    slots: tuple[tuple[int, int], ...]  # (hour, centi-kWh)
    unit_prices: tuple[int, ...]  # milli-currency per kWh, one per slot
    deposit_required: int  # minor units

    @property
    def total_centi(self) -> int:
        return sum(e for _, e in self.slots)

    @property
    def total_kwh(self) -> float:
        return self.total_centi / CENTI

    @property
    def deposit(self) -> float:
        return from_money(self.deposit_required)

    @property
    def mean_price(self) -> float:
        """Energy-weighted price of the schedule, currency per kWh."""
        if not self.total_centi:
            return 0.0
        return self.deposit / self.total_kwh

    def cost(self) -> float:
        return self.deposit

    def to_dict(self) -> dict[str, Any]:
        return {
            "slots": [list(s) for s in self.slots],
            "unit_prices": list(self.unit_prices),
            "deposit_required": self.deposit_required,
        }


def _fill(order: Sequence[int], demand_centi: int, rate_centi: int, price_milli: Sequence[int], margin: float) -> ChargingSchedule:
    slots = []
    prices = []
    left = demand_centi
    for h in order:
        if left <= 0:
            break
        e = min(rate_centi, left)
        slots.append((h, e))
        prices.append(price_milli[h])
        left -= e
    slots_sorted = sorted(zip(slots, prices))
    slots = tuple(s for s, _ in slots_sorted)
    prices = tuple(p for _, p in slots_sorted)
    cost = sum(e * p for (_, e), p in zip(slots, prices))
    if margin:
        cost = _round_half_even(Fraction(cost) * (1 + Fraction(margin)))
    return ChargingSchedule(slots, prices, cost)


def _prepare(demand: float, price_curve: Sequence[float], max_rate: float) -> tuple[int, int, list[int]]:
    if demand < 0:
        raise ValueError("demand must be non-negative")
    if max_rate <= 0:
        raise ValueError("max_rate must be positive")
    if len(price_curve) != 24 or any(p <= 0 for p in price_curve):
        raise ValueError("price_curve must hold 24 positive prices")
    demand_centi = round(demand * CENTI)
    rate_centi = round(max_rate * CENTI)
    if demand_centi > 24 * rate_centi:
        raise InfeasibleDemand(f"demand {demand} kWh exceeds 24 x {max_rate} kWh")
    return demand_centi, rate_centi, [round(p * PRICE_SCALE) for p in price_curve]


def compute_schedule(demand: float, price_curve: Sequence[float], max_rate: float, margin: float = 0.0) -> ChargingSchedule:
    """Fill the cheapest hours first, up to ``max_rate`` kWh each.

    Ties go to the earlier hour. Prices are fixed to milli-currency before
    ranking, so the ranking matches the amounts actually charged.
    """
    demand_centi, rate_centi, milli = _prepare(demand, price_curve, max_rate)
    order = sorted(range(24), key=lambda h: (milli[h], h))
    return _fill(order, demand_centi, rate_centi, milli, margin)


def compute_worst_schedule(demand: float, price_curve: Sequence[float], max_rate: float) -> ChargingSchedule:
    """Mirror of :func:`compute_schedule` that fills the most expensive hours."""
    demand_centi, rate_centi, milli = _prepare(demand, price_curve, max_rate)
    order = sorted(range(24), key=lambda h: (-milli[h], h))
    return _fill(order, demand_centi, rate_centi, milli, 0.0)


@dataclass
class EscrowContract:
    contract_id: str
    schedule: ChargingSchedule
    terms: ContractTerms = field(default_factory=ContractTerms)
    machine: MachineInstance = field(default_factory=new_contract_machine)
    held: int = 0
    payout: int = 0
    refunded: int = 0
    total_deposited: int = 0
    penalties: int = 0
    delivered_centi: int | None = None
    tick: int = 0

    @property
    def state(self) -> str:
        return self.machine.current

    def _require(self, op: str, event: Event) -> None:
        if not self.machine.can_step(event):
            raise WrongState(op, self.state, event.value)

    def _step(self, event: Event) -> None:
        self.machine.step(event, self.tick)

    def sign(self) -> "EscrowContract":
        self._require("sign", Event.SIGNING_REQUEST_RECEIVED)
        self._step(Event.SIGNING_REQUEST_RECEIVED)
        return self

    def deposit(self, amount: int) -> "EscrowContract":
        """Lock ``amount`` minor units in escrow and activate the contract."""
        self._require("deposit", Event.CONTRACT_EXECUTION_TRIGGERED)
        if amount < self.schedule.deposit_required:
            raise InsufficientDeposit(
                f"deposit {amount} below required {self.schedule.deposit_required}"
            )
        self.held += amount
        self.total_deposited += amount
        self._step(Event.CONTRACT_EXECUTION_TRIGGERED)
        return self

    def confirm_delivery(self, delivered_kwh: float) -> "EscrowContract":
        self._require("confirm", Event.TRANSACTION_CONDITION_MET)
        if self.delivered_centi is not None:
            raise AlreadyConfirmed(f"{self.contract_id} delivery already confirmed")
        if delivered_kwh < 0:
            raise ValueError("delivered energy must be non-negative")
        delivered = round(delivered_kwh * CENTI)
        self.delivered_centi = delivered
        self._step(Event.TRANSACTION_CONDITION_MET)
        shortfall = self.schedule.total_centi - delivered
        if shortfall > 0:
            # shortfall kWh x energy-weighted schedule price x penalty rate
            pen = Fraction(shortfall * self.schedule.deposit_required, self.schedule.total_centi)
            self.penalties += _round_half_even(pen * Fraction(self.terms.penalty_rate))
        self._step(Event.CLAUSE_EXECUTED)
        return self

    def settle(self) -> "EscrowContract":
        self._require("settle", Event.ALL_OBLIGATIONS_MET)
        if self.delivered_centi is None:
            raise SettleBeforeConfirm(f"{self.contract_id} settled before delivery was confirmed")
        sched = self.schedule.total_centi
        if sched:
            earned = _round_half_even(
                Fraction(self.schedule.deposit_required * min(self.delivered_centi, sched), sched)
            )
        else:
            earned = 0
        pay = max(0, min(self.held, earned - self.penalties))
        self.payout += pay
        self.refunded += self.held - pay
        self.held = 0
        self._step(Event.ALL_OBLIGATIONS_MET)
        return self

    def fire(self, event: Event | str) -> "EscrowContract":
        """Apply an external lifecycle event (dispute, regulatory update, ...)."""
        ev = Event(event)
        self._require("event", ev)
        self._step(ev)
        return self

    def conserved(self) -> bool:
        return self.held + self.payout + self.refunded == self.total_deposited

    def to_dict(self) -> dict[str, Any]:
        return {
            "contract_id": self.contract_id,
            "state": self.state,
            "schedule": self.schedule.to_dict(),
            "held": self.held,
            "payout": self.payout,
            "refunded": self.refunded,
            "total_deposited": self.total_deposited,
            "penalties": self.penalties,
            "delivered_centi": self.delivered_centi,
            "history": [[h.event, h.from_state, h.to_state, h.tick] for h in self.machine.history],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True)
class RewardModel:
    """Cost-minimising reward emitted by the contract.

    Each step pays ``-price * energy``. The terminal step additionally pays
    for the SoC shortfall at the day's mean price and for contract penalties.
    """

    env: EnvConfig
    terms: ContractTerms = ContractTerms()

    @property
    def mean_price(self) -> float:
        return self.env.price_base  # sinusoid averages to the base over 24 hours

    def __call__(self, contract: EscrowContract | None, energy: float, price: float, terminal: bool, soc: float) -> float:
        r = -price * energy
        if terminal:
            gap = max(0.0, self.env.soc_target - soc)
            r -= self.terms.unmet_rate * gap * self.env.battery_kwh * self.mean_price
            if contract is not None:
                r -= from_money(contract.penalties)
        return r

    def bounds(self) -> tuple[float, float]:
        env = self.env
        worst_step = env.price_max * env.max_rate_kwh
        worst_unmet = self.terms.unmet_rate * env.soc_target * env.battery_kwh * self.mean_price
        # schedule prices are rounded to milli-currency, hence the extra 1e-3
        worst_pen = (self.terms.penalty_rate * env.soc_target * env.battery_kwh
                     * (env.price_max + 1e-3) * (1 + self.terms.deposit_margin))
        slack = 1e-9 * (1 + worst_step + worst_unmet + worst_pen)
        return -(worst_step + worst_unmet + worst_pen) - slack, 0.0


def reward(contract: EscrowContract | None, energy: float, price: float, terminal: bool, soc: float,
           env: EnvConfig | None = None, terms: ContractTerms | None = None) -> float:
    return RewardModel(env or EnvConfig(), terms or ContractTerms())(contract, energy, price, terminal, soc)


def schedule_reward(schedule: ChargingSchedule, model: RewardModel, price_curve: Sequence[float], soc0: float) -> float:
    """Episode reward obtained by delivering ``schedule`` exactly as planned."""
    total = -sum(price_curve[h] * e / CENTI for h, e in schedule.slots)
    soc_end = soc0 + schedule.total_kwh / model.env.battery_kwh
    return total + model(None, 0.0, 0.0, True, soc_end)


class FaultPlan:
    """Injects one illegal contract call per ``period`` recorded calls."""

    def __init__(self, period: int):
        if period < 2:
            raise ValueError("fault period must be >= 2")
        self.period = period
        self.injected = 0

    def due(self, calls_so_far: int) -> bool:
        return self.injected < (calls_so_far + 1) // self.period


class ContractDesk:
    """Opens contracts for one client and routes every call through the ledger.

    Each public call is timed, applied to the contract, and recorded as a
    ledger transaction whose payload carries the resulting contract state, the
    lifecycle events taken, and any error. Errors are re-raised after
    recording.
    """

    def __init__(self, client_id: int, ledger: Ledger | None, model: RewardModel,
                 faults: FaultPlan | None = None):
        self.client_id = client_id
        self.ledger = ledger
        self.model = model
        self.faults = faults
        self._seq = 0
        self._calls = 0
        self.errors = 0
        self.r_min, self.r_max = model.bounds()

    def open(self, schedule: ChargingSchedule) -> EscrowContract:
        cid = f"c{self.client_id}-{self._seq:06d}"
        self._seq += 1
        c = EscrowContract(cid, schedule, self.model.terms)
        if self.ledger is not None:
            c.tick = self.ledger.tick
        return c

    @property
    def calls(self) -> int:
        # faults are scheduled against the shared ledger when there is one
        return self.ledger.tx_count if self.ledger is not None else self._calls

    def _record(self, c: EscrowContract, op: str, events: list, error: Exception | None,
                latency_ns: int, extra: dict[str, Any] | None = None) -> None:
        self._calls += 1
        if error is not None:
            self.errors += 1
        if self.ledger is None:
            return
        payload = {
            "state": c.state,
            "events": events,
            "penalties": c.penalties,
            "held": c.held,
            "payout": c.payout,
            "refunded": c.refunded,
            "delivered": c.delivered_centi,
            "error": type(error).__name__ if error is not None else None,
        }
        if extra:
            payload.update(extra)
        self.ledger.record(c.contract_id, op, payload, latency_ns)

    def _maybe_inject(self, c: EscrowContract) -> None:
        if self.faults is None or not self.faults.due(self.calls):
            return
        self.faults.injected += 1
        op = "deposit" if c.state == State.ACTIVE.value else "settle"
        bad = Event.CONTRACT_EXECUTION_TRIGGERED if op == "deposit" else Event.ALL_OBLIGATIONS_MET
        assert not c.machine.can_step(bad)
        err = WrongState(op, c.state, bad.value)
        events = [{"event": bad.value, "from": c.state, "to": None, "error": "UndefinedTransition"}]
        self._record(c, op, events, err, 0, {"injected": True})

    def _call(self, c: EscrowContract, op: str, fn: Callable[[], Any], extra: Callable[[], dict] | None = None):
        self._maybe_inject(c)
        if self.ledger is not None:
            c.tick = self.ledger.tick
        start = len(c.machine.history)
        err = None
        with Timer() as t:
            try:
                out = fn()
            except ContractError as exc:
                err = exc
                out = None
        events = [
            {"event": h.event, "from": h.from_state, "to": h.to_state}
            for h in c.machine.history[start:]
        ]
        if isinstance(err, WrongState):
            events.append({"event": err.event, "from": c.state, "to": None, "error": "UndefinedTransition"})
        self._record(c, op, events, err, t.ns, extra() if extra else None)
        if err is not None:
            raise err
        return out

    def sign_and_deposit(self, c: EscrowContract, amount: int | None = None) -> EscrowContract:
        """Signing and the escrow deposit land in a single deposit transaction."""
        amount = c.schedule.deposit_required if amount is None else amount

        def go():
            c.sign()
            c.deposit(amount)

        self._call(c, "deposit", go, lambda: {"amount": amount})
        return c

    def deposit(self, c: EscrowContract, amount: int) -> EscrowContract:
        self._call(c, "deposit", lambda: c.deposit(amount), lambda: {"amount": amount})
        return c

    def confirm_delivery(self, c: EscrowContract, delivered_kwh: float) -> EscrowContract:
        before = c.penalties
        self._call(c, "confirm", lambda: c.confirm_delivery(delivered_kwh))
        if c.penalties != before:
            self._record(c, "penalty", [], None, 0, {"accrued": c.penalties - before})
        return c

    def settle(self, c: EscrowContract) -> EscrowContract:
        self._call(c, "settle", c.settle)
        return c

    def fire(self, c: EscrowContract, event: Event | str) -> EscrowContract:
        self._call(c, "event", lambda: c.fire(event), lambda: {"fired": Event(event).value})
        return c

    def reward_query(self, c: EscrowContract | None, energy: float, price: float, terminal: bool, soc: float) -> float:
        with Timer() as t:
            r = self.model(c, energy, price, terminal, soc)
        if c is not None:
            self._maybe_inject(c)
            self._record(c, "reward_query", [], None, t.ns,
                         {"reward": r, "r_min": self.r_min, "r_max": self.r_max,
                          "energy": energy, "price": price, "terminal": terminal})
        if not math.isfinite(r):
            raise ValueError("non-finite reward")
        return r
