"""Deterministic finite automata and the LegalEdge contract lifecycle machine."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping


class DfaError(Exception):
    pass


class UnknownEvent(DfaError):
    """Raised for an event outside the machine's alphabet (a programming error)."""


class UndefinedTransition(DfaError):
    """Raised when the transition function has no image for (state, event)."""

    def __init__(self, state: str, event: str):
        super().__init__(f"no transition from {state!r} on {event!r}")
        self.state = state
        self.event = event


class SpecError(DfaError):
    pass


class State(str, Enum):
    DRAFTED = "Drafted"
    SIGNED = "Signed"
    ACTIVE = "Active"
    TRIGGERED = "Triggered"
    UPDATED = "Updated"
    DISPUTED = "Disputed"
    COMPLETED = "Completed"
    TERMINATED = "Terminated"


class Event(str, Enum):
    SIGNING_REQUEST_RECEIVED = "SigningRequestReceived"
    CONTRACT_EXECUTION_TRIGGERED = "ContractExecutionTriggered"
    TRANSACTION_CONDITION_MET = "TransactionConditionMet"
    REGULATORY_UPDATE_DETECTED = "RegulatoryUpdateDetected"
    DISPUTE_FILED = "DisputeFiled"
    RESOLUTION_UPHELD = "ResolutionUpheld"
    RESOLUTION_TERMINATED = "ResolutionTerminated"
    ALL_OBLIGATIONS_MET = "AllObligationsMet"
    VIOLATION_DETECTED = "ViolationDetected"
    CLAUSE_EXECUTED = "ClauseExecuted"
    COMPLIANCE_APPLIED = "ComplianceApplied"


def _name(x: str | Enum) -> str:
    return x.value if isinstance(x, Enum) else str(x)


@dataclass(frozen=True)
class DfaSpec:
    """The 5-tuple (states, alphabet, transitions, initial, finals).

    ``transitions`` maps ``(state, event)`` to the successor state. Keys and
    values are plain strings so specs round-trip through JSON unchanged.
    """

    states: frozenset[str]
    alphabet: frozenset[str]
    transitions: Mapping[tuple[str, str], str]
    initial: str
    finals: frozenset[str]

    def __post_init__(self) -> None:
        if self.initial not in self.states:
            raise SpecError(f"initial state {self.initial!r} not in states")
        if not self.finals <= self.states:
            raise SpecError(f"finals not a subset of states: {sorted(self.finals - self.states)}")
        for (src, ev), dst in self.transitions.items():
            if src not in self.states or dst not in self.states:
                raise SpecError(f"transition ({src!r}, {ev!r}) -> {dst!r} uses unknown state")
            if ev not in self.alphabet:
                raise SpecError(f"transition ({src!r}, {ev!r}) uses unknown event")
            if src in self.finals:
                raise SpecError(f"final state {src!r} has an outgoing transition on {ev!r}")

    def delta(self, state: str | Enum, event: str | Enum) -> str | None:
        state, event = _name(state), _name(event)
        if event not in self.alphabet:
            raise UnknownEvent(event)
        return self.transitions.get((state, event))

    def to_json(self) -> str:
        doc = {
            "states": sorted(self.states),
            "alphabet": sorted(self.alphabet),
            "initial": self.initial,
            "finals": sorted(self.finals),
            "transitions": [
                {"from": s, "event": e, "to": t}
                for (s, e), t in sorted(self.transitions.items())
            ],
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DfaSpec":
        doc = json.loads(text)
        table: dict[tuple[str, str], str] = {}
        for row in doc["transitions"]:
            key = (row["from"], row["event"])
            if key in table:
                raise SpecError(f"duplicate transition key {key}")
            table[key] = row["to"]
        return cls(
            states=frozenset(doc["states"]),
            alphabet=frozenset(doc["alphabet"]),
            transitions=table,
            initial=doc["initial"],
            finals=frozenset(doc["finals"]),
        )


@dataclass(frozen=True)
class HistoryEntry:
    event: str
    from_state: str
    to_state: str
    tick: int


@dataclass
class MachineInstance:
    spec: DfaSpec
    current: str = ""
    history: list[HistoryEntry] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.current:
            self.current = self.spec.initial

    @property
    def is_final(self) -> bool:
        return self.current in self.spec.finals

    def can_step(self, event: str | Enum) -> bool:
        return self.spec.delta(self.current, event) is not None

    def step(self, event: str | Enum, tick: int = 0) -> "MachineInstance":
        event = _name(event)
        nxt = self.spec.delta(self.current, event)
        if nxt is None:
            raise UndefinedTransition(self.current, event)
        self.history.append(HistoryEntry(event, self.current, nxt, tick))
        self.current = nxt
        return self


def step(machine: MachineInstance, event: str | Enum, tick: int = 0) -> MachineInstance:
    return machine.step(event, tick)


@dataclass(frozen=True)
class ReplayResult:
    state: str
    failed_at: int | None = None

    @property
    def ok(self) -> bool:
        return self.failed_at is None


def replay(spec: DfaSpec, events: Iterable[str | Enum]) -> ReplayResult:
    """Fold ``events`` over the machine from its initial state.

    An undefined transition stops the fold; the result then carries the state
    reached so far and the index of the offending event.
    """
    state = spec.initial
    for i, ev in enumerate(events):
        nxt = spec.delta(state, ev)
        if nxt is None:
            return ReplayResult(state, failed_at=i)
        state = nxt
    return ReplayResult(state)


# (from, event, to). Dispute resolution is split into upheld/terminated
# outcomes, and the extra edges below return Triggered and Updated to Active so
# the machine stays deterministic and has no dead ends.
CORE_TRANSITIONS: tuple[tuple[State, Event, State], ...] = (
    (State.DRAFTED, Event.SIGNING_REQUEST_RECEIVED, State.SIGNED),
    (State.SIGNED, Event.CONTRACT_EXECUTION_TRIGGERED, State.ACTIVE),
    (State.ACTIVE, Event.TRANSACTION_CONDITION_MET, State.TRIGGERED),
    (State.ACTIVE, Event.REGULATORY_UPDATE_DETECTED, State.UPDATED),
    (State.ACTIVE, Event.DISPUTE_FILED, State.DISPUTED),
    (State.DISPUTED, Event.RESOLUTION_UPHELD, State.ACTIVE),
    (State.ACTIVE, Event.ALL_OBLIGATIONS_MET, State.COMPLETED),
    (State.ACTIVE, Event.VIOLATION_DETECTED, State.TERMINATED),
)

DECIDED_TRANSITIONS: tuple[tuple[State, Event, State], ...] = (
    (State.DISPUTED, Event.RESOLUTION_TERMINATED, State.TERMINATED),
    (State.TRIGGERED, Event.CLAUSE_EXECUTED, State.ACTIVE),
    (State.UPDATED, Event.COMPLIANCE_APPLIED, State.ACTIVE),
)


def legaledge_spec() -> DfaSpec:
    table = {
        (src.value, ev.value): dst.value
        for src, ev, dst in CORE_TRANSITIONS + DECIDED_TRANSITIONS
    }
    return DfaSpec(
        states=frozenset(s.value for s in State),
        alphabet=frozenset(e.value for e in Event),
        transitions=table,
        initial=State.DRAFTED.value,
        finals=frozenset({State.COMPLETED.value, State.TERMINATED.value}),
    )


LEGALEDGE = legaledge_spec()


def new_contract_machine() -> MachineInstance:
    return MachineInstance(LEGALEDGE)
