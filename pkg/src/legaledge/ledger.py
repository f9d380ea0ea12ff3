"""Single-node append-only hash-chained ledger.

Stands in for the blockchain layer: contract calls are buffered as
transactions and committed one block per simulation tick. Block hashes cover
``height || prev_hash || canonical tx bytes`` where height is an unsigned
64-bit big-endian integer and the tx bytes are sorted-key compact JSON.
Measured wall latency is stored alongside each transaction but never hashed.
"""

from __future__ import annotations

import hashlib
import json
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

import numpy as np

GENESIS_PREV = bytes(32)

OP_NAMES = frozenset({"deposit", "confirm", "settle", "reward_query", "penalty", "event"})


class LedgerError(Exception):
    pass


class EmptyWindow(LedgerError):
    pass


class EmptyLedger(LedgerError):
    pass


class LedgerFormatError(LedgerError):
    pass


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("ascii")


@dataclass(frozen=True)
class LedgerTransaction:
    tx_id: int
    contract_id: str
    op_name: str
    payload: bytes
    tick: int
    wall_latency_ns: int = 0

    def hashed_fields(self) -> dict[str, Any]:
        return {
            "tx_id": self.tx_id,
            "contract_id": self.contract_id,
            "op_name": self.op_name,
            # surrogateescape keeps arbitrary (even corrupted) bytes distinguishable
            "payload": self.payload.decode("utf-8", errors="surrogateescape"),
            "tick": self.tick,
        }

    @property
    def data(self) -> dict[str, Any]:
        return json.loads(self.payload)


def tx_list_bytes(txs: Sequence[LedgerTransaction]) -> bytes:
    return json.dumps(
        [tx.hashed_fields() for tx in txs],
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=True,
    ).encode("ascii", errors="surrogateescape")


def block_digest(height: int, prev_hash: bytes, txs: Sequence[LedgerTransaction]) -> bytes:
    h = hashlib.sha256()
    h.update(height.to_bytes(8, "big", signed=False))
    h.update(prev_hash)
    h.update(tx_list_bytes(txs))
    return h.digest()


@dataclass(frozen=True)
class LedgerBlock:
    height: int
    prev_hash: bytes
    tx_list: tuple[LedgerTransaction, ...]
    block_hash: bytes

    def to_dict(self) -> dict[str, Any]:
        return {
            "height": self.height,
            "prev_hash": self.prev_hash.hex(),
            "block_hash": self.block_hash.hex(),
            "txs": [
                {
                    "tx_id": tx.tx_id,
                    "contract_id": tx.contract_id,
                    "op_name": tx.op_name,
                    "payload": tx.payload.decode("utf-8"),
                    "tick": tx.tick,
                    "wall_latency_ns": tx.wall_latency_ns,
                }
                for tx in self.tx_list
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "LedgerBlock":
        try:
            if set(doc) != {"height", "prev_hash", "block_hash", "txs"}:
                raise LedgerFormatError(f"unexpected block keys {sorted(doc)}")
            txs = []
            for t in doc["txs"]:
                if set(t) != {"tx_id", "contract_id", "op_name", "payload", "tick", "wall_latency_ns"}:
                    raise LedgerFormatError(f"unexpected transaction keys {sorted(t)}")
                txs.append(
                    LedgerTransaction(
                        tx_id=_int(t["tx_id"]),
                        contract_id=_str(t["contract_id"]),
                        op_name=_str(t["op_name"]),
                        payload=_str(t["payload"]).encode("utf-8", errors="surrogateescape"),
                        tick=_int(t["tick"]),
                        wall_latency_ns=_int(t["wall_latency_ns"]),
                    )
                )
            return cls(
                height=_int(doc["height"]),
                prev_hash=_hex32(doc["prev_hash"]),
                tx_list=tuple(txs),
                block_hash=_hex32(doc["block_hash"]),
            )
        except (KeyError, TypeError) as exc:
            raise LedgerFormatError(str(exc)) from exc


def _int(v: Any) -> int:
    if type(v) is not int:
        raise LedgerFormatError(f"expected integer, got {v!r}")
    return v


def _str(v: Any) -> str:
    if not isinstance(v, str):
        raise LedgerFormatError(f"expected string, got {v!r}")
    return v


_HEX = frozenset("0123456789abcdef")


def _hex32(v: Any) -> bytes:
    s = _str(v)
    if len(s) != 64 or not set(s) <= _HEX:
        raise LedgerFormatError(f"expected 64 lowercase hex digits, got {s!r}")
    return bytes.fromhex(s)


@dataclass(frozen=True)
class ChainCheck:
    ok: bool
    bad_height: int | None = None


@dataclass(frozen=True)
class LatencyStats:
    mean: float
    stddev: float
    p99: float
    count: int


class SyntheticLatency:
    """Seeded Gaussian latency source used instead of the measured call time."""

    def __init__(self, mean_s: float, std_s: float, seed: int = 0):
        self.mean_s = mean_s
        self.std_s = std_s
        self._rng = np.random.default_rng(seed)

    def __call__(self, measured_ns: int) -> int:
        return max(0, int(round(self._rng.normal(self.mean_s, self.std_s) * 1e9)))


@dataclass
class Ledger:
    """Append-only chain plus a pending transaction buffer.

    ``record`` queues a transaction; ``commit`` seals everything pending into
    one block. Committed blocks are exposed read-only through ``blocks``.
    """

    latency_source: SyntheticLatency | None = None
    _blocks: list[LedgerBlock] = field(default_factory=list)
    _pending: list[LedgerTransaction] = field(default_factory=list)
    _next_tx: int = 0
    tick: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def blocks(self) -> tuple[LedgerBlock, ...]:
        return tuple(self._blocks)

    def __len__(self) -> int:
        return len(self._blocks)

    @property
    def tx_count(self) -> int:
        return self._next_tx

    @property
    def head_hash(self) -> bytes:
        return self._blocks[-1].block_hash if self._blocks else GENESIS_PREV

    def record(self, contract_id: str, op_name: str, payload: dict[str, Any], latency_ns: int = 0) -> LedgerTransaction:
        if op_name not in OP_NAMES:
            raise ValueError(f"unknown op_name {op_name!r}")
        if self.latency_source is not None:
            latency_ns = self.latency_source(latency_ns)
        with self._lock:
            tx = LedgerTransaction(
                tx_id=self._next_tx,
                contract_id=contract_id,
                op_name=op_name,
                payload=canonical_json(payload),
                tick=self.tick,
                wall_latency_ns=int(latency_ns),
            )
            self._next_tx += 1
            self._pending.append(tx)
        return tx

    def commit(self) -> LedgerBlock | None:
        """Seal pending transactions into a block and advance the tick."""
        with self._lock:
            txs, self._pending = self._pending, []
        block = self.append(txs) if txs else None
        self.tick += 1
        return block

    def append(self, txs: Iterable[LedgerTransaction]) -> LedgerBlock:
        txs = tuple(txs)
        if not txs:
            raise ValueError("cannot append an empty block")
        with self._lock:
            last = self._blocks[-1].tx_list[-1].tx_id if self._blocks else -1
            for tx in txs:
                if tx.tx_id <= last:
                    raise ValueError(f"tx_id {tx.tx_id} not strictly increasing")
                last = tx.tx_id
            self._next_tx = max(self._next_tx, last + 1)
            height = len(self._blocks)
            prev = self.head_hash
            block = LedgerBlock(height, prev, txs, block_digest(height, prev, txs))
            self._blocks.append(block)
        return block

    def transactions(self) -> Iterator[LedgerTransaction]:
        for b in self._blocks:
            yield from b.tx_list

    def dump_jsonl(self, path: str | Path) -> None:
        dump_blocks(self._blocks, path)

    @classmethod
    def load_jsonl(cls, path: str | Path) -> "Ledger":
        led = cls()
        led._blocks = load_blocks(path)
        if led._blocks:
            led._next_tx = max((tx.tx_id for b in led._blocks for tx in b.tx_list), default=-1) + 1
            led.tick = max((tx.tick for b in led._blocks for tx in b.tx_list), default=-1) + 1
        return led


def dump_blocks(blocks: Iterable[LedgerBlock], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for b in blocks:
            fh.write(json.dumps(b.to_dict(), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def load_blocks(path: str | Path) -> list[LedgerBlock]:
    blocks = []
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise LedgerFormatError(f"{path}: not UTF-8: {exc}") from exc
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise LedgerFormatError(f"{path}:{lineno}: {exc}") from exc
        if not isinstance(doc, dict):
            raise LedgerFormatError(f"{path}:{lineno}: block is not an object")
        try:
            blocks.append(LedgerBlock.from_dict(doc))
        except LedgerFormatError as exc:
            raise LedgerFormatError(f"{path}:{lineno}: {exc}") from exc
    return blocks


def verify_chain(ledger: Ledger | Sequence[LedgerBlock]) -> ChainCheck:
    blocks = ledger.blocks if isinstance(ledger, Ledger) else ledger
    prev = GENESIS_PREV
    last_tx = -1
    for i, b in enumerate(blocks):
        if b.height != i or b.prev_hash != prev or not b.tx_list:
            return ChainCheck(False, i)
        for tx in b.tx_list:
            if tx.tx_id <= last_tx:
                return ChainCheck(False, i)
            last_tx = tx.tx_id
        if block_digest(b.height, b.prev_hash, b.tx_list) != b.block_hash:
            return ChainCheck(False, i)
        prev = b.block_hash
    return ChainCheck(True)


def _calls(ledger: Ledger | Sequence[LedgerBlock] | Sequence[LedgerTransaction]) -> list[LedgerTransaction]:
    if isinstance(ledger, Ledger):
        return list(ledger.transactions())
    items = list(ledger)
    if items and isinstance(items[0], LedgerBlock):
        return [tx for b in items for tx in b.tx_list]
    return items


def call_checks(txs: Sequence[LedgerTransaction]) -> list[bool]:
    """Per-call verdict on the three contract-integrity checks.

    A call passes when (a) the contract's cumulative penalty never decreased,
    (b) any reward it emitted lies within the declared bounds, and (c) it
    raised no contract or transition error. Penalty history is tracked over
    the full sequence handed in.
    """
    last_penalty: dict[str, int] = {}
    verdicts = []
    for tx in txs:
        data = tx.data
        ok = data.get("error") is None
        pen = data.get("penalties")
        if pen is not None:
            prev = last_penalty.get(tx.contract_id)
            if prev is not None and pen < prev:
                ok = False
            last_penalty[tx.contract_id] = max(pen, prev if prev is not None else pen)
        if "reward" in data:
            r = data["reward"]
            lo, hi = data.get("r_min", -math.inf), data.get("r_max", math.inf)
            if not (math.isfinite(r) and lo <= r <= hi):
                ok = False
        verdicts.append(ok)
    return verdicts


def integrity_score(ledger, window: int | None = None) -> float:
    """Fraction of the last ``window`` calls that pass every integrity check."""
    txs = _calls(ledger)
    verdicts = call_checks(txs)
    if window is None:
        window = len(verdicts)
    if window < 1 or not verdicts:
        raise EmptyWindow("integrity window is empty")
    tail = verdicts[-window:]
    return sum(tail) / len(tail)


def latency_stats(ledger) -> LatencyStats:
    txs = _calls(ledger)
    if not txs:
        raise EmptyLedger("no transactions to summarise")
    lat = np.array([tx.wall_latency_ns for tx in txs], dtype=np.float64) / 1e9
    return LatencyStats(
        mean=float(lat.mean()),
        stddev=float(lat.std()),
        p99=float(np.percentile(lat, 99)),
        count=len(lat),
    )


class Timer:
    """Context manager yielding elapsed nanoseconds via ``.ns``."""

    __slots__ = ("_t0", "ns")

    def __enter__(self) -> "Timer":
        self._t0 = time.perf_counter_ns()
        self.ns = 0
        return self

    def __exit__(self, *exc) -> None:
        self.ns = time.perf_counter_ns() - self._t0
