"""Round metrics: efficiency, TD-error convergence, latency, integrity; CSV/JSON/SVG export."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .contract import RewardModel, compute_schedule, compute_worst_schedule, schedule_reward
from .env import CENTI, EnvConfig, price_curve

CSV_FIELDS = (
    "round", "efficiency", "td_error", "reward", "tx_count",
    "latency_mean_s", "latency_p99_s", "integrity",
)


class DegenerateOracle(ValueError):
    pass


class TooFewRounds(ValueError):
    pass


@dataclass
class RoundMetrics:
    round: int
    efficiency: float
    td_error: float
    reward: float
    tx_count: int
    latency_mean_s: float
    latency_p99_s: float
    integrity: float

    def row(self) -> list[str]:
        return [_fmt(getattr(self, k)) for k in CSV_FIELDS]


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def oracle_bounds(env: EnvConfig, soc0: float, model: RewardModel | None = None) -> tuple[float, float]:
    """(best, worst) episode reward reachable by delivering exactly the demand.

    Best fills the cheapest hours, worst the most expensive ones.
    """
    model = model or RewardModel(env)
    prices = price_curve(env)
    demand = max(0, env.target_centi - round(soc0 * env.battery_centi)) / CENTI
    best = schedule_reward(compute_schedule(demand, prices, env.max_rate_kwh), model, prices, soc0)
    worst = schedule_reward(compute_worst_schedule(demand, prices, env.max_rate_kwh), model, prices, soc0)
    return best, worst


def episode_efficiency(reward: float, oracle: float, worst: float) -> float:
    span = oracle - worst
    if span == 0:
        return 1.0
    return float(min(1.0, max(0.0, (reward - worst) / span)))


def efficiency(rewards: Sequence[float], oracle: Sequence[float], worst: Sequence[float],
               strict: bool = False) -> float:
    """Mean oracle-normalised reward, each episode clipped to [0, 1].

    An episode whose best and worst schedules tie scores 1 by convention;
    with ``strict`` it raises :class:`DegenerateOracle` instead.
    """
    if not len(rewards) == len(oracle) == len(worst) or not rewards:
        raise ValueError("need equally many rewards, oracle and worst values")
    if strict and any(o == w for o, w in zip(oracle, worst)):
        raise DegenerateOracle("oracle and worst schedules have equal reward")
    return float(np.mean([episode_efficiency(r, o, w) for r, o, w in zip(rewards, oracle, worst)]))


@dataclass(frozen=True)
class ConvergenceSummary:
    first5: float
    last5: float
    plateau_round: int | None

    @property
    def ratio(self) -> float:
        return self.last5 / self.first5 if self.first5 else math.inf


def convergence_summary(td: Sequence[float], window: int = 5, tol: float = 0.05) -> ConvergenceSummary:
    """Summarise a per-round TD-error series (round r is ``td[r-1]``).

    The plateau round is the first r whose trailing window mean moved by less
    than ``tol`` relative to the window ending one round earlier.
    """
    td = np.asarray(td, dtype=np.float64)
    if len(td) < 2 * window:
        raise TooFewRounds(f"need at least {2 * window} rounds, got {len(td)}")
    plateau = None
    for r in range(window + 1, len(td) + 1):
        cur = td[r - window:r].mean()
        prev = td[r - window - 1:r - 1].mean()
        if prev == 0:
            change = 0.0 if cur == 0 else math.inf
        else:
            change = abs(cur - prev) / abs(prev)
        if change < tol:
            plateau = r
            break
    return ConvergenceSummary(float(td[:window].mean()), float(td[-window:].mean()), plateau)


def write_csv(rows: Sequence[RoundMetrics], path: str | Path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for m in rows:
        w.writerow(m.row())
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def summary(rows: Sequence[RoundMetrics]) -> dict:
    out: dict = {"rounds": len(rows)}
    if rows:
        out["final"] = {k: _json_num(getattr(rows[-1], k)) for k in CSV_FIELDS}
    else:
        out["final"] = None
    td = [r.td_error for r in rows]
    if len(td) >= 10 and all(math.isfinite(x) for x in td):
        cs = convergence_summary(td)
        out["convergence"] = {"first5": cs.first5, "last5": cs.last5, "plateau_round": cs.plateau_round}
    else:
        out["convergence"] = None
    return out


def _json_num(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def export(rows: Sequence[RoundMetrics], out_dir: str | Path, charts: bool = False, extra: dict | None = None) -> list[Path]:
    """Write ``rounds.csv`` and ``summary.json`` (plus SVG charts on request)."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "rounds.csv", out / "summary.json"]
        write_csv(rows, written[0])
        doc = summary(rows)
        if extra:
            doc.update(extra)
        written[1].write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        if charts and rows:
            written.append(write_charts(rows, out / "rounds.svg"))
    except OSError as exc:
        raise OSError(f"failed writing metrics to {out}: {exc}") from exc
    return written


def write_charts(rows: Sequence[RoundMetrics], path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    r = [m.round for m in rows]
    panels = [
        ("efficiency", "Efficiency"),
        ("td_error", "Mean |TD error|"),
        ("latency_mean_s", "Mean call latency (s)"),
        ("integrity", "Integrity score"),
    ]
    fig, axes = plt.subplots(2, 2, figsize=(9, 6))
    for ax, (key, title) in zip(axes.ravel(), panels):
        ax.plot(r, [getattr(m, key) for m in rows], marker="o", ms=3)
        ax.set_title(title)
        ax.set_xlabel("FL round")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def as_dict(m: RoundMetrics) -> dict:
    return asdict(m)
