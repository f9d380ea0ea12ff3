"""Episodic EV charging environment with sinusoidal day/night pricing.

Energy is tracked in integer centi-kWh so that delivered totals and battery
contents agree exactly; SoC is derived from the stored amount.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

CENTI = 100  # centi-kWh per kWh
FEATURE_DIM = 5


class EpisodeFinished(Exception):
    pass


class EnvConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    episode_steps: int = 24
    battery_kwh: float = 50.0
    station_cap_kwh: float = 100.0
    max_rate_kwh: float = 10.0
    soc_target: float = 0.9
    soc_init_low: float = 0.1
    soc_init_high: float = 0.5
    price_base: float = 0.5
    price_amp: float = 0.3
    action_levels: int = 11

    @model_validator(mode="after")
    def _check(self) -> "EnvConfig":
        if self.episode_steps != 24:
            raise ValueError("episode_steps must be 24 (one step per hour)")
        if not 0 < self.price_amp < self.price_base:
            raise ValueError("price_amp must satisfy 0 < price_amp < price_base")
        if self.action_levels < 2:
            raise ValueError("action_levels must be at least 2")
        if not 0 < self.soc_target <= 1:
            raise ValueError("soc_target must lie in (0, 1]")
        if not 0 <= self.soc_init_low <= self.soc_init_high <= 1:
            raise ValueError("initial SoC range must satisfy 0 <= low <= high <= 1")
        for name in ("battery_kwh", "station_cap_kwh", "max_rate_kwh"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        return self

    @property
    def n_actions(self) -> int:
        return self.action_levels

    @property
    def battery_centi(self) -> int:
        return round(self.battery_kwh * CENTI)

    @property
    def station_cap_centi(self) -> int:
        return round(self.station_cap_kwh * CENTI)

    @property
    def target_centi(self) -> int:
        return round(self.soc_target * self.battery_kwh * CENTI)

    @property
    def price_max(self) -> float:
        return self.price_base + self.price_amp

    def action_centi(self, action: int) -> int:
        return round(action * self.max_rate_kwh * CENTI / (self.action_levels - 1))

    def for_client(self, client_id: int) -> "EnvConfig":
        """Per-client pricing heterogeneity: amplitude scaled by (1 + 0.1 k)."""
        amp = self.price_amp * (1 + 0.1 * client_id)
        amp = min(amp, self.price_base * 0.95)
        return self.model_copy(update={"price_amp": amp})


def price(hour: int | float, cfg: EnvConfig | None = None) -> float:
    """Energy price at ``hour``; peaks at 18:00 and bottoms out at 06:00."""
    cfg = cfg or EnvConfig()
    if not 0 <= hour < 24:
        raise ValueError(f"hour {hour} outside [0, 24)")
    return cfg.price_base + cfg.price_amp * math.sin(2 * math.pi * (hour - 12) / 24)


def price_curve(cfg: EnvConfig | None = None) -> list[float]:
    cfg = cfg or EnvConfig()
    return [price(h, cfg) for h in range(cfg.episode_steps)]


@dataclass(frozen=True)
class EnvState:
    stored_centi: int
    hour: int
    delivered_centi: int
    initial_centi: int
    cfg: EnvConfig

    @property
    def soc(self) -> float:
        return self.stored_centi / self.cfg.battery_centi

    @property
    def delivered_total(self) -> float:
        return self.delivered_centi / CENTI

    @property
    def done(self) -> bool:
        return self.hour >= self.cfg.episode_steps

    @property
    def price(self) -> float:
        return price(min(self.hour, self.cfg.episode_steps - 1), self.cfg)

    @property
    def demand_centi(self) -> int:
        """Energy still needed at episode start to reach the SoC target."""
        return max(0, self.cfg.target_centi - self.initial_centi)

    def features(self) -> np.ndarray:
        cfg = self.cfg
        h = self.hour
        norm_price = (self.price - cfg.price_base) / cfg.price_amp
        return np.array(
            [
                self.soc,
                math.sin(2 * math.pi * h / 24),
                math.cos(2 * math.pi * h / 24),
                norm_price,
                (cfg.episode_steps - h) / cfg.episode_steps,
            ],
            dtype=np.float64,
        )


class ChargingEnv:
    def __init__(self, cfg: EnvConfig | None = None, seed: int | None = None):
        self.cfg = cfg or EnvConfig()
        self._rng = np.random.default_rng(seed)
        self.state: EnvState | None = None

    def prices(self) -> list[float]:
        return price_curve(self.cfg)

    def reset(self, seed: int | None = None) -> EnvState:
        rng = self._rng if seed is None else np.random.default_rng(seed)
        soc0 = rng.uniform(self.cfg.soc_init_low, self.cfg.soc_init_high)
        stored = round(soc0 * self.cfg.battery_centi)
        self.state = EnvState(stored, 0, 0, stored, self.cfg)
        return self.state

    def step(self, action: int) -> tuple[EnvState, float, bool]:
        """Apply one hour of charging; returns (next state, kWh delivered, done)."""
        s = self.state
        if s is None or s.done:
            raise EpisodeFinished("reset() before stepping")
        if not 0 <= action < self.cfg.action_levels:
            raise ValueError(f"action {action} outside [0, {self.cfg.action_levels})")
        requested = self.cfg.action_centi(action)
        delivered = min(
            requested,
            self.cfg.battery_centi - s.stored_centi,
            self.cfg.station_cap_centi - s.delivered_centi,
        )
        delivered = max(delivered, 0)
        self.state = EnvState(
            s.stored_centi + delivered,
            s.hour + 1,
            s.delivered_centi + delivered,
            s.initial_centi,
            self.cfg,
        )
        return self.state, delivered / CENTI, self.state.done
