"""Network-loss and curtailment costs per timestep and over a horizon."""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from derphase.errors import InconsistentSolveError, ValidationError

DEFAULT_PRICE_EUR_KWH = 0.2702
NEGATIVE_LOSS_EPS_W = 1.0


@dataclass(frozen=True, eq=False)
class Tariff:
    """Energy price in EUR/kWh (scalar or one value per step) and gamma = dt in hours."""

    e_price: float | np.ndarray = DEFAULT_PRICE_EUR_KWH
    gamma: float = 0.25

    def __post_init__(self) -> None:
        price = np.asarray(self.e_price, dtype=float)
        if np.any(price < 0) or not np.all(np.isfinite(price)):
            raise ValidationError("electricity price must be finite and non-negative")
        if not self.gamma > 0:
            raise ValidationError(f"gamma must be positive, got {self.gamma}")
        if price.ndim:
            price.setflags(write=False)
            object.__setattr__(self, "e_price", price)

    def price(self, t: int) -> float:
        if np.ndim(self.e_price) == 0:
            return float(self.e_price)
        return float(self.e_price[t])

    def prices(self, steps: slice | np.ndarray) -> np.ndarray | float:
        if np.ndim(self.e_price) == 0:
            return float(self.e_price)
        return self.e_price[steps]

    def scaled(self, factor: float) -> Tariff:
        return Tariff(np.asarray(self.e_price) * factor if np.ndim(self.e_price) else self.e_price * factor,
                      self.gamma)


def _energy_eur(power_w, tariff: Tariff, price) -> float | np.ndarray:
    return np.asarray(power_w) / 1000.0 * tariff.gamma * price


def _first(steps: slice | np.ndarray) -> int:
    if isinstance(steps, slice):
        return steps.start or 0
    return int(steps[0]) if len(steps) else 0


def _guard_losses(p_nl: np.ndarray, first_step: int = 0) -> np.ndarray:
    bad = np.flatnonzero(p_nl < -NEGATIVE_LOSS_EPS_W)
    if bad.size:
        k = int(bad[0])
        raise InconsistentSolveError(
            f"negative network loss {p_nl[k]:.3f} W at t={first_step + k}"
        )
    return np.where(p_nl < 0, 0.0, p_nl)


def network_loss(p_root, delivered_total, p_load):
    """P_input - P_load with P_input = P_root + sum of delivered DER power (W)."""
    return np.asarray(p_root) + np.asarray(delivered_total) - np.asarray(p_load)


def loss_cost(p_root: float, productions_after_curtail: Iterable[float], p_load: float,
              tariff: Tariff, t: int) -> float:
    """Cost of network losses at one step in EUR."""
    p_nl = float(network_loss(p_root, math.fsum(productions_after_curtail), p_load))
    p_nl = float(_guard_losses(np.array([p_nl]), t)[0])
    return float(_energy_eur(p_nl, tariff, tariff.price(t)))


def loss_costs(p_root: np.ndarray, delivered_total: np.ndarray, p_load: np.ndarray,
               tariff: Tariff, steps: slice | np.ndarray = slice(None)) -> np.ndarray:
    """Vectorized :func:`loss_cost` over a run of steps."""
    p_nl = _guard_losses(np.atleast_1d(network_loss(p_root, delivered_total, p_load)), _first(steps))
    return _energy_eur(p_nl, tariff, tariff.prices(steps))


def curtail_cost(available: Sequence[float], delivered: Sequence[float], tariff: Tariff, t: int,
                 unit_ids: Sequence[str] | None = None) -> float:
    """Value of the energy withheld by curtailment at one step, in EUR."""
    available = np.asarray(available, dtype=float)
    delivered = np.asarray(delivered, dtype=float)
    ids = list(unit_ids) if unit_ids is not None else [str(i) for i in range(available.size)]
    for i in range(available.size):
        if not 0 <= delivered[i] <= available[i]:
            raise ValidationError(
                f"unit {ids[i]}: delivered {delivered[i]} W outside [0, {available[i]}] W at t={t}"
            )
    withheld = math.fsum(available - delivered)
    return float(_energy_eur(withheld, tariff, tariff.price(t)))


def curtail_costs(available_total: np.ndarray, delivered_total: np.ndarray, tariff: Tariff,
                  steps: slice | np.ndarray = slice(None)) -> np.ndarray:
    return _energy_eur(np.asarray(available_total) - np.asarray(delivered_total), tariff,
                       tariff.prices(steps))


@dataclass(frozen=True, eq=False)
class CostBreakdown:
    per_step_loss_cost: np.ndarray
    per_step_curtail_cost: np.ndarray
    total: float

    @classmethod
    def from_series(cls, loss: np.ndarray, curtail: np.ndarray) -> CostBreakdown:
        loss = np.asarray(loss, dtype=float)
        curtail = np.asarray(curtail, dtype=float)
        total = math.fsum(np.concatenate([loss, curtail]).tolist())
        return cls(loss, curtail, total)

    @property
    def loss_total(self) -> float:
        return math.fsum(self.per_step_loss_cost.tolist())

    @property
    def curtail_total(self) -> float:
        return math.fsum(self.per_step_curtail_cost.tolist())

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write("t,loss_cost_eur,curtail_cost_eur\n")
            for t, (lc, cc) in enumerate(zip(self.per_step_loss_cost.tolist(),
                                             self.per_step_curtail_cost.tolist())):
                fh.write(f"{t},{lc!r},{cc!r}\n")


def horizon_total(steps: Iterable[tuple[float, float]]) -> CostBreakdown:
    """Fold per-step ``(loss_cost, curtail_cost)`` pairs into a breakdown."""
    pairs = list(steps)
    loss = np.array([p[0] for p in pairs], dtype=float)
    curtail = np.array([p[1] for p in pairs], dtype=float)
    return CostBreakdown.from_series(loss, curtail)


def read_cost_csv(path: str | Path) -> CostBreakdown:
    rows = Path(path).read_text().splitlines()[1:]
    return horizon_total((float(r.split(",")[1]), float(r.split(",")[2])) for r in rows)
