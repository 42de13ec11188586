"""Hard constraints by gradient manipulation.

When a constraint is violated and the loss gradient disagrees with the
constraint gradient (negative inner product), the update direction is
corrected by the minimum-norm vector ``m`` that makes its inner product with
the constraint gradient exactly ``delta``. The pull ``delta`` grows
geometrically while the constraint stays violated and resets once it is met.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .hwmodel import METRIC_NAMES

DEFAULT_DELTA0 = 1e-3
DEFAULT_P = 1e-2


class ConstraintError(ValueError):
    pass


@dataclass(frozen=True)
class ConstraintSpec:
    metric: str
    target: float
    delta: float = DEFAULT_DELTA0
    delta0: float = DEFAULT_DELTA0
    p: float = DEFAULT_P

    def __post_init__(self):
        if self.metric not in METRIC_NAMES:
            raise ConstraintError(f"unknown metric {self.metric!r}")
        if not (np.isfinite(self.target) and self.target > 0):
            raise ConstraintError(f"target must be finite and positive, got {self.target}")
        if self.delta0 <= 0 or self.p <= 0:
            raise ConstraintError("delta0 and p must be positive")
        if self.delta < self.delta0:
            raise ConstraintError(f"delta {self.delta} below delta0 {self.delta0}")

    def __str__(self) -> str:
        return f"{self.metric}<={self.target!r}"


_CONSTRAINT_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z_0-9]*)\s*<=\s*([-+0-9.eE]+)\s*$")


def parse_constraints(text: str, delta0: float = DEFAULT_DELTA0,
                      p: float = DEFAULT_P) -> list[ConstraintSpec]:
    """Parse ``"latency_ms<=16.6,energy_mJ<=0.5"``; errors name the offending token."""
    specs = []
    for token in text.split(","):
        m = _CONSTRAINT_RE.match(token)
        if not m:
            raise ConstraintError(f"cannot parse constraint {token!r}")
        try:
            target = float(m.group(2))
            specs.append(ConstraintSpec(m.group(1), target, delta0, delta0, p))
        except (ValueError, ConstraintError) as exc:
            raise ConstraintError(f"bad constraint {token!r}: {exc}") from exc
    if len({s.metric for s in specs}) != len(specs):
        raise ConstraintError(f"duplicate metric in {text!r}")
    return specs


def hinge(t: float, target: float) -> float:
    return max(t - target, 0.0)


def hinge_subgradient(t: float, target: float) -> float:
    return 1.0 if t > target else 0.0


def multi_hinge(ts: Sequence[float], targets: Sequence[float]) -> float:
    if len(ts) != len(targets) or not ts:
        raise ValueError(f"need equal, nonzero lengths, got {len(ts)} and {len(targets)}")
    return sum(hinge(t, T) for t, T in zip(ts, targets))


@dataclass
class GradientBundle:
    g_loss: np.ndarray
    g_const: np.ndarray
    dot: float
    manipulated: bool
    m: np.ndarray

    @property
    def g(self) -> np.ndarray:
        """The update direction actually used."""
        return self.g_loss + self.m if self.manipulated else self.g_loss


def manipulate(g_loss: np.ndarray, g_const: np.ndarray, violated: bool,
               delta: float) -> GradientBundle:
    g_loss = np.asarray(g_loss, dtype=np.float64)
    g_const = np.asarray(g_const, dtype=np.float64)
    if g_loss.shape != g_const.shape:
        raise ValueError(f"gradient shapes differ: {g_loss.shape} vs {g_const.shape}")
    dot = float(g_loss @ g_const)
    norm2 = float(g_const @ g_const)
    if violated and norm2 == 0.0:
        # a zero pull while violated means the constraint path is disconnected
        raise ConstraintError("constraint violated with zero constraint gradient; direction undefined")
    if not violated or dot >= 0.0:
        return GradientBundle(g_loss, g_const, dot, False, np.zeros_like(g_loss))
    m = ((delta - dot) / norm2) * g_const
    return GradientBundle(g_loss, g_const, dot, True, m)


def delta_step(spec: ConstraintSpec, satisfied: bool) -> ConstraintSpec:
    if satisfied:
        return replace(spec, delta=spec.delta0)
    return replace(spec, delta=spec.delta * (1.0 + spec.p))
