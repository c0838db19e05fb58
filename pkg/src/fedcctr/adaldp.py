"""Adaptive local differential privacy for client gradients.

Clipping, Gaussian perturbation with a geometrically decaying noise scale,
and a Renyi-DP accountant for the subsampled Gaussian mechanism.

Two accountant chains are exposed:

* :func:`rdp_cost` (canonical): sensitivity ``2*theta`` gives a Gaussian
  mechanism RDP of ``2*zeta*theta**2/sigma**2``, then subsampling amplification.
* :func:`rdp_cost_maintext`: the same amplification formula with exponent
  ``(zeta-1)*theta**2/sigma**2``.

Two budget modes are exposed:

* ``decrement``: the configured epsilon is consumed directly by per-round RDP
  costs at the fixed order ``zeta``.  This treats epsilon as an RDP budget,
  which is not the same unit as an (epsilon, delta)-DP guarantee.
* ``rdp-convert``: costs are summed and the total is converted to
  (epsilon, delta)-DP before comparing against the budget.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq

MODES = ("decrement", "rdp-convert")
ACCOUNTANTS = ("appendix", "maintext")
DEFAULT_ORDERS = (1.5, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0, 12.0, 16.0, 20.0, 24.0, 32.0, 48.0, 64.0)


class PrivacyConfigError(ValueError):
    pass


class StopParticipation:
    """Signal that a client's budget is spent; no gradient accompanies it."""

    _instance: Optional["StopParticipation"] = None

    def __new__(cls) -> "StopParticipation":
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "StopParticipation"


STOP = StopParticipation()


# ---------------------------------------------------------------------------
# Mechanism pieces
# ---------------------------------------------------------------------------

def clip_gradient(g: np.ndarray, theta: float) -> np.ndarray:
    """Scale ``g`` by ``1 / max(1, ||g|| / theta)``."""
    if not theta > 0:
        raise PrivacyConfigError(f"clipping threshold must be > 0, got {theta}")
    norm = float(np.linalg.norm(g))
    factor = max(1.0, norm / theta)
    return g if factor == 1.0 else g / factor


def add_noise(g: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise PrivacyConfigError(f"noise std must be >= 0, got {sigma}")
    if sigma == 0:
        return g.copy()
    return g + sigma * rng.standard_normal(g.shape)


def gaussian_rdp(zeta: float, theta: float, sigma: float) -> float:
    """RDP of the Gaussian mechanism on clipped gradients: ``zeta * (2 theta)^2 / (2 sigma^2)``."""
    return 2.0 * zeta * theta * theta / (sigma * sigma)


def _amplified(zeta: float, exponent: float, rho: float) -> float:
    """``ln(1 + rho^2 (e^exponent - 1)) / (zeta - 1)`` without overflow."""
    if rho == 0.0:
        return 0.0
    r2 = rho * rho
    if exponent < 700.0:
        val = math.log1p(r2 * math.expm1(exponent))
    elif rho >= 1.0:
        val = exponent
    else:
        # ln((1 - rho^2) + rho^2 e^x) = x + 2 ln rho + ln(1 + (1 - rho^2) e^{-x} / rho^2)
        val = exponent + 2.0 * math.log(rho) + math.log1p((1.0 - r2) * math.exp(-exponent) / r2)
    return val / (zeta - 1.0)


def _check_cost_args(zeta: float, sigma: float, rho: float) -> None:
    if not zeta > 1:
        raise PrivacyConfigError(f"RDP order must be > 1, got {zeta}")
    if not sigma > 0:
        raise PrivacyConfigError(f"sigma must be > 0 for accounting, got {sigma}")
    if not 0.0 <= rho <= 1.0:
        raise PrivacyConfigError(f"sampling ratio must be in [0, 1], got {rho}")


def rdp_cost(zeta: float, theta: float, sigma: float, rho: float) -> float:
    """Per-round RDP cost of the subsampled Gaussian mechanism (canonical chain)."""
    _check_cost_args(zeta, sigma, rho)
    eps_gm = gaussian_rdp(zeta, theta, sigma)
    if rho == 1.0:
        return eps_gm
    if math.isinf(eps_gm):
        return math.inf if rho > 0 else 0.0
    return _amplified(zeta, (zeta - 1.0) * eps_gm, rho)


def rdp_cost_maintext(zeta: float, theta: float, sigma: float, rho: float) -> float:
    """Per-round cost with exponent ``(zeta-1) theta^2 / sigma^2``."""
    _check_cost_args(zeta, sigma, rho)
    base = theta * theta / (sigma * sigma)
    if rho == 1.0:
        return base
    if math.isinf(base):
        return math.inf if rho > 0 else 0.0
    return _amplified(zeta, (zeta - 1.0) * base, rho)


def convert_rdp_to_dp(cumulative_rdp: float, zeta: float, delta: float) -> float:
    """(epsilon, delta)-DP epsilon implied by an order-``zeta`` RDP total."""
    if not zeta > 1:
        raise PrivacyConfigError(f"RDP order must be > 1, got {zeta}")
    if not 0.0 < delta <= 1.0:
        raise PrivacyConfigError(f"delta must be in (0, 1], got {delta}")
    return cumulative_rdp - math.log(delta) / (zeta - 1.0)


def best_order(theta: float, sigmas: Sequence[float], rho: float, delta: float,
               orders: Iterable[float] = DEFAULT_ORDERS, accountant: str = "appendix") -> Tuple[float, float]:
    """Order minimizing the converted epsilon of a noise schedule; returns ``(zeta, epsilon)``."""
    cost = rdp_cost if accountant == "appendix" else rdp_cost_maintext
    best = (math.nan, math.inf)
    for z in orders:
        eps = convert_rdp_to_dp(sum(cost(z, theta, s, rho) for s in sigmas), z, delta)
        if eps < best[1]:
            best = (float(z), eps)
    return best


def schedule_cost(sigma_0: float, decay: float, rounds: int, theta: float, rho: float, zeta: float,
                  accountant: str = "appendix") -> float:
    """Total RDP of releases at rounds ``1..rounds`` with ``sigma_t = sigma_0 * decay**t``."""
    cost = rdp_cost if accountant == "appendix" else rdp_cost_maintext
    return sum(cost(zeta, theta, sigma_0 * decay ** t, rho) for t in range(1, rounds + 1))


def matched_static_sigma(sigma_0: float, decay: float, rounds: int, theta: float, rho: float, zeta: float,
                         accountant: str = "appendix") -> float:
    """Constant noise scale whose ``rounds`` releases cost the same total RDP as the decaying schedule."""
    if rounds < 1 or decay == 1.0:
        return sigma_0
    cost = rdp_cost if accountant == "appendix" else rdp_cost_maintext
    target = schedule_cost(sigma_0, decay, rounds, theta, rho, zeta, accountant)
    lo, hi = sigma_0 * decay ** rounds, sigma_0
    return float(brentq(lambda s: rounds * cost(zeta, theta, s, rho) - target, lo, hi, xtol=1e-15, rtol=1e-14))


# ---------------------------------------------------------------------------
# Stateful accountant
# ---------------------------------------------------------------------------

@dataclass
class PrivacyState:
    sigma_0: float
    epsilon_0: float
    delta: float = 1e-5
    zeta: float = 2.0
    rho: float = 0.01
    theta: float = 1.0
    decay: float = 0.997
    mode: str = "decrement"
    accountant: str = "appendix"
    sigma_t: float = field(default=math.nan)
    epsilon_remaining: float = field(default=math.nan)
    cumulative_rdp: float = 0.0
    charged: float = 0.0
    round: int = 0
    stopped: bool = False

    def __post_init__(self) -> None:
        if math.isnan(self.sigma_t):
            self.sigma_t = self.sigma_0
        if math.isnan(self.epsilon_remaining):
            self.epsilon_remaining = self.epsilon_0
        self.validate()
        if self.epsilon_remaining <= 0:
            self.stopped = True

    def validate(self) -> None:
        if self.mode not in MODES:
            raise PrivacyConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.accountant not in ACCOUNTANTS:
            raise PrivacyConfigError(f"accountant must be one of {ACCOUNTANTS}, got {self.accountant!r}")
        if not self.zeta > 1:
            raise PrivacyConfigError(f"zeta must be > 1, got {self.zeta}")
        if not 0.0 < self.rho <= 1.0:
            raise PrivacyConfigError(f"rho must be in (0, 1], got {self.rho}")
        if not self.theta > 0:
            raise PrivacyConfigError(f"theta must be > 0, got {self.theta}")
        if not 0.0 < self.decay <= 1.0:
            raise PrivacyConfigError(f"decay must be in (0, 1], got {self.decay}")
        if not 0.0 < self.delta <= 1.0:
            raise PrivacyConfigError(f"delta must be in (0, 1], got {self.delta}")
        if self.sigma_0 < 0:
            raise PrivacyConfigError(f"sigma_0 must be >= 0, got {self.sigma_0}")

    def round_cost(self) -> float:
        """Cost of releasing one gradient at the current noise scale."""
        if self.sigma_t == 0.0:
            return math.inf
        fn = rdp_cost if self.accountant == "appendix" else rdp_cost_maintext
        return fn(self.zeta, self.theta, self.sigma_t, self.rho)


def decay_sigma(state: PrivacyState) -> PrivacyState:
    """Advance one round: ``sigma_{t+1} = sigma_0 * R^{t+1}``."""
    t = state.round + 1
    # closed form keeps the schedule free of accumulated rounding
    return replace(state, sigma_t=state.sigma_0 * state.decay ** t, round=t)


@dataclass
class TraceRow:
    round: int
    sigma: float
    per_round_cost: float
    cumulative_rdp: float
    epsilon_remaining: float
    stopped: bool


def adaldp_step(g: np.ndarray, state: PrivacyState, rng: np.random.Generator,
                trace: Optional[List[TraceRow]] = None):
    """Clip, perturb and account for one gradient release.

    Returns ``(noisy_gradient, state')`` or ``(STOP, state')`` when the release
    would exhaust the budget; in that case nothing is charged and the state is
    marked stopped for good.
    """
    if state.stopped:
        return STOP, state
    clipped = clip_gradient(g, state.theta) if math.isfinite(state.theta) else g
    noisy = add_noise(clipped, state.sigma_t, rng)
    cost = state.round_cost()

    if math.isinf(state.epsilon_0):
        # unlimited budget: account only
        new = replace(state, charged=state.charged + cost, cumulative_rdp=state.cumulative_rdp + cost)
        exhausted = False
    elif state.mode == "decrement":
        remaining = state.epsilon_remaining - cost
        exhausted = not remaining > 0
        new = replace(state, epsilon_remaining=remaining, charged=state.charged + cost,
                      cumulative_rdp=state.cumulative_rdp + cost)
    else:
        cum = state.cumulative_rdp + cost
        projected = convert_rdp_to_dp(cum, state.zeta, state.delta)
        exhausted = not projected <= state.epsilon_0
        new = replace(state, cumulative_rdp=cum, charged=state.charged + cost,
                      epsilon_remaining=state.epsilon_0 - projected)

    if exhausted:
        stopped = replace(state, stopped=True)
        if trace is not None:
            trace.append(TraceRow(state.round, state.sigma_t, cost, state.cumulative_rdp,
                                  state.epsilon_remaining, True))
        return STOP, stopped
    if trace is not None:
        trace.append(TraceRow(state.round, state.sigma_t, cost, new.cumulative_rdp,
                              new.epsilon_remaining, False))
    return noisy, decay_sigma(new)


def write_trace_csv(path: Path, rows: Iterable[Tuple[str, TraceRow]]) -> None:
    """Accountant trace rows keyed by client id."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["client", "round", "sigma", "per_round_cost", "cumulative_rdp", "epsilon_remaining", "stopped"])
        for client, r in rows:
            w.writerow([client, r.round, repr(r.sigma), repr(r.per_round_cost), repr(r.cumulative_rdp),
                        repr(r.epsilon_remaining), int(r.stopped)])


def noise_generator(seed: int, client: int, round_: int, stream: int = 0) -> np.random.Generator:
    """Counter-based (Philox) generator keyed on ``(seed, client, round, stream)``."""
    ss = np.random.SeedSequence([seed & 0xFFFFFFFF, client, round_, stream])
    return np.random.Generator(np.random.Philox(ss))
