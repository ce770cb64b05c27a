"""Forward diffusion of sequence features and the adaptive horizon.

The closed-form marginal y = sqrt(abar_t) * x + sqrt(1 - abar_t) * eps is
applied to real and generated feature sequences alike.  t = 0 is defined
as the identity (abar_0 = 1), which realises the undiffused branch that
the original discriminator sees.  The live horizon is a real-valued
accumulator moved by sign steps of size C = B * a_i / a_k and floored
wherever an integer timestep is needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import engine


@dataclass
class DiffusionSchedule:
    beta: np.ndarray  # beta[0] unused, beta[1..t_max] linear in [beta0, betaT]
    alpha_bar: np.ndarray  # alpha_bar[0] = 1, strictly decreasing
    t_min: int
    t_max: int
    t_live: float
    d_target: float
    c_step: float

    @property
    def horizon(self) -> int:
        return int(math.floor(self.t_live))


def make_schedule(beta0: float, betaT: float, t_min: int, t_max: int, d_target: float, c_step: float) -> DiffusionSchedule:
    if not (0.0 < beta0 < betaT < 1.0):
        raise ValueError(f"need 0 < beta0 < betaT < 1, got {beta0}, {betaT}")
    if not (0 <= t_min <= t_max) or t_max < 1:
        raise ValueError(f"need 0 <= t_min <= t_max and t_max >= 1, got {t_min}, {t_max}")
    beta = np.zeros(t_max + 1)
    beta[1:] = np.linspace(beta0, betaT, t_max)
    alpha_bar = np.ones(t_max + 1)
    alpha_bar[1:] = np.cumprod(1.0 - beta[1:])
    return DiffusionSchedule(
        beta=beta,
        alpha_bar=alpha_bar,
        t_min=t_min,
        t_max=t_max,
        t_live=float(t_min),
        d_target=d_target,
        c_step=c_step,
    )


def diffuse(x, t: int, schedule: DiffusionSchedule, rng: np.random.Generator):
    """One draw from the timestep-t marginal; t = 0 returns x unchanged.

    Accepts a plain array or an engine Node; the result is differentiable
    w.r.t. x (the noise draw is a constant).
    """
    if not (0 <= t <= schedule.horizon):
        raise ValueError(f"timestep {t} outside [0, {schedule.horizon}]")
    if t == 0:
        return x
    xv = engine.val(x)
    abar = float(schedule.alpha_bar[t])
    eps = rng.standard_normal(xv.shape)
    noise = (math.sqrt(1.0 - abar) * eps).astype(xv.dtype)
    return engine.add(engine.smul(x, math.sqrt(abar)), noise)


def sample_t(schedule: DiffusionSchedule, n: int, rng: np.random.Generator) -> np.ndarray:
    """n i.i.d. uniform timesteps over {0, ..., floor(t_live)}."""
    if n < 1:
        raise ValueError("need n >= 1")
    return rng.integers(0, schedule.horizon + 1, size=n)


def estimate_rd(disc_outputs) -> float:
    """Mean of sign(output - 0.5) over a batch; sign(0) = 0."""
    outs = np.asarray(list(disc_outputs), dtype=np.float64)
    if outs.size == 0:
        raise ValueError("need a nonempty batch of discriminator outputs")
    return float(np.mean(np.sign(outs - 0.5)))


def update_T(schedule: DiffusionSchedule, r_d: float) -> DiffusionSchedule:
    """t_live += sign(r_d - d_target) * C, clamped to [t_min, t_max]."""
    step = float(np.sign(r_d - schedule.d_target)) * schedule.c_step
    schedule.t_live = min(float(schedule.t_max), max(float(schedule.t_min), schedule.t_live + step))
    return schedule
