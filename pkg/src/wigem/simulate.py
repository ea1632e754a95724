"""Beta-shock simulation of known estimates.

Within each occupational group the largest known value is shocked with
draws from a beta distribution matching its mean and (clamped) standard
error.  The draws are standardized in-sample so the simulated values
reproduce the mean and standard deviation exactly.  The opposite shock is
spread over the remaining known members in proportion to their size, which
keeps every group's known total fixed in every simulation.

Because the others cannot go negative, a shocked value may not exceed the
group's known total.  When plain standardization would cross that bound
the draws go through a clipped affine map whose two coefficients are solved
so the moments still hold.  If even that cannot reach the target spread
(little other known mass to trade against), the record is flagged and gets
the widest feasible spread.

Random streams are keyed on (seed, group key), so results do not depend on
the order in which groups are processed.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import brentq

from .ingest import OccupationalGroup

CLAMP_FRACTION = 0.95


class InfeasibleMoments(ValueError):
    pass


def clamp_sigma(mu: float, sigma_e: float) -> float:
    """Cap a standard error at 95% of mu*(1-mu) when it exceeds that bound."""
    bound = mu * (1.0 - mu)
    if sigma_e <= bound:
        return sigma_e
    return CLAMP_FRACTION * bound


def beta_params(mu: float, sigma: float) -> tuple[float, float]:
    """Moment-matched beta shape parameters for mean ``mu`` and sd ``sigma``."""
    if not 0.0 < mu < 1.0:
        raise InfeasibleMoments(f"mean {mu} must lie strictly inside (0, 1)")
    var = sigma * sigma
    if var == 0.0:
        return math.inf, math.inf
    if var >= mu * (1.0 - mu):
        raise InfeasibleMoments(f"variance {var} >= mu*(1-mu) = {mu * (1 - mu)}; clamp sigma first")
    nu = mu * (1.0 - mu) / var - 1.0
    return mu * nu, (1.0 - mu) * nu


def group_stream(seed: int, key: tuple) -> np.random.Generator:
    """PCG64 stream determined by the seed and the group key only."""
    tag = zlib.crc32("\x1f".join(map(str, key)).encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, tag])))


def _widest(draws: np.ndarray, mean: float, upper: float) -> np.ndarray:
    """The most spread-out sample with the given mean in [0, upper], ranked like the draws.

    Largest draws sit at ``upper``, one takes the remainder, the rest are 0.
    """
    n = draws.size
    total = n * mean
    k = min(n - 1, int(math.floor(total / upper)))
    out = np.zeros(n)
    order = np.argsort(-draws, kind="stable")
    out[order[:k]] = upper
    out[order[k]] = total - k * upper
    return out


def standardize_bounded(draws: np.ndarray, mean: float, sd: float, upper: float) -> tuple[np.ndarray, bool]:
    """Map draws monotonically to values with sample mean ``mean`` and sample
    sd ``sd`` (n-1 divisor), all inside [0, upper].

    The plain linear standardization is used when it already fits.  Otherwise
    values are ``clip(a + b * z, 0, upper)`` with ``a`` and ``b`` solved so the
    moments still hold exactly.  Returns (values, used_bounded_form); when the
    target sd is out of reach the widest feasible spread is returned.
    """
    if not 0.0 < mean < upper:
        return np.full(draws.shape, mean), True
    z = (draws - draws.mean()) / draws.std(ddof=1)
    linear = mean + sd * z
    if linear.min() >= 0.0 and linear.max() <= upper:
        return linear, False

    def at(b):
        lo, hi = -b * z.max() - 1.0, upper - b * z.min() + 1.0
        a = brentq(lambda a: np.clip(a + b * z, 0.0, upper).mean() - mean, lo, hi,
                   xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
        return np.clip(a + b * z, 0.0, upper)

    def gap(b):
        return at(b).std(ddof=1) - sd

    # past b_max at most one value sits strictly inside the bounds
    spacing = np.diff(np.sort(z))
    spacing = spacing[spacing > 0]
    b_max = 4.0 * upper / spacing.min() if spacing.size else 4.0 * upper
    b_hi = sd
    while True:
        b_hi = min(2.0 * b_hi, b_max)
        if gap(b_hi) >= 0.0:
            break
        if b_hi >= b_max:
            return _widest(draws, mean, upper), True
    b = brentq(gap, sd, b_hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    return at(b), True


def offset_members(values: np.ndarray, top: int, shocked) -> np.ndarray:
    """Known members after shocking ``values[top]`` to ``shocked``.

    The other known members give up (or absorb) the shock in proportion to
    their size, so the known total is unchanged.  ``shocked`` may be a
    vector of simulated values; the result then has one column per value.
    """
    values = np.asarray(values, dtype=float)
    shocked = np.asarray(shocked, dtype=float)
    others = ~np.isnan(values)
    others[top] = False
    others_sum = math.fsum(values[others])
    total = values[top] + others_sum
    out = np.repeat(values[:, None], shocked.size, axis=1)
    out[top] = shocked.ravel()
    # x_i - (x_i / others_sum) * (shock - x_top): the others share what is left
    out[others] = values[others][:, None] * ((total - shocked.ravel()) / others_sum)[None, :]
    return out if shocked.ndim else out[:, 0]


@dataclass
class GroupSimulation:
    values: np.ndarray            # members x sims, NaN where the member is missing
    shocked: int | None           # member index of the shocked value
    sigma: float                  # clamped sd applied to the shocked value
    range_limited: bool = False   # the bounded standardization was needed


def _members(group) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(group, OccupationalGroup):
        vals = np.array([np.nan if m.value is None else m.value for m in group.members])
        ses = np.array([np.nan if m.std_error is None else m.std_error for m in group.members])
        return vals, ses
    vals, ses = group
    return np.asarray(vals, dtype=float), np.asarray(ses, dtype=float)


def simulate_group(group, n_sims: int, seed: int, key: tuple | None = None) -> GroupSimulation:
    """Simulate one group.

    ``group`` is an :class:`OccupationalGroup` or a ``(values, std_errors)``
    pair of arrays with NaN marking missing entries.
    """
    vals, ses = _members(group)
    if key is None:
        key = group.key if isinstance(group, OccupationalGroup) else ()
    out = np.tile(vals[:, None], (1, n_sims))
    known = ~np.isnan(vals)
    if not known.any():
        return GroupSimulation(out, None, 0.0)
    kvals = np.where(known, vals, -np.inf)
    top = int(np.argmax(kvals))
    x_top = vals[top]
    se = 0.0 if np.isnan(ses[top]) else float(ses[top])
    sigma = clamp_sigma(x_top, se)
    others = known.copy()
    others[top] = False
    others_sum = math.fsum(vals[others])
    # nothing can absorb an opposite shock when the other known mass vanishes
    if n_sims < 2 or sigma <= 0.0 or x_top <= 0.0 or x_top + others_sum <= x_top:
        return GroupSimulation(out, None, sigma)

    a, b = beta_params(x_top, sigma)
    draws = group_stream(seed, key).beta(a, b, size=n_sims)
    sd = draws.std(ddof=1)
    if not sd > 0.0:
        return GroupSimulation(out, None, sigma)
    total = x_top + others_sum
    # the other members absorb the opposite shock, so the shocked value may
    # not exceed the group's known total
    shocked, limited = standardize_bounded(draws, x_top, sigma, min(1.0, total))
    out = offset_members(vals, top, shocked)
    return GroupSimulation(out, top, sigma, limited)


@dataclass
class SimulationSet:
    n_sims: int
    seed: int
    keys: list[tuple]             # record keys, in input order
    values: np.ndarray            # records x sims
    shocked: np.ndarray           # bool per record
    sigma: np.ndarray             # clamped sd per record (NaN when not shocked)
    range_limited: np.ndarray     # bool per record

    def column(self, sim: int) -> dict[tuple, float]:
        return dict(zip(self.keys, self.values[:, sim]))


def simulate(groups: Iterable[OccupationalGroup], n_sims: int = 10, seed: int = 0) -> SimulationSet:
    keys, blocks, shocked, sigma, limited = [], [], [], [], []
    for g in groups:
        res = simulate_group(g, n_sims, seed)
        keys.extend(m.key for m in g.members)
        blocks.append(res.values)
        flag = np.zeros(len(g.members), dtype=bool)
        sig = np.full(len(g.members), np.nan)
        lim = np.zeros(len(g.members), dtype=bool)
        if res.shocked is not None:
            flag[res.shocked] = True
            sig[res.shocked] = res.sigma
            lim[res.shocked] = res.range_limited
        shocked.append(flag)
        sigma.append(sig)
        limited.append(lim)
    values = np.vstack(blocks) if blocks else np.zeros((0, n_sims))
    cat = (lambda parts, dt: np.concatenate(parts) if parts else np.zeros(0, dtype=dt))
    return SimulationSet(n_sims, seed, keys, values, cat(shocked, bool), cat(sigma, float), cat(limited, bool))


def clamp_tally(groups: Sequence[OccupationalGroup]) -> tuple[int, int]:
    """(clamped, inside-limit) counts over each group's largest known value with a standard error."""
    clamped = inside = 0
    for g in groups:
        known = [m for m in g.members if m.value is not None]
        if not known:
            continue
        top = max(known, key=lambda m: m.value)  # first max wins
        if top.std_error is None:
            continue
        if top.std_error <= top.value * (1.0 - top.value):
            inside += 1
        else:
            clamped += 1
    return clamped, inside
