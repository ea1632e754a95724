"""Initial guesses for missing members of occupational groups.

The naive guess spreads a group's residual mass evenly over its missing
members.  The smart guess borrows the shape of the best-known distribution
for the same requirement within a SOC group.  Known members are partitioned
against that donor distribution:

    K    known in both        m_a  missing in the job, known in the donor
    k_a  known in the job     M    missing in both

With S = (1 - sum K_job) / (1 - sum K_donor), the m_a members share
S * sum(donor over m_a) equally, clamped to the job's residual, and the M
members share whatever residual is left.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ingest import OccupationalGroup

DENOM_EPS = 1e-12


class Kind(enum.IntEnum):
    KNOWN = 0
    NAIVE = 1
    SMART = 2
    KNOWN_COPIED = 3


class NoDonor(LookupError):
    """No occupation in the SOC group has a known value for the requirement."""


@dataclass(frozen=True)
class GuessAssignment:
    index: int
    value: float
    kind: Kind


@dataclass
class Guess:
    values: np.ndarray   # every member filled; known members unchanged
    kinds: np.ndarray    # Kind code per member

    def assignments(self) -> list[GuessAssignment]:
        return [GuessAssignment(i, float(v), Kind(k))
                for i, (v, k) in enumerate(zip(self.values, self.kinds)) if k != Kind.KNOWN]


def _as_values(group) -> np.ndarray:
    if isinstance(group, OccupationalGroup):
        return np.array([np.nan if m.value is None else m.value for m in group.members])
    return np.asarray(group, dtype=float)


def _residual(values: np.ndarray) -> float:
    known = values[~np.isnan(values)]
    return min(1.0, max(0.0, 1.0 - math.fsum(known)))


def naive_guess(group) -> Guess:
    """Residual mass divided equally among the missing members."""
    values = _as_values(group).copy()
    missing = np.isnan(values)
    kinds = np.where(missing, Kind.NAIVE, Kind.KNOWN).astype(np.int8)
    n_missing = int(missing.sum())
    if n_missing:
        values[missing] = _residual(values) / n_missing
    return Guess(values, kinds)


def best_distribution(distributions) -> np.ndarray:
    """Reference distribution from the members with the most known values.

    ``distributions`` is an (occupations x levels) array with NaN for missing
    values.  Tied members are averaged level by level over the union of
    their known levels and rescaled to their average known mass (1 when the
    tied members are complete).  Levels outside the support are NaN.
    """
    mat = np.atleast_2d(np.asarray(distributions, dtype=float))
    counts = (~np.isnan(mat)).sum(axis=1)
    best = counts.max(initial=0)
    if best == 0:
        raise NoDonor("no known values in the SOC group for this requirement")
    tied = mat[counts == best]
    if len(tied) == 1:
        return tied[0].copy()
    known = ~np.isnan(tied)
    support = known.any(axis=0)
    ref = np.full(mat.shape[1], np.nan)
    ref[support] = np.nansum(tied[:, support], axis=0) / known[:, support].sum(axis=0)
    target = min(1.0, float(np.mean([math.fsum(row[~np.isnan(row)]) for row in tied])))
    total = math.fsum(ref[support])
    if total > 0:
        ref[support] *= target / total
    return ref


def smart_guess(job, best: np.ndarray) -> Guess:
    """Guess the job's missing members from a donor distribution on the same levels."""
    values = _as_values(job).copy()
    best = np.asarray(best, dtype=float)
    if best.shape != values.shape:
        raise ValueError("job and donor must share the same level set")
    job_known = ~np.isnan(values)
    donor_known = ~np.isnan(best)
    missing = ~job_known
    kinds = np.where(job_known, Kind.KNOWN, Kind.NAIVE).astype(np.int8)
    if not missing.any():
        return Guess(values, kinds)

    if not job_known.any():
        copied = missing & donor_known
        rest = missing & ~donor_known
        values[copied] = best[copied]
        kinds[copied] = Kind.KNOWN_COPIED
        copied_sum = math.fsum(values[copied])
        remainder = 1.0 - copied_sum
        if copied_sum > 0 and (remainder < 0 or not rest.any()):
            values[copied] /= copied_sum
            remainder = 0.0
        if rest.any():
            values[rest] = max(0.0, remainder) / int(rest.sum())
        return Guess(values, kinds)

    both = job_known & donor_known
    if not both.any():
        return naive_guess(values)
    denom = 1.0 - math.fsum(best[both])
    if denom <= DENOM_EPS:
        return naive_guess(values)
    m_a = missing & donor_known
    m_both = missing & ~donor_known
    if not m_a.any():
        return naive_guess(values)

    scale = (1.0 - math.fsum(values[both])) / denom
    residual = _residual(values)
    share = min(residual, max(0.0, scale * math.fsum(best[m_a])))
    if not m_both.any():
        share = residual
    values[m_a] = share / int(m_a.sum())
    kinds[m_a] = Kind.SMART
    if m_both.any():
        values[m_both] = max(0.0, residual - share) / int(m_both.sum())
        kinds[m_both] = Kind.SMART
    return Guess(values, kinds)


@dataclass
class GroupLayout:
    """Contiguous row blocks, one per occupational group."""

    offsets: np.ndarray            # n_groups + 1
    additive_group: np.ndarray     # per group
    soc_code: Sequence[str]        # per group
    occupation: Sequence[str]      # per group

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.int64)
        sizes = np.diff(self.offsets)
        self.row_group = np.repeat(np.arange(len(sizes)), sizes)

    @property
    def n_groups(self) -> int:
        return len(self.offsets) - 1

    @property
    def n_rows(self) -> int:
        return int(self.offsets[-1])

    def rows(self, g: int) -> slice:
        return slice(int(self.offsets[g]), int(self.offsets[g + 1]))


def guess_all(values: np.ndarray, layout: GroupLayout, soc_digits: int | None = None) -> Guess:
    """Guess every missing row of a corpus.

    With ``soc_digits`` set, donors are searched among occupations sharing
    that SOC prefix; otherwise every group gets the naive guess.
    """
    values = np.asarray(values, dtype=float)
    out = values.copy()
    kinds = np.where(np.isnan(values), Kind.NAIVE, Kind.KNOWN).astype(np.int8)

    if soc_digits is None:
        buckets = {(g,): [g] for g in range(layout.n_groups)}
    else:
        buckets: dict[tuple, list[int]] = {}
        for g in range(layout.n_groups):
            key = (layout.soc_code[g][:soc_digits], int(layout.additive_group[g]))
            buckets.setdefault(key, []).append(g)

    for members in buckets.values():
        blocks = [values[layout.rows(g)] for g in members]
        if not any(np.isnan(b).any() for b in blocks):
            continue
        best = None
        if soc_digits is not None:
            try:
                best = best_distribution(np.vstack(blocks))
            except NoDonor:
                best = None
        for g, block in zip(members, blocks):
            if not np.isnan(block).any():
                continue
            res = naive_guess(block) if best is None else smart_guess(block, best)
            sl = layout.rows(g)
            out[sl] = res.values
            kinds[sl] = res.kinds
    return Guess(out, kinds)
