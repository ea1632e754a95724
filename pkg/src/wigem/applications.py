"""Analytics on completed population distributions.

Distributions combine known estimates with mean imputations.  From them we
compute requirement overlap between pairs of occupations, the expected
level of effort (ELE) per requirement, ELE standardized across occupations,
and the occupation-by-occupation correlation of ELE vectors.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .features import MappingTable, soc_prefix
from .ingest import SurveyRecord, group_records

logger = logging.getLogger(__name__)

SUM_TOLERANCE = 1e-6

# additive groups drawn as one box in requirement-variability plots
DEFAULT_POOLING = {24: "LC", 25: "LC", 26: "LC", 27: "LC", 16: "R", 18: "R"}


class LevelMismatch(ValueError):
    pass


@dataclass(frozen=True)
class PopulationDistribution:
    occupation: str
    soc_code: str
    additive_group: int
    requirement: str
    levels: tuple[tuple[str, str], ...]    # (element, level) per weight
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w)
        if w.shape != (len(self.levels),):
            raise ValueError("one weight per level is required")
        if np.any(np.isnan(w)) or np.any(w < 0.0) or np.any(w > 1.0):
            raise ValueError(f"weights of {self.occupation!r}/{self.additive_group} must lie in [0, 1]")
        total = math.fsum(w)
        if abs(total - 1.0) > SUM_TOLERANCE:
            raise ValueError(f"weights of {self.occupation!r}/{self.additive_group} sum to {total}, not 1")


def overlap(a: PopulationDistribution, b: PopulationDistribution) -> float:
    """Probability that random workers from both occupations share a level."""
    if a.additive_group != b.additive_group or a.levels != b.levels:
        raise LevelMismatch(
            f"cannot overlap {a.occupation!r}/{a.additive_group} with {b.occupation!r}/{b.additive_group}: "
            "level sets differ")
    return math.fsum(a.weights * b.weights)


def distributions(records: Iterable[SurveyRecord], means: Mapping[tuple, float],
                  table: MappingTable, *, renormalize: bool = True) -> list[PopulationDistribution]:
    """Fill each completed group from known values and mean imputations.

    ``means`` maps record keys of missing records to their mean prediction.
    Fully known groups whose published values do not add to one (rounding in
    the source) are rescaled when ``renormalize`` is set.
    """
    out = []
    rescaled = 0
    for g in group_records(records):
        w = []
        for m in g.members:
            if m.value is not None:
                w.append(m.value)
            else:
                try:
                    w.append(means[m.key])
                except KeyError:
                    raise KeyError(f"no imputation for missing record {m.key}") from None
        w = np.clip(np.array(w, dtype=float), 0.0, 1.0)
        total = math.fsum(w)
        if renormalize and abs(total - 1.0) > SUM_TOLERANCE and total > 0:
            w = w / total
            rescaled += 1
        first = g.members[0]
        requirement = table[(first.element, first.level)].requirement
        out.append(PopulationDistribution(g.key[0], first.soc_code, g.key[1], requirement,
                                          tuple(m.level_key for m in g.members), w))
    if rescaled:
        logger.warning("rescaled %d distributions that did not sum to one", rescaled)
    return out


@dataclass(frozen=True)
class OverlapRow:
    occupation_a: str
    occupation_b: str
    additive_group: int
    requirement: str
    overlap: float


def overlap_table(dists: Sequence[PopulationDistribution]) -> list[OverlapRow]:
    """Overlap for every unordered occupation pair and every shared additive group."""
    by_group: dict[int, dict[str, PopulationDistribution]] = {}
    for d in dists:
        by_group.setdefault(d.additive_group, {})[d.occupation] = d
    rows = []
    for ag in sorted(by_group):
        occ = by_group[ag]
        for a, b in itertools.combinations(sorted(occ), 2):
            rows.append(OverlapRow(a, b, ag, occ[a].requirement, overlap(occ[a], occ[b])))
    rows.sort(key=lambda r: (r.occupation_a, r.occupation_b, r.additive_group))
    return rows


@dataclass(frozen=True)
class OverlapSummary:
    occupation_a: str
    occupation_b: str
    mean: float
    sd: float
    n: int


def summarize_overlap(rows: Sequence[OverlapRow], weights: Mapping[int, float] | None = None) -> list[OverlapSummary]:
    """Weighted mean and sd of overlap over requirements, per occupation pair.

    ``weights`` maps additive groups to non-negative weights; absent groups
    weigh 1.  The sd uses reliability weights, which reduces to the usual
    n-1 sample sd under equal weights.
    """
    pairs: dict[tuple[str, str], list[OverlapRow]] = {}
    for r in rows:
        pairs.setdefault((r.occupation_a, r.occupation_b), []).append(r)
    out = []
    for (a, b), rs in sorted(pairs.items()):
        x = np.array([r.overlap for r in rs])
        w = np.array([1.0 if weights is None else float(weights.get(r.additive_group, 1.0)) for r in rs])
        if np.any(w < 0):
            raise ValueError("requirement weights must be non-negative")
        v1 = w.sum()
        if v1 == 0:
            out.append(OverlapSummary(a, b, math.nan, math.nan, len(rs)))
            continue
        mean = float(np.sum(w * x) / v1)
        denom = v1 - np.sum(w * w) / v1
        sd = float(math.sqrt(np.sum(w * (x - mean) ** 2) / denom)) if denom > 0 else math.nan
        out.append(OverlapSummary(a, b, mean, sd, len(rs)))
    return out


# -- expected level of effort ------------------------------------------------------

def ele(dist: PopulationDistribution, table: MappingTable) -> float:
    """Sum over levels of population share times frequency times intensity."""
    terms = [w * table[lv].frequency * table[lv].intensity for lv, w in zip(dist.levels, dist.weights)]
    return math.fsum(terms)


@dataclass
class ELETable:
    """ELE per occupation (rows) and additive group (columns)."""

    occupations: list[str]
    soc_codes: list[str]
    additive_groups: list[int]
    requirements: list[str]
    values: np.ndarray       # NaN where an occupation lacks the group


def ele_table(dists: Sequence[PopulationDistribution], table: MappingTable) -> ELETable:
    occs = sorted({d.occupation for d in dists})
    soc = {d.occupation: d.soc_code for d in dists}
    groups = sorted({d.additive_group for d in dists})
    req = {d.additive_group: d.requirement for d in dists}
    r_of = {o: i for i, o in enumerate(occs)}
    c_of = {g: j for j, g in enumerate(groups)}
    values = np.full((len(occs), len(groups)), np.nan)
    for d in dists:
        values[r_of[d.occupation], c_of[d.additive_group]] = ele(d, table)
    return ELETable(occs, [soc[o] for o in occs], groups, [req[g] for g in groups], values)


@dataclass(frozen=True)
class Standardized:
    z: np.ndarray
    degenerate: bool


def standardize_ele(values) -> Standardized:
    """(E - mean) / sd with the n-1 sd; zero spread gives all-zero scores flagged degenerate."""
    e = np.asarray(values, dtype=float)
    if e.size < 2 or not np.all(np.isfinite(e)):
        raise ValueError("need at least two finite ELE values")
    sd = float(e.std(ddof=1))
    if sd == 0.0:
        return Standardized(np.zeros_like(e), True)
    return Standardized((e - e.mean()) / sd, False)


@dataclass
class StandardizedTable:
    base: ELETable
    z: np.ndarray             # NaN where the ELE is absent
    degenerate: list[bool]    # per additive group


def standardize_table(t: ELETable) -> StandardizedTable:
    z = np.full(t.values.shape, np.nan)
    flags = []
    for j in range(t.values.shape[1]):
        col = t.values[:, j]
        ok = np.isfinite(col)
        if ok.sum() < 2:
            flags.append(True)
            continue
        s = standardize_ele(col[ok])
        z[ok, j] = s.z
        flags.append(s.degenerate)
    return StandardizedTable(t, z, flags)


def pooled_scores(st: StandardizedTable, pooling: Mapping[int, str] | None = None) -> list[tuple[str, str, int, float]]:
    """Long-format (label, occupation, additive group, z) rows for box plots.

    Groups named in ``pooling`` share a label; the rest keep their requirement name.
    """
    pooling = DEFAULT_POOLING if pooling is None else pooling
    rows = []
    for j, ag in enumerate(st.base.additive_groups):
        label = pooling.get(ag, st.base.requirements[j])
        for i, occ in enumerate(st.base.occupations):
            if np.isfinite(st.z[i, j]):
                rows.append((label, occ, ag, float(st.z[i, j])))
    rows.sort(key=lambda r: (r[0], r[2], r[1]))
    return rows


# -- occupation correlation ---------------------------------------------------------

@dataclass
class CorrelationMatrix:
    occupations: list[str]     # sorted by SOC2 code, then name
    soc2: list[str]
    matrix: np.ndarray         # NaN where undefined
    undefined: np.ndarray      # bool per occupation: zero-variance vector


def occupation_correlation(occupations: Sequence[str], soc_codes: Sequence[str], vectors) -> CorrelationMatrix:
    """Pearson correlation between occupations' requirement-indexed vectors."""
    x = np.asarray(vectors, dtype=float)
    if x.ndim != 2 or x.shape[0] != len(occupations) or len(soc_codes) != len(occupations):
        raise ValueError("one vector and one SOC code per occupation is required")
    if not np.all(np.isfinite(x)):
        raise ValueError("vectors must share the requirement index and be finite")
    soc2 = [soc_prefix(s, 2) for s in soc_codes]
    order = sorted(range(len(occupations)), key=lambda i: (soc2[i], occupations[i]))
    x = x[order]
    centred = x - x.mean(axis=1, keepdims=True)
    norm = np.sqrt(np.sum(centred ** 2, axis=1))
    undefined = norm == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = centred / norm[:, None]
    m = np.clip(unit @ unit.T, -1.0, 1.0)
    m[undefined, :] = np.nan
    m[:, undefined] = np.nan
    np.fill_diagonal(m, np.where(undefined, np.nan, 1.0))
    return CorrelationMatrix([occupations[i] for i in order], [soc2[i] for i in order], m, undefined)


def mean_correlations(cm: CorrelationMatrix) -> tuple[float, float]:
    """(mean within-SOC2, mean between-SOC2) correlation over distinct, defined pairs."""
    within, between = [], []
    n = len(cm.occupations)
    for i in range(n):
        for j in range(i + 1, n):
            v = cm.matrix[i, j]
            if np.isnan(v):
                continue
            (within if cm.soc2[i] == cm.soc2[j] else between).append(v)
    return (float(np.mean(within)) if within else math.nan,
            float(np.mean(between)) if between else math.nan)
