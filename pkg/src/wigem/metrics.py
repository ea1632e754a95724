"""Error statistics shared by tuning, imputation and reporting.

Errors are ``actual - prediction`` throughout.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

ERROR_CONVENTION = "error = actual - prediction; sd_e uses n-1; r2 = 1 - SS_res/SS_tot"


@dataclass(frozen=True)
class ErrorReport:
    rmse: float
    mae: float
    me: float
    sd_e: float
    r2: float          # NaN when the actuals have zero variance
    n: int

    @property
    def r2_defined(self) -> bool:
        return not math.isnan(self.r2)

    def to_dict(self) -> dict:
        return asdict(self)


def _pair(predictions, actuals) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predictions, dtype=float).ravel()
    a = np.asarray(actuals, dtype=float).ravel()
    if p.shape != a.shape:
        raise ValueError("predictions and actuals must have equal length")
    if p.size == 0:
        raise ValueError("need at least one prediction")
    return p, a


def rmse(predictions, actuals) -> float:
    p, a = _pair(predictions, actuals)
    return float(np.sqrt(np.mean((a - p) ** 2)))


def mae(predictions, actuals) -> float:
    p, a = _pair(predictions, actuals)
    return float(np.mean(np.abs(a - p)))


def error_report(predictions, actuals) -> ErrorReport:
    p, a = _pair(predictions, actuals)
    e = a - p
    n = e.size
    sd_e = float(e.std(ddof=1)) if n > 1 else 0.0
    ss_tot = float(np.sum((a - a.mean()) ** 2))
    r2 = 1.0 - float(np.sum(e ** 2)) / ss_tot if ss_tot > 0 else math.nan
    return ErrorReport(
        rmse=float(np.sqrt(np.mean(e ** 2))),
        mae=float(np.mean(np.abs(e))),
        me=float(e.mean()),
        sd_e=sd_e,
        r2=r2,
        n=n,
    )
