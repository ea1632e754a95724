"""Weighted iterative imputation with constraint projection.

One iteration fits a boosted model on every row, with held (known) rows at
weight 1 and guessed rows at a scheduled lower weight, predicts every row,
bounds the predictions, and projects the guessed rows of each occupational
group back onto the sum-to-one constraint.  Three drivers use it:

* :func:`train_test_tune` picks hyperparameters on an 80/10/10 split of the
  known rows, starting from naive guesses;
* :func:`kfolds_converge` finds the convergence iteration for one SOC
  stream with k-fold mock-missing rows, starting from smart guesses;
* :func:`impute` runs each simulated dataset for exactly the convergence
  iteration count per stream and blends the streams.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Callable, Sequence

import numpy as np

from . import regressor
from .features import Encoder, MappingTable, transform
from .guess import GroupLayout, Kind, guess_all
from .ingest import OccupationalGroup, SurveyRecord, group_records
from .metrics import error_report, mae, rmse
from .regressor import Hyperparams, WeightedDataset
from .simulate import SimulationSet

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.001
DEFAULT_MAX_ITERS = 50


class NonConvergence(RuntimeError):
    pass


# -- corpus ------------------------------------------------------------------

@dataclass
class Corpus:
    """Completed records laid out group by group with encoded features."""

    records: list[SurveyRecord]
    features: np.ndarray
    categorical: list
    layout: GroupLayout
    value: np.ndarray        # NaN where missing
    std_error: np.ndarray    # NaN where absent
    encoder: Encoder

    @classmethod
    def build(cls, records: Sequence[SurveyRecord], table: MappingTable,
              encoder: Encoder | None = None) -> "Corpus":
        groups = group_records(records)
        ordered = [m for g in groups for m in g.members]
        vectors = [transform(r, table) for r in ordered]
        encoder = encoder or Encoder.fit(vectors)
        sizes = [len(g.members) for g in groups]
        layout = GroupLayout(
            offsets=np.concatenate([[0], np.cumsum(sizes)]),
            additive_group=np.array([g.key[1] for g in groups]),
            soc_code=[g.members[0].soc_code for g in groups],
            occupation=[g.key[0] for g in groups],
        )
        return cls(
            records=ordered,
            features=encoder.encode(vectors),
            categorical=encoder.categorical,
            layout=layout,
            value=np.array([np.nan if r.value is None else r.value for r in ordered]),
            std_error=np.array([np.nan if r.std_error is None else r.std_error for r in ordered]),
            encoder=encoder,
        )

    @property
    def known(self) -> np.ndarray:
        return ~np.isnan(self.value)

    @property
    def n_rows(self) -> int:
        return len(self.records)

    def groups(self) -> list[OccupationalGroup]:
        return [OccupationalGroup(self.records[self.layout.rows(g)][0].group_key,
                                  self.records[self.layout.rows(g)])
                for g in range(self.layout.n_groups)]

    def simulated_values(self, sims: SimulationSet, sim: int) -> np.ndarray:
        col = sims.column(sim)
        out = self.value.copy()
        for i in np.flatnonzero(self.known):
            try:
                out[i] = col[self.records[i].key]
            except KeyError:
                raise ValueError(f"simulations lack record {self.records[i].key}") from None
        return out


# -- projection and weights ----------------------------------------------------

def project(group: OccupationalGroup | float, raw_predictions) -> np.ndarray:
    """Clamp predictions for a group's missing members to [0, 1] and rescale
    them so that known values plus predictions sum to one.

    ``group`` may be an occupational group or its known sum directly.
    """
    known_sum = group.known_sum if isinstance(group, OccupationalGroup) else float(group)
    resid = min(1.0, max(0.0, 1.0 - known_sum))
    p = np.clip(np.asarray(raw_predictions, dtype=float), 0.0, 1.0)
    if p.size == 0:
        return p
    total = math.fsum(p)
    if total > 0:
        return p * (resid / total)
    return np.full(p.shape, resid / p.size)


def project_rows(values: np.ndarray, held: np.ndarray, held_values: np.ndarray,
                 layout: GroupLayout) -> np.ndarray:
    """Vectorized :func:`project` over a whole corpus; held rows take ``held_values``."""
    g = layout.row_group
    n = layout.n_groups
    free = ~held
    p = np.clip(values, 0.0, 1.0)
    known_sum = np.bincount(g, weights=np.where(held, held_values, 0.0), minlength=n)
    resid = np.clip(1.0 - known_sum, 0.0, 1.0)
    pred_sum = np.bincount(g, weights=np.where(free, p, 0.0), minlength=n)
    n_free = np.bincount(g, weights=free.astype(float), minlength=n)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(pred_sum > 0, resid / pred_sum, 0.0)
        even = np.where(n_free > 0, resid / n_free, 0.0)
    adjusted = np.where(pred_sum[g] > 0, p * scale[g], even[g])
    return np.where(held, held_values, adjusted)


def group_residuals(held: np.ndarray, held_values: np.ndarray, layout: GroupLayout) -> np.ndarray:
    known_sum = np.bincount(layout.row_group, weights=np.where(held, held_values, 0.0),
                            minlength=layout.n_groups)
    return np.clip(1.0 - known_sum, 0.0, 1.0)


@dataclass(frozen=True)
class WeightSchedule:
    kind: str
    start: float
    step: float
    cap: float


KNOWN = WeightSchedule("Known", 1.0, 0.0, 1.0)
NAIVE_TRAIN_TEST = WeightSchedule("NaiveTrainTest", 0.25, 0.05, 0.75)
NAIVE_KFOLDS = WeightSchedule("NaiveKFolds", 0.0, 0.0, 0.0)
SMART = WeightSchedule("Smart", 0.5, 0.05, 0.75)


def schedule_weight(schedule: WeightSchedule, iteration: int) -> float:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if schedule.kind == "Known":
        return 1.0
    if schedule.kind == "NaiveKFolds":
        return 0.0
    return min(schedule.cap, schedule.start + schedule.step * iteration)


@dataclass
class Schedules:
    """Which schedule governs each guess kind."""

    naive: WeightSchedule = NAIVE_KFOLDS
    smart: WeightSchedule = SMART

    def weights(self, kinds: np.ndarray, held: np.ndarray, iteration: int) -> np.ndarray:
        smart = (kinds == Kind.SMART) | (kinds == Kind.KNOWN_COPIED)
        w = np.where(smart, schedule_weight(self.smart, iteration), schedule_weight(self.naive, iteration))
        return np.where(held, 1.0, w)


TRAIN_TEST_SCHEDULES = Schedules(naive=NAIVE_TRAIN_TEST, smart=NAIVE_TRAIN_TEST)
KFOLDS_SCHEDULES = Schedules(naive=NAIVE_KFOLDS, smart=SMART)


# -- one iteration ---------------------------------------------------------------

@dataclass
class Problem:
    """A corpus view: which rows are held at which values, and how free rows started."""

    corpus: Corpus
    held: np.ndarray
    held_values: np.ndarray
    kinds: np.ndarray
    schedules: Schedules
    bound_halfwidth: float = 1.0

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        se = np.nan_to_num(self.corpus.std_error, nan=0.0)
        v = self.held_values
        resid = group_residuals(self.held, v, self.corpus.layout)[self.corpus.layout.row_group]
        lower = np.where(self.held, np.clip(v - self.bound_halfwidth * se, 0.0, 1.0), 0.0)
        upper = np.where(self.held, np.clip(v + self.bound_halfwidth * se, 0.0, 1.0), resid)
        return lower, upper


FitFn = Callable[[WeightedDataset, Hyperparams], "regressor.Model"]


def step(problem: Problem, state: np.ndarray, iteration: int, params: Hyperparams,
         fit_fn: FitFn = regressor.fit) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run model iteration ``iteration`` (>= 1) from the previous state.

    Returns (projected state, bounded predictions, weights used).  The first
    fit uses each schedule's starting weight.
    """
    c = problem.corpus
    data = np.where(problem.held, problem.held_values, state)
    weights = problem.schedules.weights(problem.kinds, problem.held, iteration - 1)
    lower, upper = problem.bounds()
    ds = WeightedDataset(c.features, data, weights, c.categorical, lower, upper)
    model = fit_fn(ds, params)
    raw = model.predict(c.features)
    bounded = np.clip(raw, lower, upper)
    projected = project_rows(bounded, problem.held, problem.held_values, c.layout)
    return projected, bounded, weights


@dataclass
class IterationTrace:
    """Per-iteration states; iteration 0 is the initial guess."""

    predictions: list[np.ndarray] = field(default_factory=list)
    bounded: list[np.ndarray | None] = field(default_factory=list)
    weights: list[np.ndarray | None] = field(default_factory=list)
    rmse: list[float] = field(default_factory=list)

    def append(self, state, bounded=None, weights=None, err=None):
        self.predictions.append(state)
        self.bounded.append(bounded)
        self.weights.append(weights)
        if err is not None:
            self.rmse.append(err)

    def __len__(self) -> int:
        return len(self.predictions)


def run_fixed(problem: Problem, start: np.ndarray, n_iters: int, params: Hyperparams,
              fit_fn: FitFn = regressor.fit) -> IterationTrace:
    trace = IterationTrace()
    trace.append(start)
    state = start
    for i in range(1, n_iters + 1):
        state, bounded, w = step(problem, state, i, params, fit_fn)
        trace.append(state, bounded, w)
    return trace


def _convergence_loop(n_streams, step_all, rmse_of, threshold, max_iters, label):
    """Shared stopping rule: stop once the RMSE improvement drops below
    ``threshold``; the convergence iteration is the last one whose
    improvement was at least ``threshold``."""
    errs = [rmse_of(0)]
    i = 1
    while True:
        if i > max_iters:
            raise NonConvergence(f"{label}: no convergence within {max_iters} iterations")
        step_all(i)
        errs.append(rmse_of(i))
        logger.info("%s iteration %d rmse %.9g", label, i, errs[-1])
        if errs[i - 1] - errs[i] < threshold:
            return i - 1, errs
        i += 1


# -- train-test tuning -------------------------------------------------------------

@dataclass
class TuneCandidate:
    params: Hyperparams
    convergence_iteration: int
    test_rmse: list[float]
    validation_mae: float
    trace: IterationTrace


@dataclass
class TuneResult:
    best: Hyperparams
    candidates: list[TuneCandidate]


def split_known(corpus: Corpus, seed: int, fractions=(0.8, 0.1, 0.1)):
    known = np.flatnonzero(corpus.known)
    perm = np.random.default_rng(seed).permutation(known)
    n = len(perm)
    n_train = int(round(fractions[0] * n))
    n_test = int(round(fractions[1] * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_test]), np.sort(perm[n_train + n_test:])


def train_test_tune(corpus: Corpus, grid: Sequence[Hyperparams], split_seed: int = 0, *,
                    threshold: float = DEFAULT_THRESHOLD, max_iters: int = DEFAULT_MAX_ITERS,
                    bound_halfwidth: float = 1.0, fit_fn: FitFn = regressor.fit) -> TuneResult:
    """Select hyperparameters by validation MAE at each grid point's convergence iteration."""
    if not grid:
        raise ValueError("hyperparameter grid is empty")
    _, test, valid = split_known(corpus, split_seed)
    if len(test) == 0 or len(valid) == 0:
        raise ValueError("too few known values for an 80/10/10 split")
    held = corpus.known.copy()
    held[test] = False
    held[valid] = False
    masked = np.where(held, corpus.value, np.nan)
    init = guess_all(masked, corpus.layout, None)
    problem = Problem(corpus, held, np.where(held, corpus.value, np.nan), init.kinds,
                      TRAIN_TEST_SCHEDULES, bound_halfwidth)
    actual = corpus.value

    candidates = []
    for params in grid:
        trace = IterationTrace()
        trace.append(init.values)

        def step_all(i):
            state, bounded, w = step(problem, trace.predictions[-1], i, params, fit_fn)
            trace.append(state, bounded, w)

        conv, errs = _convergence_loop(
            1, step_all, lambda i: rmse(trace.predictions[i][test], actual[test]),
            threshold, max_iters, f"tune[{params.label()}]")
        trace.rmse = errs
        v_mae = mae(trace.predictions[conv][valid], actual[valid])
        candidates.append(TuneCandidate(params, conv, errs, v_mae, trace))
    best = min(candidates, key=lambda c: c.validation_mae)
    return TuneResult(best.params, candidates)


# -- k-folds convergence -------------------------------------------------------------

@dataclass
class KFoldsRun:
    soc_digits: int
    convergence_iteration: int
    folds: list[np.ndarray]          # row indices of each fold
    fold_traces: list[IterationTrace]
    pooled: list[np.ndarray]         # per iteration: prediction for every known row (test fold)
    rmse: list[float]
    known_rows: np.ndarray
    actual: np.ndarray               # known values, aligned with ``pooled``

    def predictions_at(self, iteration: int) -> np.ndarray:
        return self.pooled[min(iteration, len(self.pooled) - 1)]

    @property
    def converged_predictions(self) -> np.ndarray:
        return self.pooled[self.convergence_iteration]


def make_folds(corpus: Corpus, k: int, seed: int) -> list[np.ndarray]:
    known = np.flatnonzero(corpus.known)
    if len(known) < k:
        raise ValueError(f"need at least {k} known values for {k} folds")
    perm = np.random.default_rng(seed).permutation(known)
    return [np.sort(f) for f in np.array_split(perm, k)]


def kfolds_converge(corpus: Corpus, params: Hyperparams, soc_digits: int, k: int = 10,
                    seed: int = 0, *, threshold: float = DEFAULT_THRESHOLD,
                    max_iters: int = DEFAULT_MAX_ITERS, bound_halfwidth: float = 1.0,
                    fit_fn: FitFn = regressor.fit) -> KFoldsRun:
    folds = make_folds(corpus, k, seed)
    known_rows = np.flatnonzero(corpus.known)
    pos = np.full(corpus.n_rows, -1)
    pos[known_rows] = np.arange(len(known_rows))
    actual = corpus.value[known_rows]

    problems, traces = [], []
    for f in folds:
        held = corpus.known.copy()
        held[f] = False
        masked = np.where(held, corpus.value, np.nan)
        init = guess_all(masked, corpus.layout, soc_digits)
        problems.append(Problem(corpus, held, masked, init.kinds, KFOLDS_SCHEDULES, bound_halfwidth))
        tr = IterationTrace()
        tr.append(init.values)
        traces.append(tr)

    pooled: list[np.ndarray] = []

    def pool(i):
        out = np.empty(len(known_rows))
        for f, tr in zip(folds, traces):
            out[pos[f]] = tr.predictions[i][f]
        pooled.append(out)
        return out

    def step_all(i):
        for prob, tr in zip(problems, traces):
            state, bounded, w = step(prob, tr.predictions[-1], i, params, fit_fn)
            tr.append(state, bounded, w)

    def rmse_of(i):
        return rmse(pool(i), actual)

    conv, errs = _convergence_loop(k, step_all, rmse_of, threshold, max_iters,
                                   f"kfolds[soc{soc_digits}]")
    return KFoldsRun(soc_digits, conv, folds, traces, pooled, errs, known_rows, actual)


# -- blending ---------------------------------------------------------------------

@dataclass
class BlendSpec:
    ratio_a: float
    convergence_iter_a: int
    convergence_iter_b: int | None = None
    soc_a: int = 2
    soc_b: int | None = 3

    def __post_init__(self):
        if not 0.0 <= self.ratio_a <= 1.0:
            raise ValueError("blend ratio must lie in [0, 1]")


BLEND_GRID = np.arange(101) / 100.0


def blend_curve(preds_a, preds_b, actuals) -> np.ndarray:
    a = np.asarray(preds_a, dtype=float)
    b = np.asarray(preds_b, dtype=float)
    return np.array([rmse(r * a + (1.0 - r) * b, actuals) for r in BLEND_GRID])


def blend(preds_a, preds_b, actuals, convergence_iter_a: int = 0,
          convergence_iter_b: int | None = 0) -> BlendSpec:
    """RMSE-minimizing mixing ratio on a 0.01 grid; ties go to the ratio nearest 0.5."""
    curve = blend_curve(preds_a, preds_b, actuals)
    best = curve.min()
    candidates = np.flatnonzero(curve == best)
    pick = candidates[np.argmin(np.abs(BLEND_GRID[candidates] - 0.5))]
    return BlendSpec(float(BLEND_GRID[pick]), convergence_iter_a, convergence_iter_b)


def mix(ratio: float, a: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    if b is None:
        return a
    return ratio * a + (1.0 - ratio) * b


@dataclass
class KFoldsReport:
    runs: list[KFoldsRun]
    spec: BlendSpec
    curve: np.ndarray | None
    blended_rmse: list[float]
    blended_errors: list   # ErrorReport per iteration

    @property
    def converged_rmse(self) -> dict[str, float]:
        out = {f"soc{r.soc_digits}": r.rmse[r.convergence_iteration] for r in self.runs}
        a = self.runs[0].converged_predictions
        b = self.runs[1].converged_predictions if len(self.runs) > 1 else None
        out["blended"] = rmse(mix(self.spec.ratio_a, a, b), self.runs[0].actual)
        return out


def kfolds_report(corpus: Corpus, params: Hyperparams, soc_levels: Sequence[int] = (2, 3), k: int = 10,
                  seed: int = 0, **kw) -> KFoldsReport:
    if not 1 <= len(soc_levels) <= 2:
        raise ValueError("one or two SOC streams are supported")
    runs = [kfolds_converge(corpus, params, s, k, seed, **kw) for s in soc_levels]
    actual = runs[0].actual
    a = runs[0]
    if len(runs) == 2:
        b = runs[1]
        spec = blend(a.converged_predictions, b.converged_predictions, actual,
                     a.convergence_iteration, b.convergence_iteration)
        spec.soc_a, spec.soc_b = a.soc_digits, b.soc_digits
        curve = blend_curve(a.converged_predictions, b.converged_predictions, actual)
        n = min(len(a.pooled), len(b.pooled))
        blended = [mix(spec.ratio_a, a.pooled[i], b.pooled[i]) for i in range(n)]
    else:
        spec = BlendSpec(1.0, a.convergence_iteration, None, a.soc_digits, None)
        curve = None
        blended = list(a.pooled)
    return KFoldsReport(
        runs, spec, curve,
        [rmse(p, actual) for p in blended],
        [error_report(p, actual) for p in blended],
    )


# -- final imputation -------------------------------------------------------------

@dataclass
class CI:
    mean: float
    lower: float
    upper: float
    degenerate: bool
    n: int


def confidence_interval(predictions, level: float = 0.95, method: str = "normal",
                        scale: str = "sd") -> CI:
    """Interval for one missing value from its per-simulation predictions.

    ``method`` is ``normal`` (mean +/- z*s), ``t`` (t quantile, n-1 df) or
    ``percentile``; ``scale`` is ``sd`` or ``se`` (s / sqrt(n)) for the two
    symmetric methods.  Bounds are truncated to [0, 1].  Zero spread or a
    single simulation gives a degenerate interval with NaN bounds.
    """
    p = np.asarray(predictions, dtype=float)
    if p.size == 0:
        raise ValueError("need at least one prediction")
    n = p.size
    if np.all(p == p[0]):
        # zero spread; report the common value rather than a rounded mean
        return CI(float(p[0]), math.nan, math.nan, True, n)
    mean = float(p.mean())
    sd = float(p.std(ddof=1))
    alpha = 1.0 - level
    if method == "percentile":
        lo, hi = np.percentile(p, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    else:
        if method == "normal":
            q = NormalDist().inv_cdf(1 - alpha / 2)
        elif method == "t":
            from scipy.stats import t as student_t
            q = float(student_t.ppf(1 - alpha / 2, n - 1))
        else:
            raise ValueError(f"unknown CI method {method!r}")
        if scale == "sd":
            half = q * sd
        elif scale == "se":
            half = q * sd / math.sqrt(n)
        else:
            raise ValueError(f"unknown CI scale {scale!r}")
        lo, hi = mean - half, mean + half
    return CI(mean, float(min(1.0, max(0.0, lo))), float(min(1.0, max(0.0, hi))), False, n)


@dataclass
class ImputationRun:
    spec: BlendSpec
    missing_rows: np.ndarray
    traces: list[list[IterationTrace]]      # [sim][stream]
    final: np.ndarray                       # missing rows x sims, blended
    initial: np.ndarray                     # missing rows x sims, blended iteration-0 guesses
    final_full: list[np.ndarray]            # per sim: full blended vector
    known_predictions: list[np.ndarray | None]  # per sim: blended bounded predictions on known rows
    known_actuals: list[np.ndarray]         # per sim: simulated known values

    @property
    def n_sims(self) -> int:
        return self.final.shape[1]

    def intervals(self, level=0.95, method="normal", scale="sd") -> list[CI]:
        return [confidence_interval(row, level, method, scale) for row in self.final]


def impute(corpus: Corpus, sims: SimulationSet, params: Hyperparams, spec: BlendSpec, *,
           n_sims: int | None = None, bound_halfwidth: float = 1.0,
           fit_fn: FitFn = regressor.fit) -> ImputationRun:
    """Iterate each simulation exactly the k-folds convergence count per stream."""
    if sims.values.shape[1] != sims.n_sims or (n_sims is not None and sims.n_sims != n_sims):
        raise ValueError(f"simulation count mismatch: expected {n_sims}, got {sims.values.shape[1]}")
    streams = [(spec.soc_a, spec.convergence_iter_a)]
    if spec.soc_b is not None:
        streams.append((spec.soc_b, spec.convergence_iter_b))
    held = corpus.known
    missing_rows = np.flatnonzero(~held)
    known_rows = np.flatnonzero(held)

    traces, finals, inits, full, kpred, kact = [], [], [], [], [], []
    for s in range(sims.n_sims):
        values = corpus.simulated_values(sims, s)
        per_stream = []
        for soc, n_iter in streams:
            init = guess_all(values, corpus.layout, soc)
            prob = Problem(corpus, held, values, init.kinds, KFOLDS_SCHEDULES, bound_halfwidth)
            per_stream.append(run_fixed(prob, init.values, n_iter, params, fit_fn))
            logger.info("impute sim %d soc%d done (%d iterations)", s, soc, n_iter)
        a = per_stream[0]
        b = per_stream[1] if len(per_stream) > 1 else None
        final = mix(spec.ratio_a, a.predictions[-1], b.predictions[-1] if b else None)
        init0 = mix(spec.ratio_a, a.predictions[0], b.predictions[0] if b else None)
        ka = a.bounded[-1]
        kb = b.bounded[-1] if b else None
        if ka is None or (b is not None and kb is None):
            kp = None
        else:
            kp = mix(spec.ratio_a, ka, kb)[known_rows]
        traces.append(per_stream)
        finals.append(final[missing_rows])
        inits.append(init0[missing_rows])
        full.append(final)
        kpred.append(kp)
        kact.append(values[known_rows])
    return ImputationRun(
        spec=spec,
        missing_rows=missing_rows,
        traces=traces,
        final=np.column_stack(finals) if finals else np.zeros((len(missing_rows), 0)),
        initial=np.column_stack(inits) if inits else np.zeros((len(missing_rows), 0)),
        final_full=full,
        known_predictions=kpred,
        known_actuals=kact,
    )


def model_uncertainty(run: ImputationRun) -> tuple[float, float]:
    """Mean over simulations of (MAE, ME) of model predictions on known rows."""
    maes, mes = [], []
    for pred, act in zip(run.known_predictions, run.known_actuals):
        if pred is None or len(act) == 0:
            continue
        rep = error_report(pred, act)
        maes.append(rep.mae)
        mes.append(rep.me)
    if not maes:
        return math.nan, math.nan
    return float(np.mean(maes)), float(np.mean(mes))


def default_grid(seed: int = 0) -> list[Hyperparams]:
    return [Hyperparams(nrounds=n, max_depth=d, eta=e, seed=seed)
            for n in (100, 200) for d in (6, 14) for e in (0.3, 0.6)]
