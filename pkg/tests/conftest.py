import io
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from wigem import engine, ingest, simulate, synth
from wigem.features import load_mapping

FIXTURES = Path(__file__).parent / "fixtures"

# lines printed by the acceptance module, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def completed_records(sv: synth.SyntheticSurvey) -> list[ingest.SurveyRecord]:
    parsed = ingest.parse_survey(io.StringIO(sv.extract_csv()), sv.schema)
    done = ingest.complete_groups(parsed, sv.table.level_catalog())
    return ingest.flatten(ingest.complete_n_minus_1(ingest.group_records(done)))


def truth_of(sv: synth.SyntheticSurvey) -> dict[tuple, float]:
    return {(r["occupation"], r["additive_group"], r["element"], r["level"]): float(r["value"])
            for r in sv.truth_rows}


@pytest.fixture(scope="session")
def fixture_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def reaching_table():
    return load_mapping(FIXTURES / "reaching.yaml")


@pytest.fixture(scope="session")
def survey():
    """The standard synthetic fixture: 50 occupations, 10 requirements, 40% missing, seed 7."""
    return synth.generate(n_occupations=50, n_requirements=10, missing_rate=0.4, seed=7)


@pytest.fixture(scope="session")
def corpus(survey):
    return engine.Corpus.build(completed_records(survey), survey.table)


@pytest.fixture(scope="session")
def small_survey():
    return synth.generate(n_occupations=20, n_requirements=4, missing_rate=0.4, seed=3)


@pytest.fixture(scope="session")
def small_corpus(small_survey):
    return engine.Corpus.build(completed_records(small_survey), small_survey.table)


DESK_PARAMS = engine.Hyperparams(nrounds=100, max_depth=6, eta=0.3)


@pytest.fixture(scope="session")
def pipeline(survey, corpus):
    """Tune, k-folds and impute once on the standard fixture, with timings."""
    t = {}
    start = time.perf_counter()
    tuned = engine.train_test_tune(corpus, engine.default_grid(), split_seed=0)
    t["tune"] = time.perf_counter() - start

    start = time.perf_counter()
    report = engine.kfolds_report(corpus, tuned.best, (2, 3), k=10, seed=0)
    t["kfolds"] = time.perf_counter() - start

    start = time.perf_counter()
    sims = simulate.simulate(corpus.groups(), 10, 0)
    t["simulate"] = time.perf_counter() - start

    start = time.perf_counter()
    run = engine.impute(corpus, sims, tuned.best, report.spec, n_sims=10)
    t["impute"] = time.perf_counter() - start
    return SimpleNamespace(tuned=tuned, report=report, sims=sims, run=run, timings=t,
                           truth=truth_of(survey))


def _run_cli(out: Path):
    from wigem.cli import main
    assert main(["synth", "--out", str(out)]) == 0
    cfg = str(out / "config.yaml")
    for stage in ("ingest", "tune", "kfolds", "impute", "analyze", "evaluate"):
        assert main([stage, "--config", cfg]) == 0, stage
    return out


@pytest.fixture(scope="session")
def cli_run(tmp_path_factory):
    """A complete CLI run directory on the standard synthetic fixture."""
    return _run_cli(tmp_path_factory.mktemp("run_a"))


@pytest.fixture(scope="session")
def cli_run_twin(tmp_path_factory):
    return _run_cli(tmp_path_factory.mktemp("run_b"))


def group_sums(values: np.ndarray, layout) -> np.ndarray:
    return np.bincount(layout.row_group, weights=values, minlength=layout.n_groups)
