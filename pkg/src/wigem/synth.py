"""Synthetic survey generator with retained ground truth.

Occupations are nested in 3-digit SOC families inside 2-digit SOC groups.
For each requirement, an occupation's level distribution is a discretized
bump centred on a latent score built from a 2-digit effect, a 3-digit effect
and an occupation effect, plus Dirichlet noise.  Occupations in the same
SOC family therefore share requirement profiles, which is what smart guessing
and the SOC2/SOC3 blend exploit.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .features import MappingTable, MappingEntry
from .ingest import Schema

SOC2_CODES = ("11", "13", "15", "17", "19", "21", "23", "25", "27", "29", "31",
              "33", "35", "37", "39", "41", "43", "45", "47", "49", "51", "53")

FREQUENCY_LEVELS = ("NOT PRESENT", "SELDOM", "OCCASIONALLY", "FREQUENTLY", "CONSTANTLY")
FREQUENCY_VALUES = (0.0, 2.0, 33.0, 67.0, 100.0)
CATEGORY_CYCLE = ("PHY", "ENV", "EDU")


@dataclass
class SyntheticSurvey:
    table: MappingTable
    extract_rows: list[dict]
    truth_rows: list[dict]
    schema: Schema

    def extract_csv(self) -> str:
        buf = io.StringIO()
        cols = [self.schema.occupation, self.schema.soc_code, self.schema.element, self.schema.level,
                self.schema.estimate_kind, self.schema.estimate_type, self.schema.unit,
                self.schema.additive_group, self.schema.value]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        w.writerows(self.extract_rows)
        return buf.getvalue()

    def truth_csv(self) -> str:
        buf = io.StringIO()
        cols = ["occupation", "soc_code", "additive_group", "element", "level", "value", "status"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        w.writerows(self.truth_rows)
        return buf.getvalue()


def _requirements(n_requirements: int, rng: np.random.Generator) -> list[MappingEntry]:
    entries = []
    for r in range(n_requirements):
        ag = 10 + r
        name = f"Requirement {r + 1:02d}"
        category = CATEGORY_CYCLE[r % len(CATEGORY_CYCLE)]
        style = r % 3
        if style == 0:
            # frequency-graded: how often the demand occurs
            for lv, f in zip(FREQUENCY_LEVELS, FREQUENCY_VALUES):
                entries.append(MappingEntry(ag, name, lv, name, f, 0.0 if f == 0 else 100.0, category))
        elif style == 1:
            n_levels = int(rng.integers(3, 8))
            for j, x in enumerate(np.linspace(0, 100, n_levels)):
                entries.append(MappingEntry(ag, name, f"LEVEL {j + 1}", name, 100.0, round(float(x), 1), category))
        else:
            entries.append(MappingEntry(ag, name, "NO", name, 0.0, 0.0, category))
            entries.append(MappingEntry(ag, name, "YES", name, 100.0, 100.0, category))
    return entries


def generate(n_occupations: int = 50, n_requirements: int = 10, missing_rate: float = 0.4,
             se_scale: float = 0.1, seed: int = 7, unlisted_fraction: float = 0.5,
             noise_concentration: float = 200.0) -> SyntheticSurvey:
    """Build a synthetic extract.

    ``se_scale`` sets standard errors to ``se_scale * sqrt(p (1 - p))``.  A
    ``unlisted_fraction`` of the missing estimates is dropped from the extract
    entirely; the rest appear with an empty value.
    """
    if not 0.0 <= missing_rate < 1.0:
        raise ValueError("missing_rate must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    table = MappingTable(_requirements(n_requirements, rng))
    catalog = table.level_catalog()

    n_soc2 = max(2, min(len(SOC2_CODES), n_occupations // 10))
    soc2_codes = SOC2_CODES[:n_soc2]
    occupations = []
    for i in range(n_occupations):
        s2 = soc2_codes[i % n_soc2]
        s3 = s2 + str((i // n_soc2) % 2 + 1)
        occupations.append((f"Occupation {i + 1:03d}", f"{s3}{i:03d}"[:6].ljust(6, "0"), s2, s3))

    soc3_codes = sorted({o[3] for o in occupations})
    eff2 = {s: rng.normal(0.0, 1.0, n_requirements) for s in soc2_codes}
    eff3 = {s: rng.normal(0.0, 0.5, n_requirements) for s in soc3_codes}

    schema = Schema()
    extract, truth = [], []
    for occ, soc, s2, s3 in occupations:
        occ_eff = rng.normal(0.0, 0.3, n_requirements)
        for r, (ag, levels) in enumerate(catalog.items()):
            n_levels = len(levels)
            theta = eff2[s2][r] + eff3[s3][r] + occ_eff[r]
            centre = (n_levels - 1) / (1.0 + np.exp(-1.5 * theta))
            bump = np.exp(-0.5 * ((np.arange(n_levels) - centre) / 0.8) ** 2)
            bump /= bump.sum()
            p = rng.dirichlet(bump * noise_concentration + 1e-3)
            miss = rng.random(n_levels) < missing_rate
            unlisted = rng.random(n_levels) < unlisted_fraction
            for (element, level), v, m, u in zip(levels, p, miss, unlisted):
                truth.append({"occupation": occ, "soc_code": soc, "additive_group": ag,
                              "element": element, "level": level, "value": repr(float(v)),
                              "status": "missing" if m else "known"})
                if m and u:
                    continue
                base = {schema.occupation: occ, schema.soc_code: soc, schema.element: element,
                        schema.level: level, schema.estimate_type: schema.percent_type,
                        schema.unit: schema.percent_unit, schema.additive_group: ag}
                extract.append({**base, schema.estimate_kind: schema.estimate_label,
                                schema.value: "" if m else repr(float(v) * 100.0)})
                if not m:
                    se = se_scale * np.sqrt(v * (1.0 - v))
                    extract.append({**base, schema.estimate_kind: schema.std_error_label,
                                    schema.value: repr(float(se) * 100.0)})
    return SyntheticSurvey(table, extract, truth, schema)
