"""ANOVA gauge repeatability & reproducibility over ensemble spectra.

Parts are frequency bins, operators are regions and repeats are SDE
realizations.  Uses the two-way crossed model with interaction.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError


@dataclass
class GaugeResult:
    repeatability: float
    reproducibility: float
    operator: float
    interaction: float
    part: float
    degenerate: bool = False

    @property
    def total(self) -> float:
        return self.repeatability + self.reproducibility + self.part

    def percentages(self) -> dict[str, float]:
        """Shares of total variance; Operator is a sub-row of Reproducibility."""
        if self.degenerate:
            return {"Repeatability": 0.0, "Reproducibility": 0.0, "Operator": 0.0, "Part-to-Part": 100.0}
        tot = self.total
        return {"Repeatability": 100 * self.repeatability / tot,
                "Reproducibility": 100 * self.reproducibility / tot,
                "Operator": 100 * self.operator / tot,
                "Part-to-Part": 100 * self.part / tot}

    def rows(self) -> list[tuple[str, float, float]]:
        pct = self.percentages()
        var = {"Repeatability": self.repeatability, "Reproducibility": self.reproducibility,
               "Operator": self.operator, "Part-to-Part": self.part}
        return [(k, var[k], pct[k]) for k in var]


def gauge_rr(table) -> GaugeResult:
    """Variance components of a (parts, operators, repeats) table."""
    y = np.asarray(table, dtype=np.float64)
    if y.ndim != 3:
        raise ArgumentError("table must be P x O x K")
    P, O, K = y.shape
    if K < 2:
        raise ArgumentError("need K >= 2 repeats to estimate repeatability")
    if P < 2 or O < 2:
        raise ArgumentError("need at least two parts and two operators")
    if not np.all(np.isfinite(y)):
        raise ArgumentError("table contains non-finite values")
    if np.all(y == y.flat[0]):
        return GaugeResult(0.0, 0.0, 0.0, 0.0, 0.0, degenerate=True)
    cell = y.mean(axis=2)
    grand = cell.mean()
    part_m = cell.mean(axis=1)
    op_m = cell.mean(axis=0)
    ss_p = O * K * float(np.sum((part_m - grand) ** 2))
    ss_o = P * K * float(np.sum((op_m - grand) ** 2))
    inter = cell - part_m[:, None] - op_m[None, :] + grand
    ss_po = K * float(np.sum(inter ** 2))
    ss_e = float(np.sum((y - cell[:, :, None]) ** 2))
    ms_p = ss_p / (P - 1)
    ms_o = ss_o / (O - 1)
    ms_po = ss_po / ((P - 1) * (O - 1))
    ms_e = ss_e / (P * O * (K - 1))
    var_rep = ms_e
    var_po = max(0.0, (ms_po - ms_e) / K)
    var_o = max(0.0, (ms_o - ms_po) / (P * K))
    var_p = max(0.0, (ms_p - ms_po) / (O * K))
    total = var_rep + var_po + var_o + var_p
    return GaugeResult(var_rep, var_o + var_po, var_o, var_po, var_p, degenerate=total == 0.0)


def write_gauge_csv(path, result: GaugeResult) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["Source", "Variance", "% Variance"])
        for name, var, pct in result.rows():
            wr.writerow([name, repr(var), repr(pct)])
