"""Results-table aggregation and rendering of PSDS results."""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

from .config import CONDITIONS
from .errors import ConfigError


def round_half_up(x: float, places: int = 3) -> Decimal:
    """Round the printed value of ``x`` half-up.

    ``x`` is first written with 12 significant digits, so binary noise such
    as 0.7346000000000001 or 0.8354999999999999 does not tip the result.
    """
    return Decimal(f"{x:.12g}").quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)


def fmt(x: float, places: int = 3) -> str:
    return str(round_half_up(x, places))


@dataclass(frozen=True)
class Cell:
    p1: float
    p2: float

    @property
    def p1_plus_p2(self) -> float:
        return self.p1 + self.p2


@dataclass(frozen=True)
class ReportRow:
    variant: str
    cells: dict[str, Cell]
    conditions: tuple[str, ...]

    @property
    def average(self) -> float:
        """Mean of P1+P2 over every condition of the row."""
        return sum(self.cells[c].p1_plus_p2 for c in self.conditions) / len(self.conditions)

    def noisy_average(self) -> float:
        """Mean of P1+P2 over the noisy conditions only."""
        noisy = [c for c in self.conditions if c != "clean"]
        if not noisy:
            raise ConfigError(f"row {self.variant} has no noisy condition")
        return sum(self.cells[c].p1_plus_p2 for c in noisy) / len(noisy)


def aggregate_report(cells: dict, variant: str = "", conditions=CONDITIONS) -> ReportRow:
    """One report row from per-condition ``(P1, P2)`` pairs.

    ``cells`` maps condition names (``clean``, ``snr10`` ...) to pairs or
    :class:`Cell`. Every name in ``conditions`` must be present.
    """
    conditions = tuple(conditions)
    if not conditions:
        raise ConfigError("no conditions to report")
    missing = [c for c in conditions if c not in cells]
    if missing:
        raise ConfigError(f"row {variant!r}: missing condition(s) {missing}")
    out = {}
    for c in conditions:
        v = cells[c]
        out[c] = v if isinstance(v, Cell) else Cell(float(v[0]), float(v[1]))
    return ReportRow(variant, out, conditions)


def _header(conditions) -> list[str]:
    cols = ["variant", "separation", "text_query"]
    for c in conditions:
        cols += [f"{c}_P1", f"{c}_P2", f"{c}_P1+P2"]
    return cols + ["average_P1+P2"]


def render_tsv(rows, labels: dict[str, tuple[str, str]] | None = None) -> str:
    """TSV of the results table, every number rounded half-up to 3 places."""
    rows = list(rows)
    if not rows:
        return ""
    conditions = rows[0].conditions
    labels = labels or {}
    lines = ["\t".join(_header(conditions))]
    for r in rows:
        sep, query = labels.get(r.variant, ("", ""))
        vals = [r.variant, sep, query]
        for c in conditions:
            cell = r.cells[c]
            vals += [fmt(cell.p1), fmt(cell.p2), fmt(cell.p1_plus_p2)]
        vals.append(fmt(r.average))
        lines.append("\t".join(vals))
    return "\n".join(lines) + "\n"


def row_to_dict(r: ReportRow) -> dict:
    d = {
        "variant": r.variant,
        "conditions": list(r.conditions),
        "cells": {
            c: {
                "p1": r.cells[c].p1,
                "p2": r.cells[c].p2,
                "p1_plus_p2": r.cells[c].p1_plus_p2,
                "rounded": {
                    "p1": fmt(r.cells[c].p1),
                    "p2": fmt(r.cells[c].p2),
                    "p1_plus_p2": fmt(r.cells[c].p1_plus_p2),
                },
            }
            for c in r.conditions
        },
        "average": r.average,
        "average_rounded": fmt(r.average),
    }
    if any(c != "clean" for c in r.conditions):
        d["noisy_average"] = r.noisy_average()
    return d
