"""Reports derived from trajectory logs, plus atomic file output.

Every number in a summary is recomputed from the trajectory records, so a
report can always be regenerated from its ``trajectory.jsonl``.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .domains.portfolio import compute_metrics

COMPARE_COLUMNS = ("run", "domain", "mode", "returns", "sharpe", "volatility", "mdd",
                   "cumulative_reward", "cumulative_constraint_violation_cost", "violation_steps")


def write_atomic(path, text: str) -> None:
    """Write ``text`` to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def wealth_index(records: list[dict]) -> np.ndarray:
    """Chained wealth starting at 1; episode resets do not break the chain."""
    growth = [r["wealth_after"] / r["wealth_before"] for r in records]
    return np.concatenate([[1.0], np.cumprod(growth)])


def _convergence(records):
    return {
        "steps_not_converged": sum(1 for r in records if not r["converged"]),
        "steps_repaired": sum(1 for r in records if r["repaired"]),
        "mean_inner_iterations": float(np.mean([r["inner_iterations"] for r in records])),
    }


def portfolio_summary(records: list[dict]) -> dict:
    if not records:
        raise ValueError("empty trajectory")
    m = compute_metrics(wealth_index(records))
    viol = [r["violation"] for r in records]
    return {
        **m,
        "cumulative_reward": float(sum(r["reward"] for r in records)),
        "cumulative_constraint_violation_cost": float(sum(viol)),
        "violation_steps": sum(1 for v in viol if v > 0),
        "min_liquidity_residual": float(min(r["liquidity_residual"] for r in records)),
        "steps": len(records),
        **_convergence(records),
    }


def bike_summary(records: list[dict]) -> dict:
    if not records:
        raise ValueError("empty trajectory")
    viol = [r["violation"] for r in records]
    return {
        "cumulative_reward": float(sum(r["reward"] for r in records)),
        "cumulative_constraint_violation_cost": float(sum(viol)),
        "violation_steps": sum(1 for v in viol if v > 0),
        "min_capacity_residual": float(min(r["capacity_residual"] for r in records)),
        "steps": len(records),
        **_convergence(records),
    }


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def portfolio_plot_csv(records: list[dict]) -> str:
    """Per-step wealth, cash share and cash versus cumulative demand."""
    rows = [(r["tau"], r["wealth_before"], r["action"][0], r["liquid_amount"], r["cumulative_demand"])
            for r in records]
    return _csv(("step", "wealth", "liquid_fraction", "liquid_amount", "cumulative_demand"), rows)


def bike_plot_csv(records: list[dict]) -> str:
    cr, cv, rows = 0.0, 0.0, []
    for r in records:
        cr += r["reward"]
        cv += r["violation"]
        rows.append((r["tau"], r["reward"], cr, r["violation"], cv))
    return _csv(("step", "reward", "cumulative_reward", "violation", "cumulative_constraint_violation_cost"), rows)


def compare_rows(reports: list[dict], names: list[str]) -> list[dict]:
    """One row per report, every row with the same columns (blank where not applicable)."""
    if len(reports) < 2:
        raise ValueError(f"need at least 2 run reports to compare, got {len(reports)}")
    rows = []
    for name, rep in zip(names, reports):
        m = rep["metrics"]
        row = {"run": name, "domain": rep["domain"], "mode": rep["mode"]}
        for col in COMPARE_COLUMNS[3:]:
            row[col] = m.get(col, "")
        rows.append(row)
    return rows


def compare_csv(rows: list[dict]) -> str:
    return _csv(COMPARE_COLUMNS, [[row[c] for c in COMPARE_COLUMNS] for row in rows])
