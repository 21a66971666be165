"""Published FLOPs-saving rows recomputed with the analytical cost model."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .cost import count_flops, count_params
from .model import preset
from .sparsity import plan_for_config, structured_densities

TOLERANCE_PP = 0.5
PARAM_TOLERANCE = 0.02


@dataclass(frozen=True)
class TableRow:
    table: str
    model: str
    kind: str                 # "unstructured" | "structured" | "tokens"
    sparsity: float
    keep: float               # fraction of tokens kept
    published: float          # FLOPs saving in percent
    published_params: Optional[float] = None  # millions
    acceptance: bool = True


ROWS = (
    TableRow("Tiny", "deit_tiny", "unstructured", 0.3, 1.0, 25.56),
    TableRow("Tiny", "deit_tiny", "unstructured", 0.4, 1.0, 34.16),
    TableRow("Small", "deit_small", "unstructured", 0.5, 1.0, 46.26),
    TableRow("Small", "deit_small", "unstructured", 0.6, 1.0, 55.44, 8.9),
    TableRow("Base", "deit_base", "unstructured", 0.5, 1.0, 47.95),
    TableRow("Base", "deit_base", "unstructured", 0.6, 1.0, 57.50),
    TableRow("Structured", "deit_small", "structured", 0.4, 1.0, 31.63, 14.6),
    TableRow("Structured", "deit_base", "structured", 0.4, 1.0, 33.13, 56.8),
    TableRow("Structured", "deit_tiny", "structured", 0.3, 1.0, 23.69, acceptance=False),
    TableRow("Tokens", "deit_small", "tokens", 0.5, 0.95, 49.32),
    TableRow("Tokens", "deit_small", "tokens", 0.5, 0.90, 52.38),
    TableRow("Tokens", "deit_small", "tokens", 0.5, 0.70, 63.95),
)

DENSE_PARAMS = {"deit_tiny": 5.72e6, "deit_small": 22.1e6, "deit_base": 86.6e6}


@dataclass
class RowResult:
    row: TableRow
    computed: float
    params_active: int
    passed: bool

    @property
    def delta(self) -> float:
        return self.computed - self.row.published


def row_densities(row: TableRow) -> dict:
    cfg = preset(row.model)
    plan = plan_for_config(cfg, row.sparsity)
    return structured_densities(cfg, plan) if row.kind == "structured" else plan.densities()


def compute_row(row: TableRow) -> RowResult:
    cfg = preset(row.model)
    rep = count_flops(cfg, row_densities(row), token_keep_fraction=row.keep)
    pct = 100.0 * rep.savings
    return RowResult(row, pct, rep.params_active, abs(pct - row.published) <= TOLERANCE_PP)


def compute_all():
    rows = [compute_row(r) for r in ROWS]
    params = {}
    for name, published in DENSE_PARAMS.items():
        total = count_params(preset(name))[0]
        params[name] = (total, published, abs(total - published) / published <= PARAM_TOLERANCE)
    return rows, params


def render(rows, params) -> str:
    lines = [f"{'table':<11}{'model':<11}{'kind':<13}{'S':>5}{'keep':>6}{'params(M)':>11}"
             f"{'published':>11}{'computed':>10}{'delta':>8}  status"]
    for r in rows:
        status = ("PASS" if r.passed else "FAIL") if r.row.acceptance else "info"
        lines.append(f"{r.row.table:<11}{r.row.model:<11}{r.row.kind:<13}{r.row.sparsity:>5.2f}{r.row.keep:>6.2f}"
                     f"{r.params_active / 1e6:>11.2f}{r.row.published:>10.2f}%{r.computed:>9.2f}%{r.delta:>+8.2f}  {status}")
    lines.append("")
    lines.append(f"{'model':<12}{'dense params':>14}{'published':>12}  status")
    for name, (total, pub, ok) in params.items():
        lines.append(f"{name:<12}{total / 1e6:>13.2f}M{pub / 1e6:>11.2f}M  {'PASS' if ok else 'FAIL'}")
    return "\n".join(lines)


def all_pass(rows, params) -> bool:
    return all(r.passed for r in rows if r.row.acceptance) and all(ok for _, _, ok in params.values())
