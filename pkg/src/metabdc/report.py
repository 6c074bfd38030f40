"""Results table assembly and report emission.

The table mirrors the ablation layout: one row per pretraining kind,
one column per (fine-tune kind, shot setting). Cells are mean +- std
test AUROC or FAILED(reason). Emission is deterministic, so re-emitting
an unchanged table reproduces both files byte for byte.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .config import ExperimentConfig
from .experiment import CellOutcome, RowFragment, cell_list, shot_label


@dataclass
class ResultsTable:
    columns: list[tuple[str, int]]
    rows: list[RowFragment]
    seed: int
    config_digest: str

    @classmethod
    def from_fragments(cls, cfg: ExperimentConfig, fragments: list[RowFragment], seed: int) -> "ResultsTable":
        if not fragments:
            raise ValueError("no result rows to tabulate")
        return cls(cell_list(cfg), fragments, seed, cfg.digest())

    def cell_text(self, fragment: RowFragment, col: tuple[str, int]) -> str:
        outcome = fragment.cells.get(col)
        if outcome is None:
            return "FAILED(missing)"
        if outcome.failed:
            return f"FAILED({outcome.reason})"
        return f"{outcome.mean:.4f} +- {outcome.std:.4f}"


def column_label(col: tuple[str, int]) -> str:
    kind, shots = col
    return f"{kind}@{shot_label(shots)}"


def emit_report(table: ResultsTable, out_dir: str) -> tuple[str, str]:
    """Write results.csv and results.txt; returns both paths."""
    if not table.rows:
        raise ValueError("empty results table")
    os.makedirs(out_dir, exist_ok=True)
    labels = [column_label(c) for c in table.columns]
    meta = f"seed={table.seed} config={table.config_digest}"

    csv_path = os.path.join(out_dir, "results.csv")
    with open(csv_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"# {meta}\n")
        f.write(",".join(["pretrain"] + labels) + "\n")
        for fragment in table.rows:
            cells = [table.cell_text(fragment, c) for c in table.columns]
            f.write(",".join([fragment.pretrain] + cells) + "\n")

    txt_path = os.path.join(out_dir, "results.txt")
    names = ["pretrain"] + labels
    grid = [[fragment.pretrain] + [table.cell_text(fragment, c) for c in table.columns] for fragment in table.rows]
    widths = [max(len(names[j]), *(len(row[j]) for row in grid)) for j in range(len(names))]
    with open(txt_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(meta + "\n")
        f.write(" | ".join(n.ljust(w) for n, w in zip(names, widths)) + "\n")
        f.write("-+-".join("-" * w for w in widths) + "\n")
        for row in grid:
            f.write(" | ".join(cell.ljust(w) for cell, w in zip(row, widths)) + "\n")
    return csv_path, txt_path
