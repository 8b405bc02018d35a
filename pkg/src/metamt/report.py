"""Comparison tables and loss-curve series from a directory of runs.

A run directory holds ``run.json`` (system label, mode, domains), the
training log ``train.jsonl`` and, once evaluated, ``eval.jsonl`` with one
BLEU record per line.
"""

from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path

from .workflow import SYSTEMS

GAP = "—"


class ReportError(ValueError):
    pass


def _jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def collect_runs(log_dir: str | Path) -> list[dict]:
    root = Path(log_dir)
    if not root.is_dir():
        raise ReportError(f"log directory {root} does not exist")
    runs = []
    for meta in sorted(root.rglob("run.json")):
        info = json.loads(meta.read_text(encoding="utf-8"))
        info["dir"] = str(meta.parent)
        info["name"] = str(meta.parent.relative_to(root)) if meta.parent != root else meta.parent.name
        info["evals"] = _jsonl(meta.parent / "eval.jsonl")
        info["log"] = _jsonl(meta.parent / "train.jsonl")
        runs.append(info)
    if not runs:
        raise ReportError(f"no runs found under {root}")
    return runs


def bleu_table(runs: list[dict]) -> tuple[list[str], list[str], dict]:
    """Rows (systems), columns (domains) and cell -> list of scores."""
    cells = defaultdict(list)
    for run in runs:
        for rec in run["evals"]:
            cells[(rec.get("system") or run.get("system"), rec.get("domain") or "all")].append(rec["bleu"])
    domains = sorted({d for _, d in cells})
    extra = sorted({s for s, _ in cells} - set(SYSTEMS))
    return list(SYSTEMS) + extra, domains, cells


def loss_curves(runs: list[dict]) -> dict:
    """``{run name: {phase: [[step, loss], ...]}}`` for plotting."""
    out = {}
    for run in runs:
        series = defaultdict(list)
        for rec in run["log"]:
            if "loss" in rec and "phase" in rec:
                series[rec["phase"]].append([rec.get("step", 0), rec["loss"]])
        out[run["name"]] = dict(series)
    return out


def render(runs: list[dict]) -> str:
    systems, domains, cells = bleu_table(runs)
    lines = ["# BLEU-4 comparison", ""]
    if not domains:
        lines += ["(no evaluation records)", ""]
    else:
        lines.append("| System | " + " | ".join(domains) + " |")
        lines.append("|---" * (len(domains) + 1) + "|")
        gaps = []
        for s in systems:
            row = []
            for d in domains:
                vals = cells.get((s, d))
                if vals:
                    mean = sum(vals) / len(vals)
                    row.append(f"{mean:.2f}" + (f" (n={len(vals)})" if len(vals) > 1 else ""))
                else:
                    row.append(GAP)
                    gaps.append(f"{s}/{d}")
            lines.append(f"| {s} | " + " | ".join(row) + " |")
        lines.append("")
        if gaps:
            lines.append("Missing: " + ", ".join(gaps))
            lines.append("")
    lines.append("Runs: " + ", ".join(f"{r['name']} ({r.get('system', '?')})" for r in runs))
    return "\n".join(lines) + "\n"
