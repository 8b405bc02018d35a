import json

import pytest

from metamt.report import GAP, ReportError, bleu_table, collect_runs, loss_curves, render


def make_run(root, name, system, evals=(), log=()):
    d = root / name
    d.mkdir(parents=True)
    (d / "run.json").write_text(json.dumps({"system": system}))
    (d / "eval.jsonl").write_text("".join(json.dumps(e) + "\n" for e in evals))
    (d / "train.jsonl").write_text("".join(json.dumps(r) + "\n" for r in log))


def test_table_means_counts_and_gaps(tmp_path):
    make_run(tmp_path, "a", "MetaMT", [{"domain": "d4", "bleu": 40.0}])
    make_run(tmp_path, "b", "MetaMT", [{"domain": "d4", "bleu": 50.0}])
    make_run(tmp_path, "c/nested", "Transformer", [{"domain": "d4", "bleu": 10.0}, {"bleu": 12.0}])
    make_run(tmp_path, "d", "Custom", [{"domain": "d4", "bleu": 1.0, "system": "Other"}])
    runs = collect_runs(tmp_path)
    assert [r["name"] for r in runs] == ["a", "b", "c/nested", "d"]
    systems, domains, cells = bleu_table(runs)
    assert systems[:5] == ["Transformer", "+Fine Tune", "MetaMT", "-enc-proj", "-dec-proj"]
    assert systems[5:] == ["Other"] and domains == ["all", "d4"]
    text = render(runs)
    assert "| MetaMT | — | 45.00 (n=2) |" in text
    assert "| Transformer | 12.00 | 10.00 |" in text
    assert "Missing: " in text and "+Fine Tune/d4" in text and GAP in text


def test_curves_and_errors(tmp_path):
    with pytest.raises(ReportError):
        collect_runs(tmp_path / "absent")
    with pytest.raises(ReportError):
        collect_runs(tmp_path)
    make_run(tmp_path, "r", "MetaMT", log=[{"phase": "config"}, {"phase": "model", "step": 1, "loss": 2.0},
                                          {"phase": "meta", "step": 1, "loss": 1.5}])
    runs = collect_runs(tmp_path)
    assert loss_curves(runs) == {"r": {"model": [[1, 2.0]], "meta": [[1, 1.5]]}}
    assert "(no evaluation records)" in render(runs)
