import json

import pytest

from metamt.cli import main
from metamt.workflow import SYSTEMS

TINY = ["data.n_domains=3", "data.pairs=100,100,80", "data.heldout=d2", "data.shared_vocab=10",
        "data.exclusive_vocab=2", "data.polysemy=2", "data.min_len=3", "data.max_len=5", "model.d_model=16",
        "model.ffn_dim=32", "model.max_len=16", "transmission.emb_dim=16", "transmission.n_base=6",
        "train.inner_steps=3", "train.meta_steps=2", "train.eval_every=2", "train.epochs=2",
        "train.finetune_steps=4", "train.batch_size=8", "decode.beam=2"]


def sets(items):
    out = []
    for kv in items:
        out += ["--set", kv]
    return out


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return json.loads(err[0])


def test_usage_errors(capsys):
    assert main([]) == 2
    assert error_line(capsys)["error"] == "usage"
    assert main(["frobnicate"]) == 2
    assert error_line(capsys)["error"] == "usage"
    assert main(["evaluate", "--hyp", "x"]) == 2
    assert "--ref" in error_line(capsys)["message"]


def test_evaluate(tmp_path, capsys):
    (tmp_path / "h").write_text("the cat sat on the mat\na b c d\n")
    (tmp_path / "r").write_text("the cat sat on the mat\na b c d\n")
    (tmp_path / "run.json").write_text(json.dumps({"system": "MetaMT"}))
    assert main(["evaluate", "--hyp", str(tmp_path / "h"), "--ref", str(tmp_path / "r"),
                 "--run-dir", str(tmp_path), "--domain", "d9"]) == 0
    assert capsys.readouterr().out.startswith("BLEU = 100.00")
    rec = json.loads((tmp_path / "eval.jsonl").read_text())
    assert (rec["system"], rec["domain"], rec["bleu"]) == ("MetaMT", "d9", 100.0)
    (tmp_path / "short").write_text("one line\n")
    assert main(["evaluate", "--hyp", str(tmp_path / "short"), "--ref", str(tmp_path / "r")]) == 4
    assert error_line(capsys)["error"] == "data"


def test_missing_file_and_bad_config(tmp_path, capsys):
    assert main(["evaluate", "--hyp", str(tmp_path / "nope"), "--ref", str(tmp_path / "nope")]) == 4
    assert error_line(capsys)["error"] == "io"
    assert main(["synth-data", "--out", str(tmp_path), "--set", "train.bogus=1"]) == 3
    assert error_line(capsys)["error"] == "config"


def test_report_on_empty_dir(tmp_path, capsys):
    assert main(["report", "--log-dir", str(tmp_path)]) == 4
    assert "no runs" in error_line(capsys)["message"]


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    work = tmp_path_factory.mktemp("cli")
    data = work / "data"
    assert main(["synth-data", "--out", str(data)] + sets(TINY)) == 0
    for side in ("src", "tgt"):
        files = [str(data / f"d{i}.train.{side}") for i in range(3)]
        assert main(["bpe-learn", "--input", *files, "--out", str(work / f"{side}.bpe"), "--ops", "50"]) == 0
        seg = []
        for f in files:
            assert main(["bpe-apply", "--model", str(work / f"{side}.bpe"), "--input", f, "--out", f + ".bpe"]) == 0
            seg.append(f + ".bpe")
        assert main(["build-vocab", "--input", *seg, "--out", str(work / f"{side}.vocab")]) == 0
    common = TINY + [f"data.dir={data}", "data.domains=d0,d1", f"data.src_bpe={work}/src.bpe",
                     f"data.tgt_bpe={work}/tgt.bpe", f"data.src_vocab={work}/src.vocab",
                     f"data.tgt_vocab={work}/tgt.vocab"]
    return work, common


def test_synth_data_outputs(prepared):
    work, _ = prepared
    data = work / "data"
    for dom in ("d0", "d1", "d2"):
        for split in ("train", "dev", "test"):
            assert (data / f"{dom}.{split}.src").exists() and (data / f"{dom}.{split}.tgt").exists()
    assert len((data / "d2.train.src").read_text().splitlines()) == 40
    assert len(json.loads((data / "ciphers.json").read_text())) == 3


def test_one_domain_meta_training_is_a_config_error(prepared, capsys):
    work, common = prepared
    assert main(["train-meta", "--run-dir", str(work / "bad")] + sets(common + ["data.domains=d0"])) == 3
    assert "at least 2 domains" in error_line(capsys)["message"]


def test_stop_and_resume_equals_uninterrupted(prepared, capsys):
    work, common = prepared
    assert main(["train-meta", "--run-dir", str(work / "full")] + sets(common)) == 0
    assert main(["train-meta", "--run-dir", str(work / "part"), "--stop-after", "1"] + sets(common)) == 0
    assert json.loads((work / "part" / "run.json").read_text())["complete"] is False
    assert main(["train-meta", "--run-dir", str(work / "part"), "--resume"]) == 0
    assert (work / "full" / "model.mtck").read_bytes() == (work / "part" / "model.mtck").read_bytes()
    capsys.readouterr()
    assert main(["train-meta", "--run-dir", str(work / "part"), "--resume", "--set", "train.lr=9"]) == 3
    assert "stored in its checkpoint" in error_line(capsys)["message"]


def test_inspect_and_tamper(prepared, capsys):
    work, common = prepared
    run = work / "insp"
    assert main(["train-meta", "--run-dir", str(run)] + sets(common + ["train.epochs=1"])) == 0
    capsys.readouterr()
    assert main(["inspect-checkpoint", str(run / "model.mtck"), "--params"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["domains"] == ["d0", "d1"] and info["counters"]["complete"] is True
    assert any(p.startswith("transmission.src.A.") for p in info["shapes"])
    blob = bytearray((run / "model.mtck").read_bytes())
    blob[100] ^= 0xFF
    (run / "bad.mtck").write_bytes(bytes(blob))
    assert main(["inspect-checkpoint", str(run / "bad.mtck")]) == 5
    assert error_line(capsys)["error"] == "checkpoint"


def test_full_pipeline_report(prepared, capsys):
    work, common = prepared
    runs, data = work / "runs", work / "data"
    variants = {"transformer": ["train.mode=baseline"], "metamt": [], "noenc": ["model.enc_proj=false"],
                "nodec": ["model.dec_proj=false"]}
    for name, extra in variants.items():
        assert main(["train-meta", "--run-dir", str(runs / name)] + sets(common + extra + ["train.epochs=1"])) == 0

    def score(run_dir):
        hyp = run_dir / "hyp"
        assert main(["translate", "--checkpoint", str(run_dir / "model.mtck"), "--domain", "d2",
                     "--input", str(data / "d2.test.src"), "--out", str(hyp)]) == 0
        assert len(hyp.read_text().splitlines()) == len((data / "d2.test.src").read_text().splitlines())
        assert main(["evaluate", "--hyp", str(hyp), "--ref", str(data / "d2.test.tgt"), "--run-dir", str(run_dir),
                     "--domain", "d2"]) == 0

    score(runs / "transformer")
    for name in variants:
        assert main(["finetune", "--checkpoint", str(runs / name / "model.mtck"), "--domain", "d2",
                     "--run-dir", str(runs / f"{name}-ft")]) == 0
        if name != "transformer":
            score(runs / f"{name}-ft")
    score(runs / "transformer-ft")
    capsys.readouterr()
    assert main(["report", "--log-dir", str(runs), "--out", str(work / "report.md")]) == 0
    table = (work / "report.md").read_text()
    rows = [ln.split("|")[1].strip() for ln in table.splitlines() if ln.startswith("| ") and "System" not in ln]
    assert rows == list(SYSTEMS)
    assert "—" not in table.split("Runs:")[0]
    curves = json.loads((runs / "curves.json").read_text())
    assert "model" in curves["metamt"] and "finetune" in curves["metamt-ft"]
    # an unregistered domain on a multi-domain checkpoint is a config error
    assert main(["translate", "--checkpoint", str(runs / "metamt" / "model.mtck"), "--domain", "zz",
                 "--input", str(data / "d2.test.src"), "--out", str(work / "x")]) == 3
