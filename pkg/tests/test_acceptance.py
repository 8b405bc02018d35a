"""The ten acceptance criteria, each at its stated tolerance and with its runtime recorded.

Every test records one PASS/FAIL line (shown in the session summary) and then
asserts.  Criteria 8-10 run the full desk-scale comparison and the pipeline
script; together they take about 15 minutes on one core.
"""

import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from metamt import numerics as nx
from metamt import training as tr
from metamt.bleu import bleu4
from metamt.data import DomainDataset, SyntheticTaskSpec, split_dataset, synth_generate
from metamt.decoding import beam_search_fn, greedy_decode, translate_corpus
from metamt.experiment import (SYSTEMS, check_orderings, desk_config, mean_bleu, meta_state, prepare,
                               run_comparison)
from metamt.model import META_PREFIXES, ModelConfig, TransformerModel
from metamt.persistence import checkpoint_from, decode_checkpoint, encode_checkpoint, restore_state
from metamt.tokenization import BOS, EOS, bpe_decode, bpe_encode, bpe_learn, build_vocab
from metamt.training import TrainConfig, TrainLog, TrainState, run_meta_training, train_plain
from metamt.transmission import project, project_closed_form

from acceptance_log import record
from gradcheck import FINAL, UNARY, analytic_grads, fd_grads, fd_params, max_relative_error, random_graph
from helpers import encoded_domains, quick_config, tiny_model
from oracles import count_bleu, exhaustive_best

ROOT = Path(__file__).resolve().parents[1]
SEEDS = (0, 1, 2, 3, 4)

pytestmark = pytest.mark.acceptance


# -- 1. gradients --------------------------------------------------------------------


def _block_errors():
    """Encoder-decoder layer with both projections: float32 and float64 analytic vs float64 FD."""
    rng = np.random.default_rng(5)
    src = rng.integers(4, 20, size=(2, 4))
    src[1, -1] = 0
    tgt = np.concatenate([np.full((2, 1), BOS), rng.integers(4, 18, size=(2, 4))], axis=1)
    cfg = dict(src_vocab=20, tgt_vocab=18, d_model=8, n_layers=1, n_heads=2, ffn_dim=16, dropout=0.0,
               max_len=12, emb_dim=6, n_base=6)
    m32 = TransformerModel(ModelConfig(**cfg), domains=["a", "b"])
    with nx.precision("float64"):
        m64 = TransformerModel(ModelConfig(**cfg), domains=["a", "b"])
        m64.load_state({k: v.astype(np.float64) for k, v in m32.state().items()})
    errors = {}
    with nx.precision("float64"):
        params = m64.parameters(trainable_only=True)
        numeric = fd_params(params, lambda: m64.forward_loss(src, tgt, "a").item(), entries=6)
        m64.zero_grad()
        with nx.Tape() as tape:
            loss = m64.forward_loss(src, tgt, "a")
        tape.backward(loss)
        errors["float64"] = max_relative_error({p.path: p.grad.copy() for p in params}, numeric)
    m32.zero_grad()
    with nx.Tape() as tape:
        loss = m32.forward_loss(src, tgt, "a")
    tape.backward(loss)
    errors["float32"] = max_relative_error(
        {p.path: p.grad.astype(np.float64) for p in m32.parameters(trainable_only=True)}, numeric)
    return errors


def test_criterion_01_gradients():
    t0 = time.time()
    worst = {"float32": 0.0, "float64": 0.0}
    covered = set()
    n_graphs = 60
    for seed in range(n_graphs):
        rng = np.random.default_rng(1000 + seed)
        ops = [UNARY[seed % len(UNARY)]] + list(rng.choice(UNARY, size=4))
        vals, fn, ops = random_graph(seed, ops=ops)
        covered |= set(ops) | {FINAL[seed % len(FINAL)]}
        numeric = fd_grads(vals, fn)
        for prec in worst:
            worst[prec] = max(worst[prec], max_relative_error(analytic_grads(vals, fn, prec), numeric))
    # the projection on its own, in every normalisation mode
    for mode in ("none", "softmax", "scale_by_n"):
        rng = np.random.default_rng(7)
        E = rng.normal(size=(9, 4))
        E /= np.linalg.norm(E, axis=1, keepdims=True)
        vals = {"w": rng.normal(size=(3, 4)), "A": np.eye(4) + 0.3 * rng.normal(size=(4, 4))}
        r = rng.normal(size=(3, 4))
        fn = lambda p, mode=mode: nx.sum_all(nx.mul(project(p["w"], p["A"], nx.Tensor(E), mode), r))
        numeric = fd_grads(vals, fn)
        for prec in worst:
            worst[prec] = max(worst[prec], max_relative_error(analytic_grads(vals, fn, prec), numeric))
    block = _block_errors()
    for prec in worst:
        worst[prec] = max(worst[prec], block[prec])
    secs = time.time() - t0
    missing = (set(UNARY) | set(FINAL)) - covered
    ok = worst["float32"] < 1e-3 and worst["float64"] < 1e-6 and not missing and secs < 120
    record(1, "gradient suite", ok,
           f"{n_graphs} graphs + block + projection; max rel err f32={worst['float32']:.2e} "
           f"f64={worst['float64']:.2e}; uncovered={sorted(missing)}; {secs:.1f}s")
    assert ok


# -- 2. transmission closed form ------------------------------------------------------


def test_criterion_02_transmission_closed_form():
    t0 = time.time()
    rng = np.random.default_rng(2)
    worst = worst_lin = 0.0
    with nx.precision("float64"):
        for _ in range(200):
            n, d = int(rng.integers(1, 65)), int(rng.integers(1, 17))
            E = rng.normal(size=(n, d))
            E /= np.linalg.norm(E, axis=1, keepdims=True)
            A, w = rng.normal(size=(d, d)), rng.normal(size=(int(rng.integers(1, 4)), d))
            got = project(nx.Tensor(w), nx.Tensor(A), nx.Tensor(E)).data
            worst = max(worst, float(np.abs(got - project_closed_form(w, A, E)).max()))
            u, v = rng.normal(size=d), rng.normal(size=d)
            a, b = rng.normal(), rng.normal()
            f = lambda x: project(nx.Tensor(x), nx.Tensor(A), nx.Tensor(E)).data
            worst_lin = max(worst_lin, float(np.abs(f(a * u + b * v) - (a * f(u) + b * f(v))).max()))
    secs = time.time() - t0
    ok = worst <= 1e-5 and worst_lin <= 1e-5 and secs < 10
    record(2, "transmission closed form", ok,
           f"200 instances; max |diff|={worst:.1e}, linearity={worst_lin:.1e}; {secs:.1f}s")
    assert ok


# -- 3. freeze invariant ----------------------------------------------------------------


def test_criterion_03_freeze_invariant(monkeypatch):
    t0 = time.time()
    data, vs, vt, _ = encoded_domains(2, pairs=200)
    state = TrainState.fresh(tiny_model(vs, vt, data, dropout=0.1),
                             quick_config(inner_steps=30, meta_steps=10, eval_every=5, epochs=2))
    checks = []
    real = tr.meta_training_step

    def checked(state, theta_i, dev_j, domain_j, *a, **kw):
        prime = real(state, theta_i, dev_j, domain_j, *a, **kw)
        frozen = [k for k in theta_i if not k.startswith(META_PREFIXES)]
        same = all(theta_i[k].tobytes() == prime[k].tobytes() for k in frozen)
        moved = any(not np.array_equal(theta_i[k], prime[k]) for k in theta_i if k.startswith(META_PREFIXES))
        checks.append((same, moved, len(frozen)))
        return prime

    monkeypatch.setattr(tr, "meta_training_step", checked)
    run_meta_training(state, data)
    secs = time.time() - t0
    ok = len(checks) == 4 and all(s and m for s, m, _ in checks) and secs < 120
    record(3, "freeze invariant", ok,
           f"{len(checks)} meta steps; frozen tensors bit-identical={all(c[0] for c in checks)}, "
           f"theta1 moved={all(c[1] for c in checks)} ({checks[0][2]} frozen tensors); {secs:.1f}s")
    assert ok


# -- 4. BLEU oracle ----------------------------------------------------------------------


def test_criterion_04_bleu_oracle():
    t0 = time.time()
    rng = np.random.default_rng(4)
    words = "the a cat dog sat on mat red big of".split()
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 8))
        refs = [" ".join(rng.choice(words, size=rng.integers(0, 12))) for _ in range(n)]
        hyps = [" ".join(rng.choice(words, size=rng.integers(0, 12))) for _ in range(n)]
        if rng.random() < 0.4:
            hyps = [r if rng.random() < 0.5 else h for h, r in zip(hyps, refs)]
        worst = max(worst, abs(bleu4(hyps, refs).score - count_bleu(hyps, refs)))
    same = bleu4(["a b c d e", "the cat sat on the mat"], ["a b c d e", "the cat sat on the mat"]).score
    zero = bleu4(["a b c d"], ["e f g h"]).score
    secs = time.time() - t0
    ok = worst <= 1e-9 and same == 100.0 and zero == 0.0 and secs < 30
    record(4, "BLEU oracle", ok, f"1000 corpora max |diff|={worst:.1e}; bleu(x,x)={same}; disjoint={zero}; {secs:.1f}s")
    assert ok


# -- 5. beam vs exhaustive ----------------------------------------------------------------


def test_criterion_05_beam_exhaustive():
    t0 = time.time()
    mismatches = greedy_mismatch = 0
    n_models = 150
    for trial in range(n_models):
        rng = np.random.default_rng(trial)
        vocab, max_len = int(rng.integers(2, 5)), int(rng.integers(1, 5))
        cache = {}

        def step(prefixes, rng=rng, vocab=vocab, cache=cache):
            rows = []
            for p in prefixes:
                if tuple(p) not in cache:
                    z = 2.0 * rng.normal(size=vocab)
                    cache[tuple(p)] = z - z.max() - np.log(np.exp(z - z.max()).sum())
                rows.append(cache[tuple(p)])
            return np.array(rows)

        best = beam_search_fn(step, beam=vocab ** max_len, max_len=max_len, bos=vocab, eos=0)
        toks, score = exhaustive_best(step, vocab, max_len, vocab, 0)
        mismatches += best.tokens != toks or abs(best.logprob - score) > 1e-9
        greedy_mismatch += beam_search_fn(step, beam=1, max_len=max_len, bos=vocab, eos=0).tokens != \
            greedy_decode(step, max_len, bos=vocab, eos=0)
    secs = time.time() - t0
    ok = mismatches == 0 and greedy_mismatch == 0 and secs < 60
    record(5, "beam vs exhaustive", ok,
           f"{n_models} models: exhaustive mismatches={mismatches}, beam1!=greedy={greedy_mismatch}; {secs:.1f}s")
    assert ok


# -- 6. BPE ---------------------------------------------------------------------------------


def test_criterion_06_bpe():
    t0 = time.time()
    trace = bpe_learn(["low"] * 5 + ["lowest"] * 2, 100).merges
    hand = trace == [("l", "o"), ("lo", "w"), ("e", "s"), ("es", "t"), ("low", "est")]
    rng = np.random.default_rng(6)
    alpha = list("abcdefgh")
    text = lambda n: " ".join("".join(rng.choice(alpha, size=rng.integers(1, 8))) for _ in range(n))
    model = bpe_learn([text(20) for _ in range(200)], 300)
    roundtrip = sum(bpe_decode(bpe_encode(model, s)) == s for s in (text(int(rng.integers(1, 9))) for _ in range(1000)))
    monotone = True
    for _ in range(30):
        corpus = [text(15)]
        small, large = bpe_learn(corpus, int(rng.integers(0, 30))), None
        large = bpe_learn(corpus, len(small.merges) + 5)
        for w in set(corpus[0].split()):
            monotone &= len(bpe_encode(large, w)) <= len(bpe_encode(small, w))
    secs = time.time() - t0
    ok = hand and roundtrip == 1000 and monotone and secs < 30
    record(6, "BPE", ok, f"hand trace={hand}; roundtrip {roundtrip}/1000; monotone={monotone}; {secs:.1f}s")
    assert ok


# -- 7. learnability -------------------------------------------------------------------------


def test_criterion_07_learnability():
    t0 = time.time()
    spec = SyntheticTaskSpec(n_domains=1, pairs=2500, seed=0)
    ds = split_dataset(synth_generate(spec)[0], (0.8, 0.1, 0.1), seed=0)
    sb, tb = bpe_learn([s for s, _ in ds.train], 10000), bpe_learn([t for _, t in ds.train], 10000)
    sv, tv = build_vocab([bpe_encode(sb, s) for s, _ in ds.train]), build_vocab([bpe_encode(tb, t) for _, t in ds.train])
    enc = lambda pairs: [(sv.encode(bpe_encode(sb, s)) + [EOS], [BOS] + tv.encode(bpe_encode(tb, t)) + [EOS])
                         for s, t in pairs]
    data = DomainDataset("d0", enc(ds.train), enc(ds.dev), enc(ds.test))
    model = TransformerModel(ModelConfig(src_vocab=len(sv), tgt_vocab=len(tv), d_model=32, n_layers=1, n_heads=2),
                             domains=["d0"])
    state = TrainState.fresh(model, TrainConfig(lr=1e-3, batch_size=32, eval_every=250, patience=100))
    steps = 3000
    train_plain(state, data, steps)
    hyps = translate_corpus(model, [s for s, _ in ds.test], "d0", sb, sv, tv, beam=5)
    score = bleu4(hyps, [t for _, t in ds.test]).score
    secs = time.time() - t0
    ok = len(ds.train) == 2000 and score >= 95 and secs < 600
    record(7, "learnability", ok, f"{len(ds.train)} train pairs, vocab {len(sv)}/{len(tv)}, {steps} steps: "
                                  f"test BLEU={score:.2f}; {secs:.0f}s")
    assert ok


# -- 8. directional comparison -------------------------------------------------------------


@pytest.fixture(scope="module")
def comparisons():
    t0 = time.time()
    results = [run_comparison(seed) for seed in SEEDS]
    return results, time.time() - t0


def test_criterion_08_directional(comparisons):
    results, secs = comparisons
    mean = mean_bleu(results)
    checks = check_orderings(mean)
    ok = all(checks.values()) and secs < 7200
    per_seed = "; ".join(f"seed {r.seed}: " + ", ".join(f"{s}={r.bleu[s]:.2f}" for s in SYSTEMS) for r in results)
    record(8, "directional comparison", ok,
           "mean " + ", ".join(f"{s}={mean[s]:.2f}" for s in SYSTEMS) + " | "
           + ", ".join(f"{k}: {'ok' if v else 'NO'}" for k, v in checks.items()) + f" | {secs:.0f}s")
    print(per_seed, flush=True)
    assert ok


# -- 9. determinism and resume -----------------------------------------------------------------


def test_criterion_09_determinism(comparisons):
    t0 = time.time()
    first = comparisons[0][0]
    again = run_comparison(first.seed)
    identical = sorted(first.checkpoints) == sorted(again.checkpoints) and all(
        first.checkpoints[k] == again.checkpoints[k] for k in first.checkpoints)
    # resume MetaMT meta-training mid-run from a serialized checkpoint
    cfg = desk_config(first.seed)
    prep = prepare(cfg)
    state = meta_state(cfg, prep)
    stop_at = 17
    run_meta_training(state, prep.train, on_iteration=lambda s: s.iteration >= stop_at)
    blob = encode_checkpoint(checkpoint_from(state.model, state))
    resumed = restore_state(decode_checkpoint(blob), TrainLog())
    run_meta_training(resumed, prep.train)
    losses = lambda recs: [(r["phase"], r["loss"]) for r in recs if "loss" in r]
    same_losses = losses(state.log.records) + losses(resumed.log.records) == losses(first.logs["MetaMT"])
    same_bytes = encode_checkpoint(checkpoint_from(resumed.model, resumed)) == first.checkpoints["MetaMT pretrained"]
    secs = time.time() - t0
    ok = identical and same_losses and same_bytes and secs < 1800
    record(9, "determinism and resume", ok,
           f"rerun seed {first.seed}: {len(first.checkpoints)} checkpoints bit-identical={identical}; "
           f"resume after pair {stop_at}: losses equal={same_losses}, final bytes equal={same_bytes}; {secs:.0f}s")
    assert ok


# -- 10. pipeline script ------------------------------------------------------------------------


def test_criterion_10_pipeline(tmp_path):
    t0 = time.time()
    env = dict(os.environ, METAMT=f"{sys.executable} -m metamt")
    proc = subprocess.run(["bash", str(ROOT / "scripts" / "pipeline.sh"), str(tmp_path / "work")],
                          capture_output=True, text=True, env=env, timeout=900)
    secs = time.time() - t0
    report = tmp_path / "work" / "report.md"
    rows = []
    if report.exists():
        rows = [ln.split("|")[1].strip() for ln in report.read_text().splitlines()
                if ln.startswith("| ") and "System" not in ln]
    ok = proc.returncode == 0 and rows == list(SYSTEMS) and secs < 900
    record(10, "pipeline script", ok, f"exit={proc.returncode}; report rows={rows}; {secs:.0f}s")
    if not ok:
        print(proc.stdout[-3000:], proc.stderr[-3000:])
    assert ok
