"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import time

import numpy as np
import pytest

from fixtures import filter_fixture
from oracles import median_oracle, ranks_by_sort, recall_oracle, vse_brute, vsepp_brute
from webvse.cli import main
from webvse.curriculum import KeywordList, build_keyword_list, build_schedule
from webvse.data_io import CaptionRecord, WebManifestEntry, filter_web_corpus
from webvse.encoders import embed_images, embed_sentences, init_model
from webvse.evaluation import RetrievalSet, SimilarityTable, best_ranks, evaluate_5fold, median_rank, recall_at_k
from webvse.experiment import run_synthetic_seed
from webvse.losses import BatchEmbeddings, LossConfig, vse_loss, vsepp_loss
from webvse.selfcheck import KINDS, run_selfcheck
from webvse.pipeline import build_pair_data, build_tag_data, new_model
from webvse.synthetic import SyntheticConfig, make_world
from webvse.trainer import AdamState, TrainConfig, lr_at, sentence_params_equal, train_stage1, train_stage2


@pytest.fixture
def verdict(capsys):
    def emit(number, name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {name}: {detail}")
        assert ok, detail

    return emit


def test_1_gradient_correctness(verdict):
    t0 = time.perf_counter()
    records = run_selfcheck(trials=25, seed=0, kinds=KINDS)
    elapsed = time.perf_counter() - t0
    worst = max(r.result.overall for r in records)
    counts = {k: sum(r.kind == k for r in records) for k in KINDS}
    ok = all(r.passed for r in records) and worst < 1e-4 and elapsed < 60 and set(counts.values()) == {25}
    verdict(1, "gradient checks", ok, f"{len(records)} checks, max rel error {worst:.2e}, {elapsed:.1f}s")


def test_2_loss_oracles(verdict):
    worst, pair_equal, dominated = 0.0, True, True
    for s in range(100):
        r = np.random.default_rng([2, s])
        n = [2, 3][s % 2] if s < 20 else int(r.integers(1, 11))
        b = BatchEmbeddings(r.standard_normal((n, 6)), r.standard_normal((n, 6)))
        cfg = LossConfig(margin=float(r.uniform(0.05, 0.5)))
        vse, vsepp = vse_loss(b, cfg), vsepp_loss(b, cfg)
        worst = max(worst, abs(vse.value - vse_brute(b.images, b.texts, cfg.margin)),
                    abs(vsepp.value - vsepp_brute(b.images, b.texts, cfg.margin)))
        if n == 2:
            pair_equal &= vse.value == vsepp.value
        if n >= 3:
            dominated &= vsepp.value <= vse.value
    ok = worst <= 1e-12 and pair_equal and dominated
    verdict(2, "loss oracles", ok, f"max |loss - brute force| {worst:.1e}, n=2 equal {pair_equal}, "
                                   f"vsepp<=vse {dominated}")


def test_3_metric_oracles(verdict):
    mismatches = 0
    for s in range(100):
        r = np.random.default_rng([3, s])
        q, g = int(r.integers(1, 51)), int(r.integers(1, 51))
        scores = r.integers(0, 6, (q, g)).astype(float) if s % 2 else r.standard_normal((q, g))
        gt = [r.choice(g, size=int(r.integers(1, min(g, 5) + 1)), replace=False) for _ in range(q)]
        t = SimilarityTable(scores, gt)
        ranks = ranks_by_sort(scores.tolist(), gt)
        same = best_ranks(t).tolist() == ranks and median_rank(t) == median_oracle(ranks)
        same &= all(recall_at_k(t, k) == recall_oracle(ranks, k) for k in range(1, g + 1))
        mismatches += not same

    r = np.random.default_rng(33)
    feats = {f"i{k}": r.standard_normal(4) for k in range(10)}
    caps = [(f"i{k}", ["a", "b", "c"][: 1 + (k + j) % 3]) for k in range(10) for j in range(2)]
    model = init_model(4, 2, ["a", "b", "c"], 3, 3, 2, seed=3)
    folds = [[f"i{2 * k}", f"i{2 * k + 1}"] for k in range(5)]
    report = evaluate_5fold(model, RetrievalSet.build(feats, caps), folds)
    per_fold = []
    for f in folds:
        fc = [c for i, c in caps if i in f]
        owner = [f.index(i) for i, _ in caps if i in f]
        img = embed_images(model, np.array([feats[i] for i in f]), normalized=True)
        sc = (img @ embed_sentences(model, fc, normalized=True).T).tolist()
        i2t = ranks_by_sort(sc, [[c for c, o in enumerate(owner) if o == k] for k in range(len(f))])
        t2i = ranks_by_sort(np.array(sc).T.tolist(), [[o] for o in owner])
        k_i2t, k_t2i = min(10, len(fc)), min(10, len(f))
        per_fold.append(recall_oracle(i2t, 1) + recall_oracle(i2t, k_i2t) + recall_oracle(t2i, 1)
                        + recall_oracle(t2i, k_t2i))
    fold_ok = abs(report.rsum - float(np.mean(per_fold))) <= 1e-12
    verdict(3, "metric oracles", mismatches == 0 and fold_ok,
            f"{100 - mismatches}/100 tables exact, 5-fold rsum {report.rsum:.4f} vs oracle {np.mean(per_fold):.4f}")


def test_4_hyperparameter_defaults(verdict):
    cfg = TrainConfig()
    checks = {
        "lr(0)=2e-4": lr_at(cfg, 1, 0) == 2e-4,
        "lr(10)=2e-5": abs(lr_at(cfg, 1, 10) - 2e-5) <= 1e-20,
        "margin=0.2": cfg.margin == 0.2,
        "batch=128": cfg.batch_size == 128,
        "clip=2": cfg.clip_norm == 2.0,
        "stage1=20": cfg.stage1_epochs == 20,
        "stage2=20": cfg.stage2_epochs == 20,
    }
    failed = [k for k, v in checks.items() if not v]
    verdict(4, "default config", not failed, "all values match" if not failed else f"mismatch {failed}")


def test_5_stage2_isolation(verdict):
    w = make_world(SyntheticConfig(n_train=40, n_heldout_clean=8, n_heldout_web=2, n_web=60, seed=4))
    cfg = TrainConfig(lr0=5e-3, stage1_epochs=3, stage2_epochs=3, batch_size=16, embed_dim=8, hidden_dim=8)
    pairs = build_pair_data(w.features, w.captions, w.word_vectors, w.train_ids)
    val = RetrievalSet.build(w.features, w.captions, w.heldout_ids)
    caps = [c for c in w.captions if c.image_id in set(w.train_ids)]
    model = new_model(cfg, w.cfg.image_dim, w.word_vectors, caps)
    state = AdamState.fresh(model.params)
    train_stage1(model, pairs, cfg, val, state=state)
    after_stage1 = model.copy()
    accepted, _ = filter_web_corpus(w.web_entries, w.word_vectors.vectors)
    web = build_tag_data(accepted, w.web_features, w.word_vectors)
    schedule = build_schedule(accepted, build_keyword_list(caps, set()), cfg.stage2_epochs)
    results = []
    for carried in (None, state):
        m = after_stage1.copy()
        train_stage2(m, web, schedule, cfg, val, state=carried)
        moved = not m.params.equal(after_stage1.params, ["W_image", "W_tag"])
        results.append(sentence_params_equal(m, after_stage1) and moved)
    verdict(5, "stage II isolation", all(results),
            "W_sentence, GRU and word table bit-identical (fresh and carried optimizer state)")


def test_6_synthetic_end_to_end(verdict):
    t0 = time.perf_counter()
    runs = [run_synthetic_seed(s) for s in (0, 1, 2)]
    elapsed = time.perf_counter() - t0
    s1 = float(np.mean([r["stage1_r1_t2i"] for r in runs]))
    web_gain = float(np.mean([r["stage2_web_r1_t2i"] - r["stage1_web_r1_t2i"] for r in runs]))
    # held-out recalls are multiples of 2 points, so rsums are exact integers in float64
    drop_total = sum(r["stage1_rsum"] - r["stage2_rsum"] for r in runs)
    a, b, c = s1 >= 80.0, web_gain >= 5.0, drop_total <= 3 * 2.0
    detail = (f"(a) stage I R@1 {s1:.2f} [{'ok' if a else 'FAIL'}], "
              f"(b) web-concept R@1 gain {web_gain:+.2f} [{'ok' if b else 'FAIL'}], "
              f"(c) rsum drop {drop_total / 3:.2f} [{'ok' if c else 'FAIL'}], {elapsed:.1f}s")
    verdict(6, "synthetic two-stage", a and b and c and elapsed < 600, detail)


def test_7_curriculum(verdict):
    bad = 0
    for s in range(100):
        r = np.random.default_rng([7, s])
        vocab = [f"k{j}" for j in range(30)]
        kw = KeywordList([(v, 100 - j) for j, v in enumerate(vocab[:20])], cap=20)
        corpus = [WebManifestEntry(f"e{j}", "u", "q", list(r.choice(vocab, size=int(r.integers(1, 4)))))
                  for j in range(int(r.integers(1, 60)))]
        epochs = int(r.integers(1, 25))
        sched = build_schedule(corpus, kw, epochs, "min" if s % 2 else "mean")
        pools = [set(sched.pool(e)) for e in range(1, epochs + 1)]
        bad += not (all(p <= q for p, q in zip(pools, pools[1:])) and pools[-1] == {e.image_id for e in corpus})
    caps = [CaptionRecord("x", "a dog runs".split()), CaptionRecord("y", "a dog sits".split())]
    fixture = build_keyword_list(caps, {"a"}, {"runs": "run", "sits": "sit"}).entries
    ok = bad == 0 and fixture == [("dog", 2), ("run", 1), ("sit", 1)]
    verdict(7, "curriculum", ok, f"{100 - bad}/100 corpora monotone with full coverage, keyword fixture {fixture}")


def test_8_web_filter(verdict):
    entries, vocab, expected = filter_fixture()
    accepted, report = filter_web_corpus(entries, vocab)
    partition = dict(report.rejected) == expected and len(report.rejected) == len(expected)
    partition &= [e.image_id for e in accepted] == [e.image_id for e in entries if e.image_id not in expected]
    again, report2 = filter_web_corpus(accepted, vocab)
    idempotent = again == accepted and report2.total == 0
    verdict(8, "web filtering", partition and idempotent,
            f"{len(accepted)} accepted, rejections {report.counts}, idempotent {idempotent}")


def test_9_cli_determinism(raw_inputs, tmp_path, verdict):
    bundle = tmp_path / "bundle"
    assert main(["prepare", "--out", str(bundle), "--folds", "5",
                 *[str(x) for k in ("features", "captions", "word_vectors", "train_ids", "val_ids", "test_ids",
                                    "manifest", "web_features")
                   for x in (f"--{k.replace('_', '-')}", raw_inputs[k])]]) == 0
    runs = [tmp_path / "a", tmp_path / "b"]
    flags = ["--stage1_epochs", "3", "--stage2_epochs", "3", "--embed_dim", "8", "--hidden_dim", "8",
             "--batch_size", "16", "--lr0", "0.005", "--seed", "11"]
    codes = [main(["train", "--bundle", str(bundle), "--out", str(r), *flags]) for r in runs]
    ckpts = sorted(p.name for p in (runs[0] / "checkpoints").iterdir())
    same_ckpt = all((runs[0] / "checkpoints" / n).read_bytes() == (runs[1] / "checkpoints" / n).read_bytes()
                    for n in ckpts)
    same_log = (runs[0] / "train_log.jsonl").read_bytes() == (runs[1] / "train_log.jsonl").read_bytes()
    ok = codes == [0, 0] and same_ckpt and same_log and ckpts[-1] == "epoch_006.ckpt"
    verdict(9, "determinism", ok, f"{len(ckpts)} checkpoints identical {same_ckpt}, train logs identical {same_log}")
