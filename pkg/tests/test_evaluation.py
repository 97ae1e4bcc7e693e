import numpy as np
import pytest
from hypothesis import given, seed
from hypothesis import strategies as st

from oracles import median_oracle, ranks_by_sort, recall_oracle
from webvse.encoders import init_model
from webvse.errors import ParameterError, ValidationError
from webvse.evaluation import (
    I2T,
    T2I,
    RetrievalReport,
    RetrievalSet,
    SimilarityTable,
    average_reports,
    best_ranks,
    evaluate,
    evaluate_5fold,
    evaluate_embeddings,
    evaluate_split,
    median_rank,
    recall_at_k,
)


def random_table(s, q=None, g=None, levels=None):
    r = np.random.default_rng(s)
    q = q or int(r.integers(1, 51))
    g = g or int(r.integers(1, 51))
    scores = r.integers(0, levels, (q, g)).astype(float) if levels else r.standard_normal((q, g))
    gt = [r.choice(g, size=int(r.integers(1, min(g, 5) + 1)), replace=False) for _ in range(q)]
    return SimilarityTable(scores, gt)


def test_perfect_retrieval():
    t = SimilarityTable(np.eye(4), [[k] for k in range(4)])
    assert recall_at_k(t, 1) == 100.0
    assert median_rank(t) == 1.0


def test_all_ties_are_pessimistic():
    t = SimilarityTable(np.zeros((3, 10)), [[k] for k in range(3)])
    assert best_ranks(t).tolist() == [10, 10, 10]
    assert recall_at_k(t, 1) == 0.0


def test_hand_built_rows():
    scores = [[0.9, 0.1, 0.5], [0.2, 0.2, 0.1], [0.3, 0.8, 0.7]]
    t = SimilarityTable(scores, [[2], [1], [0, 2]])
    assert best_ranks(t).tolist() == [2, 2, 2]
    assert best_ranks(t).tolist() == ranks_by_sort(scores, t.ground_truth)


def test_median_rule():
    def median_of(ranks):
        g = max(ranks)
        scores = np.zeros((len(ranks), g))
        for q, r in enumerate(ranks):
            scores[q, :r] = np.arange(g, g - r, -1)
        return median_rank(SimilarityTable(scores, [[r - 1] for r in ranks]))

    assert median_of([1, 3, 5]) == 3.0
    assert median_of([1, 2, 3, 10]) == 2.5
    assert median_of([1, 1]) == 1.0


def test_k_out_of_range():
    t = SimilarityTable(np.eye(3), [[0], [1], [2]])
    with pytest.raises(ParameterError):
        recall_at_k(t, 4)


def test_table_validation():
    with pytest.raises(ValidationError):
        SimilarityTable(np.eye(2), [[0]])
    with pytest.raises(ValidationError):
        SimilarityTable(np.eye(2), [[0], []])


@seed(2023)
@given(st.integers(0, 2**32 - 1), st.sampled_from([None, 3]))
def test_ranks_match_sort_oracle(s, levels):
    t = random_table(s, levels=levels)
    ranks = ranks_by_sort(t.scores.tolist(), t.ground_truth)
    assert best_ranks(t).tolist() == ranks
    assert median_rank(t) == median_oracle(ranks)
    for k in {1, min(10, t.gallery_size), t.gallery_size}:
        assert recall_at_k(t, k) == recall_oracle(ranks, k)


@seed(2023)
@given(st.integers(0, 2**32 - 1))
def test_recall_monotone_in_k(s):
    t = random_table(s, levels=4)
    values = [recall_at_k(t, k) for k in range(1, t.gallery_size + 1)]
    assert values == sorted(values)
    assert values[-1] == 100.0


@seed(2023)
@given(st.integers(0, 2**32 - 1))
def test_increasing_transform_preserves_ranks(s):
    t = random_table(s, levels=5)
    warped = SimilarityTable(np.exp(3 * t.scores) - 7, t.ground_truth)
    assert np.array_equal(best_ranks(t), best_ranks(warped))


@seed(2023)
@given(st.integers(0, 2**32 - 1))
def test_row_permutation_preserves_report(s):
    t = random_table(s)
    perm = np.random.default_rng(s).permutation(t.num_queries)
    pt = SimilarityTable(t.scores[perm], [t.ground_truth[k] for k in perm])
    assert recall_at_k(pt, 1) == recall_at_k(t, 1)
    assert median_rank(pt) == median_rank(t)


@seed(2023)
@given(st.integers(0, 2**32 - 1))
def test_perfect_recall_implies_unit_median(s):
    t = random_table(s)
    scores = t.scores.copy()
    for q, gt in enumerate(t.ground_truth):
        scores[q, gt[0]] = scores[q].max() + 1.0
    top = SimilarityTable(scores, t.ground_truth)
    assert recall_at_k(top, 1) == 100.0 and median_rank(top) == 1.0


def test_unit_median_without_perfect_recall():
    # the converse fails: a median of 1 only needs half the queries at rank 1
    t = SimilarityTable([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], [[0], [0], [0]])
    assert median_rank(t) == 1.0 and recall_at_k(t, 1) < 100.0


def _micro_set(r, n_images=3, per_image=2, dim=4):
    feats = {f"i{k}": r.standard_normal(dim) for k in range(n_images)}
    caps = [(f"i{k}", ["a", "b", "c"][: 1 + (k + j) % 3]) for k in range(n_images) for j in range(per_image)]
    return feats, caps


def test_identical_embeddings_give_perfect_recall():
    img = np.eye(5)
    rep = evaluate_embeddings(img, img, np.arange(5))
    assert rep.r1_i2t == rep.r1_t2i == 100.0
    assert rep.medr_i2t == rep.medr_t2i == 1.0


def test_micro_set_matches_brute_force(rng):
    feats, caps = _micro_set(rng)
    model = init_model(4, 2, ["a", "b", "c"], 3, 3, 2, seed=1)
    data = RetrievalSet.build(feats, caps)
    rep = evaluate(model, data)
    img = np.array([model.params["W_image"] @ feats[i] for i in data.image_ids])
    from webvse.encoders import encode_sentence

    cap = np.array([encode_sentence(model, c) for _, c in caps])
    img /= np.linalg.norm(img, axis=1, keepdims=True)
    cap /= np.linalg.norm(cap, axis=1, keepdims=True)
    scores = img @ cap.T
    owner = [data.image_ids.index(i) for i, _ in caps]
    i2t = ranks_by_sort(scores.tolist(), [[c for c, o in enumerate(owner) if o == k] for k in range(3)])
    t2i = ranks_by_sort(scores.T.tolist(), [[o] for o in owner])
    assert rep.r1_i2t == recall_oracle(i2t, 1) and rep.r10_i2t == recall_oracle(i2t, 3)
    assert rep.r1_t2i == recall_oracle(t2i, 1) and rep.medr_t2i == median_oracle(t2i)
    assert evaluate_split(model, feats, caps, T2I).r_at_1 == rep.r1_t2i
    assert evaluate_split(model, feats, caps, I2T).med_r == rep.medr_i2t


def test_random_embeddings_near_chance():
    hits = []
    for s in range(20):
        r = np.random.default_rng(s)
        img, cap = r.standard_normal((100, 16)), r.standard_normal((100, 16))
        img /= np.linalg.norm(img, axis=1, keepdims=True)
        cap /= np.linalg.norm(cap, axis=1, keepdims=True)
        hits.append(evaluate_embeddings(img, cap, np.arange(100)).r1_t2i)
    assert abs(np.mean(hits) - 1.0) < 1.0


def test_average_reports_mean():
    reps = [RetrievalReport(v, 0, 1, v, 0, 1) for v in (10, 20, 30, 40, 50)]
    assert average_reports(reps).r1_i2t == 30.0
    same = RetrievalReport(1, 2, 3, 4, 5, 6)
    assert average_reports([same] * 5) == same


def test_five_fold_matches_per_fold_oracle(rng):
    feats, caps = _micro_set(rng, n_images=10, per_image=2)
    model = init_model(4, 2, ["a", "b", "c"], 3, 3, 2, seed=2)
    data = RetrievalSet.build(feats, caps)
    folds = [[f"i{2 * k}", f"i{2 * k + 1}"] for k in range(5)]
    rep = evaluate_5fold(model, data, folds)
    per_fold = [evaluate(model, RetrievalSet.build(feats, caps, f)) for f in folds]
    assert rep.rsum == pytest.approx(np.mean([r.rsum for r in per_fold]), abs=1e-12)
    with pytest.raises(ValidationError):
        evaluate_5fold(model, data, folds[:4])


def test_report_text_has_one_decimal():
    text = RetrievalReport(12.345, 50, 2, 10, 40, 3).to_text()
    assert "r1_i2t=12.3" in text and "tie_policy=pessimistic" in text
