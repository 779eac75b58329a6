import csv
import json
import math

import numpy as np
import pytest

import reference as ref
from magnn import _kernels
from magnn.dataset import FilteredData, UserSequence, chronological_split
from magnn.evaluator import (
    NoGroundTruth,
    eval_batch,
    evaluate,
    input_sequences,
    ndcg_at_k,
    rank_items,
    recall_at_k,
)
from magnn.itemgraph import build_graph
from magnn.model import ModelConfig, init_params, score_all


class TestRecall:
    def test_single_hit(self):
        assert recall_at_k([5, 1, 2], {1}) == 1.0

    def test_half(self):
        assert recall_at_k(list(range(10)), {3, 42}) == 0.5

    def test_denominator_is_relevant_size(self):
        relevant = set(range(100, 108)) | set(range(7))
        top = list(range(7)) + [50, 51, 52]
        assert len(relevant) == 15
        assert recall_at_k(top, relevant) == 7 / 15

    def test_empty_relevant(self):
        with pytest.raises(NoGroundTruth):
            recall_at_k([1, 2], set())


class TestNdcg:
    def test_rank_one(self):
        assert ndcg_at_k([7, 1, 2], {7}) == 1.0

    def test_rank_two(self):
        assert abs(ndcg_at_k([1, 7, 2], {7}) - 1 / math.log2(3)) <= 1e-9
        assert ndcg_at_k([1, 7, 2], {7}) == pytest.approx(0.63093, abs=1e-5)

    def test_no_hits(self):
        assert ndcg_at_k(list(range(10)), {11}) == 0.0

    def test_ideal_order_is_one(self):
        assert ndcg_at_k([3, 4, 9, 0], {3, 4}, k=3) == 1.0
        assert ndcg_at_k([3, 9, 4], {3, 4}, k=3) < 1.0

    def test_more_relevant_than_k(self):
        assert ndcg_at_k(list(range(10)), set(range(30))) == pytest.approx(1.0, abs=1e-15)

    def test_irrelevant_below_k_changes_nothing(self):
        top = [4, 1, 8, 2, 0, 9, 3, 5, 6, 7]
        rel = {1, 3, 11}
        assert ndcg_at_k(top + [12], rel) == ndcg_at_k(top, rel)
        assert recall_at_k(top + [12], rel) == recall_at_k(top, rel)


def test_metrics_and_ranking_match_brute_force_on_random_cases():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 30))
        scores = rng.integers(0, 5, size=n).astype(float)  # plenty of ties
        excluded = rng.choice(n, size=int(rng.integers(0, n)), replace=False)
        relevant = set(rng.choice(n, size=int(rng.integers(1, n + 1)), replace=True).tolist())
        k = int(rng.integers(1, 15))
        want = ref.brute_rank(scores, excluded)
        ptr = np.array([0, len(excluded)])
        top = _kernels.topk_excluding(scores[None], ptr, np.sort(excluded).astype(np.int64), k)[0]
        top = [int(x) for x in top if x >= 0]
        assert top == want[:k]
        assert recall_at_k(top, relevant, k) == ref.recall(want, relevant, k)
        assert ndcg_at_k(top, relevant, k) == ref.ndcg(want, relevant, k)


def make_split(lengths, n_items=12, seed=0):
    rng = np.random.default_rng(seed)
    seqs = [UserSequence(u, rng.integers(n_items, size=n)) for u, n in enumerate(lengths)]
    return chronological_split(FilteredData(seqs, [f"u{u}" for u in range(len(lengths))], [f"i{i}" for i in range(n_items)]))


@pytest.fixture
def world():
    split = make_split([10, 13, 20, 15, 11, 17, 12, 19, 10, 14])
    graph = build_graph(split.train, split.num_items)
    cfg = ModelConfig(d=6, h=2, m=3, precision="float64", seed=1)
    return split, graph, cfg, init_params(cfg, split.num_users, split.num_items)


class TestRankItems:
    def test_two_item_universe(self):
        seqs = [UserSequence(0, np.array([0] * 10))]
        split = chronological_split(FilteredData(seqs, ["u"], ["a", "b"]))
        cfg = ModelConfig(d=4, variant="MF")
        params = init_params(cfg, 1, 2)
        graph = build_graph(split.train, 2)
        assert rank_items(params, graph, split, 0, "test", cfg).tolist() == [1]

    def test_equal_scores_by_index(self, world):
        split, graph, cfg, params = world
        params = params.copy()
        params["Q"][:] = 0
        out = rank_items(params, graph, split, 2, "test", cfg)
        assert out.tolist() == sorted(out.tolist())

    def test_matches_score_then_sort(self, world):
        split, graph, cfg, params = world
        for mode in ("val", "test"):
            seqs = input_sequences(split, mode)
            for u in range(split.num_users):
                s = score_all(params, graph, eval_batch(seqs, np.array([u]), cfg.window, cfg.history, split.pad))[0]
                want = ref.brute_rank(s.tolist(), set(seqs[u].tolist()))
                assert rank_items(params, graph, split, u, mode, cfg).tolist() == want

    def test_test_mode_excludes_train_and_val(self, world):
        split, graph, cfg, params = world
        got = set(rank_items(params, graph, split, 3, "test", cfg).tolist())
        assert got.isdisjoint(split.train[3]) and got.isdisjoint(split.val[3])
        got_val = set(rank_items(params, graph, split, 3, "val", cfg).tolist())
        assert got_val.isdisjoint(split.train[3])

    def test_strictly_increasing_transform(self, world):
        split, graph, cfg, params = world
        seqs = input_sequences(split, "test")
        batch = eval_batch(seqs, np.arange(split.num_users), cfg.window, cfg.history, split.pad)
        scores = score_all(params, graph, batch)
        ptr = np.concatenate([[0], np.cumsum([len(np.unique(seqs[u])) for u in range(split.num_users)])])
        seen = np.concatenate([np.unique(seqs[u]) for u in range(split.num_users)]).astype(np.int64)
        a = _kernels.topk_excluding(scores, ptr, seen, 10)
        b = _kernels.topk_excluding(np.exp(scores) * 3 + 1, ptr, seen, 10)
        assert np.array_equal(a, b)


class TestEvalBatch:
    def test_window_and_history(self):
        seqs = [np.arange(9)]
        b = eval_batch(seqs, np.array([0]), 5, 3, 99)
        assert b.window.tolist() == [[4, 5, 6, 7, 8]]
        assert b.history.tolist() == [[1, 2, 3]]
        assert b.history_mask.all()

    def test_short_sequence_left_padded(self):
        b = eval_batch([np.array([3, 4])], np.array([0]), 5, 4, 99)
        assert b.window.tolist() == [[99, 99, 99, 3, 4]]
        assert not b.history_mask.any()


class TestEvaluate:
    def test_macro_average_of_per_user_oracle(self, world, tmp_path):
        split, graph, cfg, params = world
        rep = evaluate(params, split, graph, cfg, mode="test", k=5)
        assert rep.num_users == 10 and rep.num_skipped == 0
        rs, ns = [], []
        for u in range(10):
            ranked = rank_items(params, graph, split, u, "test", cfg).tolist()
            rs.append(ref.recall(ranked, set(split.test[u].tolist()), 5))
            ns.append(ref.ndcg(ranked, set(split.test[u].tolist()), 5))
        assert rep.per_user_recall == rs and rep.per_user_ndcg == ns
        assert rep.recall == pytest.approx(np.mean(rs), abs=1e-15)
        assert rep.ndcg == pytest.approx(np.mean(ns), abs=1e-15)
        assert 0 <= rep.recall <= 1 and 0 <= rep.ndcg <= 1

        rep.write_csv(tmp_path / "u.csv")
        rows = list(csv.reader(open(tmp_path / "u.csv")))
        assert rows[0] == ["user", "recall", "ndcg"] and len(rows) == 11
        assert json.loads(rep.to_json())["k"] == 5

    def test_single_user(self):
        split = make_split([16])
        graph = build_graph(split.train, split.num_items)
        cfg = ModelConfig(d=4, variant="MF")
        params = init_params(cfg, 1, split.num_items)
        rep = evaluate(params, split, graph, cfg)
        assert rep.recall == rep.per_user_recall[0]

    def test_everything_hit(self):
        # 10 interactions: test holds 2 items, and only 2 candidates remain unseen
        seqs = [UserSequence(0, np.array([0, 1, 2, 3, 4, 5, 6, 7, 8, 9]))]
        split = chronological_split(FilteredData(seqs, ["u"], [f"i{i}" for i in range(10)]))
        cfg = ModelConfig(d=4, variant="MF")
        graph = build_graph(split.train, 10)
        rep = evaluate(init_params(cfg, 1, 10), split, graph, cfg)
        assert rep.recall == 1.0 and rep.ndcg == 1.0

    def test_empty_ground_truth_skipped(self, world):
        split, graph, cfg, params = world
        split.test[4] = split.test[4][:0]
        rep = evaluate(params, split, graph, cfg)
        assert rep.num_users == 9 and rep.num_skipped == 1 and 4 not in rep.users

    def test_chunking_is_invisible(self, world):
        split, graph, cfg, params = world
        a = evaluate(params, split, graph, cfg, chunk=3)
        b = evaluate(params, split, graph, cfg, chunk=1000)
        assert a.per_user_recall == b.per_user_recall and a.per_user_ndcg == b.per_user_ndcg
