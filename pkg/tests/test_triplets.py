"""Budget formula, pool generation, subsampling, and jsonl round trips."""

from __future__ import annotations

import pytest

from conftest import make_study
from triplet_meta import (BudgetParams, GowerOracle, generate_pool,
                          load_triplets, save_triplets, subsample,
                          triplet_budget)
from triplet_meta.dataset import CharacteristicSpec, Dataset
from triplet_meta.triplets import Triplet


@pytest.fixture(scope="module")
def small_ds():
    studies = tuple(make_study(f"S{i:02d}", 0.1 * i, 1.0,
                               age=float(i * i % 7), size=float(i))
                    for i in range(8))
    schema = tuple(CharacteristicSpec(c.name, c.kind)
                   for c in studies[0].characteristics)
    return Dataset(studies, schema)


class TestBudget:
    def test_natural_log_small(self):
        assert triplet_budget(BudgetParams(m=10, d=2, lam=1)) == 47

    def test_natural_log_default_settings(self):
        assert triplet_budget(BudgetParams(m=58, d=2, lam=2)) == 943

    def test_other_bases(self):
        assert triplet_budget(BudgetParams(58, 2, 2, "base2")) == 1360
        assert triplet_budget(BudgetParams(58, 2, 2, "base10")) == 410

    def test_too_few_studies(self):
        with pytest.raises(ValueError, match="m must be >= 3"):
            BudgetParams(m=2, d=2, lam=1)

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            BudgetParams(m=10, d=0, lam=1)
        with pytest.raises(ValueError):
            BudgetParams(m=10, d=2, lam=0)
        with pytest.raises(ValueError):
            BudgetParams(m=10, d=2, lam=1, log_base="base3")


class TestGeneratePool:
    def test_one_pair_per_anchor_gives_m_triplets(self, small_ds):
        sub = Dataset(small_ds.studies[:3], small_ds.schema)
        pool = generate_pool(sub, GowerOracle(sub), pairs_per_anchor=1, seed=0)
        assert len(pool) == 3
        assert sorted(t.anchor for t in pool) == [0, 1, 2]

    def test_all_pairs_judged(self, small_ds):
        sub = Dataset(small_ds.studies[:4], small_ds.schema)
        pool = generate_pool(sub, GowerOracle(sub), pairs_per_anchor=3, seed=0)
        assert len(pool) == 12  # 4 anchors x C(3,2) pairs
        for a in range(4):
            pairs = {frozenset((t.positive, t.negative))
                     for t in pool if t.anchor == a}
            assert len(pairs) == 3

    def test_pairs_per_anchor_capped_with_warning(self, small_ds):
        sub = Dataset(small_ds.studies[:4], small_ds.schema)
        with pytest.warns(UserWarning, match="capping"):
            pool = generate_pool(sub, GowerOracle(sub), pairs_per_anchor=99, seed=0)
        assert len(pool) == 12

    def test_same_seed_reproduces_bytes(self, small_ds, tmp_path):
        oracle = GowerOracle(small_ds)
        p1 = generate_pool(small_ds, oracle, pairs_per_anchor=5, seed=42)
        p2 = generate_pool(small_ds, oracle, pairs_per_anchor=5, seed=42)
        save_triplets(p1, small_ds, tmp_path / "a.jsonl")
        save_triplets(p2, small_ds, tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_different_seeds_differ(self, small_ds):
        oracle = GowerOracle(small_ds)
        p1 = generate_pool(small_ds, oracle, pairs_per_anchor=5, seed=1)
        p2 = generate_pool(small_ds, oracle, pairs_per_anchor=5, seed=2)
        assert [t.key for t in p1] != [t.key for t in p2]

    def test_triplets_agree_with_gower_ordering(self, small_ds):
        oracle = GowerOracle(small_ds)
        pool = generate_pool(small_ds, oracle, pairs_per_anchor=10, seed=3)
        for t in pool:
            da = oracle.distance(small_ds.studies[t.anchor], small_ds.studies[t.positive])
            db = oracle.distance(small_ds.studies[t.anchor], small_ds.studies[t.negative])
            assert da <= db

    def test_distinct_indices_and_no_duplicates(self, small_ds):
        pool = generate_pool(small_ds, GowerOracle(small_ds), pairs_per_anchor=10, seed=3)
        keys = [t.key for t in pool]
        assert len(keys) == len(set(keys))
        for a, p, n in keys:
            assert len({a, p, n}) == 3

    def test_minimum_dataset_size(self, small_ds):
        tiny = Dataset(small_ds.studies[:2], small_ds.schema)
        with pytest.raises(ValueError, match="at least 3"):
            generate_pool(tiny, GowerOracle(tiny), 1, 0)


class TestSubsample:
    def test_full_budget_returns_whole_pool_reordered(self, small_ds):
        pool = generate_pool(small_ds, GowerOracle(small_ds), 5, seed=0)
        sub = subsample(pool, len(pool), seed=9)
        assert sorted(t.key for t in sub) == sorted(t.key for t in pool)

    def test_seeds_give_different_subsets_of_right_size(self, small_ds):
        pool = generate_pool(small_ds, GowerOracle(small_ds), 10, seed=0)
        s20 = subsample(pool, 40, seed=20)
        s50 = subsample(pool, 40, seed=50)
        assert len(s20) == len(s50) == 40
        assert {t.key for t in s20} != {t.key for t in s50}

    def test_subset_of_pool(self, small_ds):
        pool = generate_pool(small_ds, GowerOracle(small_ds), 10, seed=0)
        pool_keys = {t.key for t in pool}
        for seed in (1, 7, 100):
            assert {t.key for t in subsample(pool, 17, seed)} <= pool_keys

    def test_zero_budget_rejected(self, small_ds):
        pool = generate_pool(small_ds, GowerOracle(small_ds), 2, seed=0)
        with pytest.raises(ValueError, match="positive"):
            subsample(pool, 0, seed=1)

    def test_oversized_budget_mentions_remedy(self, small_ds):
        pool = generate_pool(small_ds, GowerOracle(small_ds), 2, seed=0)
        with pytest.raises(ValueError, match="pairs_per_anchor"):
            subsample(pool, len(pool) + 1, seed=1)

    def test_subsample_is_deterministic(self, small_ds):
        pool = generate_pool(small_ds, GowerOracle(small_ds), 10, seed=0)
        a = subsample(pool, 20, seed=5)
        b = subsample(pool, 20, seed=5)
        assert [t.key for t in a] == [t.key for t in b]


class TestJsonl:
    def test_round_trip(self, small_ds, tmp_path):
        pool = generate_pool(small_ds, GowerOracle(small_ds), 5, seed=0)
        path = tmp_path / "triplets.jsonl"
        save_triplets(pool, small_ds, path)
        again = load_triplets(path, small_ds)
        assert [t.key for t in again] == [t.key for t in pool]
        assert [t.judgment.oracle_tag for t in again] == ["gower"] * len(pool)
        assert [t.judgment.explanation for t in again] == \
            [t.judgment.explanation for t in pool]

    def test_unknown_id_rejected(self, small_ds, tmp_path):
        path = tmp_path / "triplets.jsonl"
        path.write_text('{"anchor_id": "nope", "positive_id": "S01", '
                        '"negative_id": "S02", "oracle_tag": "gower", '
                        '"explanation": "", "prompt_hash": null}\n')
        with pytest.raises(Exception, match="unknown study id"):
            load_triplets(path, small_ds)


def test_triplet_distinctness_enforced():
    with pytest.raises(ValueError, match="distinct"):
        Triplet(1, 1, 2, judgment=None)
