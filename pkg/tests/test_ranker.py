import json
import math

import numpy as np
import pytest

from recobert.catalog import Catalog, CatalogItem
from recobert.encoder import EncoderConfig, ItemEmbedding, forward, init_model, pool_batch
from recobert.objectives import c_tdm
from recobert.ranker import (
    EmbeddingStore,
    EmptyCandidates,
    PassCounter,
    RankerError,
    ScoreTable,
    StoreCorrupt,
    UnknownSeed,
    ZeroVector,
    base_scores,
    check_lambdas,
    cross_scores,
    embed_catalog,
    rank,
    rank_from_table,
    save_recommendations,
    score_table,
    znormalize,
)
from recobert.tokenizer import encode_pair, tokenize

CONFIG = EncoderConfig(vocab_size=50, max_len=16, hidden=16, layers=1, heads=2, ffn_dim=32)


def vocab_catalog(n: int) -> Catalog:
    items = [
        CatalogItem(
            id=f"c{k:02d}",
            title=f"w{k % 20} w{(k + 1) % 20}",
            description=f"w{(k + 2) % 20} w{(k + 3) % 20} w{(k + 4) % 20}",
        )
        for k in range(n)
    ]
    return Catalog.from_items(items)


def toy_store(vectors: dict[str, tuple[np.ndarray, np.ndarray]],
              fingerprint: int = 0) -> EmbeddingStore:
    ids = tuple(vectors)
    f_t = np.stack([vectors[i][0] for i in ids]).astype(np.float32)
    f_d = np.stack([vectors[i][1] for i in ids]).astype(np.float32)
    return EmbeddingStore(ids=ids, f_t=f_t, f_d=f_d, fingerprint=fingerprint)


class TestPassCounter:
    def test_add_and_reset(self):
        counter = PassCounter()
        assert counter.count == 0
        counter.add(3)
        counter.add(2)
        assert counter.count == 5
        counter.reset()
        assert counter.count == 0


class TestCheckLambdas:
    def test_valid(self):
        assert check_lambdas([1, 0.5, 0, 2]) == (1.0, 0.5, 0.0, 2.0)

    def test_wrong_arity(self):
        with pytest.raises(ValueError):
            check_lambdas([1, 2, 3])

    def test_non_finite(self):
        with pytest.raises(ValueError):
            check_lambdas([1, 2, 3, math.inf])


class TestZnormalize:
    def test_three_point_oracle(self):
        out = znormalize([1.0, 2.0, 3.0])
        r = math.sqrt(1.5)  # population std of [1,2,3] is sqrt(2/3); 1/std = sqrt(1.5)
        assert np.allclose(out, [-r, 0.0, r], atol=1e-12)

    def test_mean_zero_var_one(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rng.normal(size=rng.integers(2, 50)) * rng.uniform(0.1, 10)
            z = znormalize(x)
            assert abs(z.mean()) <= 1e-9
            assert abs(z.var() - 1.0) <= 1e-6

    def test_degenerate_columns_zeroed(self):
        assert np.array_equal(znormalize([4.0, 4.0, 4.0]), np.zeros(3))
        assert np.array_equal(znormalize([7.5]), np.zeros(1))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            znormalize([])

    def test_affine_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            x = rng.normal(size=10)
            a = rng.uniform(0.5, 5.0)
            b = rng.normal() * 3
            assert np.allclose(znormalize(a * x + b), znormalize(x), atol=1e-9)

    def test_float64_output(self):
        assert znormalize(np.array([1, 2], dtype=np.float32)).dtype == np.float64


class TestEmbeddingStore:
    def make(self):
        rng = np.random.default_rng(0)
        return EmbeddingStore(
            ids=("a", "b", "c"),
            f_t=rng.normal(size=(3, 8)).astype(np.float32),
            f_d=rng.normal(size=(3, 8)).astype(np.float32),
            fingerprint=0x1234ABCD5678,
            skipped=("broken-item",),
        )

    def test_round_trip_bit_exact(self, tmp_path):
        store = self.make()
        path = tmp_path / "emb.rcbe"
        store.save(path)
        loaded = EmbeddingStore.load(path)
        assert loaded.ids == store.ids
        assert loaded.fingerprint == store.fingerprint
        assert loaded.skipped == store.skipped
        assert np.array_equal(loaded.f_t, store.f_t)
        assert np.array_equal(loaded.f_d, store.f_d)

    def test_identical_stores_identical_bytes(self, tmp_path):
        a, b = tmp_path / "a.rcbe", tmp_path / "b.rcbe"
        self.make().save(a)
        self.make().save(b)
        assert a.read_bytes() == b.read_bytes()

    def test_lookup(self):
        store = self.make()
        assert "b" in store
        assert store.row("c") == 2
        emb = store.get("a")
        assert np.array_equal(emb.f_t, store.f_t[0])
        with pytest.raises(UnknownSeed):
            store.row("zzz")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.rcbe"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(StoreCorrupt):
            EmbeddingStore.load(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "emb.rcbe"
        self.make().save(path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(StoreCorrupt):
            EmbeddingStore.load(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "emb.rcbe"
        self.make().save(path)
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(StoreCorrupt):
            EmbeddingStore.load(path)


class TestEmbedCatalog:
    def test_covers_catalog(self, tiny_vocab):
        params = init_model(CONFIG, seed=0)
        catalog = vocab_catalog(7)
        store = embed_catalog(params, catalog, tiny_vocab, fingerprint=99)
        assert store.ids == catalog.ids
        assert store.f_t.shape == (7, 16)
        assert store.fingerprint == 99
        assert store.skipped == ()

    def test_unencodable_item_skipped_with_warning(self, tiny_vocab):
        params = init_model(CONFIG, seed=0)
        items = list(vocab_catalog(3)) + [CatalogItem(id="bad", title="w1", description="   ")]
        catalog = Catalog.from_items(items)
        with pytest.warns(UserWarning, match="bad"):
            store = embed_catalog(params, catalog, tiny_vocab)
        assert "bad" not in store
        assert store.skipped == ("bad",)
        assert len(store) == 3

    def test_batch_size_invariance(self, tiny_vocab):
        params = init_model(CONFIG, seed=1)
        catalog = vocab_catalog(9)
        a = embed_catalog(params, catalog, tiny_vocab, batch_size=1)
        b = embed_catalog(params, catalog, tiny_vocab, batch_size=32)
        assert np.allclose(a.f_t, b.f_t, atol=1e-5)
        assert np.allclose(a.f_d, b.f_d, atol=1e-5)


class TestBaseScores:
    def test_cosine_oracle(self):
        store = toy_store({
            "x": (np.array([0.0, 1.0]), np.array([1.0, 0.0])),
            "y": (np.array([1.0, 0.0]), np.array([0.0, 1.0])),
            "z": (np.array([0.0, -1.0]), np.array([-1.0, 0.0])),
        })
        seed = ItemEmbedding(f_t=np.array([0.0, 1.0]), f_d=np.array([1.0, 0.0]))
        cos_d, cos_t = base_scores(seed, store, ["x", "y", "z"])
        assert np.allclose(cos_d, [1.0, 0.0, -1.0], atol=1e-12)
        assert np.allclose(cos_t, [1.0, 0.0, -1.0], atol=1e-12)

    def test_zero_vector_raises(self):
        store = toy_store({"x": (np.zeros(2), np.ones(2))})
        seed = ItemEmbedding(f_t=np.ones(2), f_d=np.ones(2))
        with pytest.raises(ZeroVector):
            base_scores(seed, store, ["x"])


class TestCrossScores:
    def test_matches_manual_composition(self, tiny_vocab):
        params = init_model(CONFIG, seed=2)
        catalog = vocab_catalog(4)
        seed_item = catalog.get("c00")
        candidates = [catalog.get("c01"), catalog.get("c02"), catalog.get("c03")]
        tdm_sd, tdm_st = cross_scores(params, seed_item, candidates, tiny_vocab)
        for i, cand in enumerate(candidates):
            sd_seq = encode_pair(tokenize(cand.title), tokenize(seed_item.description),
                                 tiny_vocab, CONFIG.max_len)
            st_seq = encode_pair(tokenize(seed_item.title), tokenize(cand.description),
                                 tiny_vocab, CONFIG.max_len)
            hidden = forward(params, [sd_seq, st_seq])
            f_t, f_d = pool_batch(hidden, [sd_seq, st_seq])
            expected = c_tdm(f_t, f_d, params)
            assert tdm_sd[i] == pytest.approx(expected[0], abs=1e-5)
            assert tdm_st[i] == pytest.approx(expected[1], abs=1e-5)

    def test_counter_counts_two_passes_per_candidate(self, tiny_vocab):
        params = init_model(CONFIG, seed=0)
        catalog = vocab_catalog(6)
        counter = PassCounter()
        cross_scores(params, catalog.get("c00"),
                     [catalog.get(f"c{k:02d}") for k in range(1, 6)],
                     tiny_vocab, counter=counter)
        assert counter.count == 10

    def test_scores_within_unit_interval(self, tiny_vocab):
        params = init_model(CONFIG, seed=3)
        catalog = vocab_catalog(5)
        tdm_sd, tdm_st = cross_scores(params, catalog.get("c00"),
                                      [catalog.get(f"c{k:02d}") for k in range(1, 5)],
                                      tiny_vocab)
        assert np.all((tdm_sd >= 0) & (tdm_sd <= 1))
        assert np.all((tdm_st >= 0) & (tdm_st <= 1))


def random_table(seed: int, n: int = 8, with_cross: bool = True) -> ScoreTable:
    rng = np.random.default_rng(seed)
    return ScoreTable(
        seed_id="s",
        candidate_ids=tuple(f"c{k:02d}" for k in range(n)),
        cos_d=rng.uniform(-1, 1, n),
        cos_t=rng.uniform(-1, 1, n),
        tdm_sd=rng.uniform(0, 1, n) if with_cross else None,
        tdm_st=rng.uniform(0, 1, n) if with_cross else None,
    )


class TestRankFromTable:
    def test_weighted_sum_oracle(self):
        table = random_table(0)
        ranking = rank_from_table(table, lambdas=(1.0, 0.5, 2.0, 0.25))
        expected = (znormalize(table.cos_d) + 0.5 * znormalize(table.cos_t)
                    + 2.0 * znormalize(table.tdm_sd) + 0.25 * znormalize(table.tdm_st))
        by_id = {c: expected[i] for i, c in enumerate(table.candidate_ids)}
        for entry in ranking.entries:
            assert entry.total == pytest.approx(by_id[entry.id], abs=1e-12)
        totals = [e.total for e in ranking.entries]
        assert totals == sorted(totals, reverse=True)

    def test_single_lambda_orders_by_that_column(self):
        table = random_table(1)
        ranking = rank_from_table(table, lambdas=(1.0, 0.0, 0.0, 0.0))
        expected = [table.candidate_ids[i] for i in np.argsort(-table.cos_d)]
        assert list(ranking.ids()) == expected

    def test_affine_invariance_of_rankings(self):
        rng = np.random.default_rng(2)
        for trial in range(100):
            table = random_table(trial + 10)
            a = rng.uniform(0.5, 4.0, size=4)
            b = rng.normal(size=4)
            shifted = ScoreTable(
                seed_id=table.seed_id,
                candidate_ids=table.candidate_ids,
                cos_d=a[0] * table.cos_d + b[0],
                cos_t=a[1] * table.cos_t + b[1],
                tdm_sd=a[2] * table.tdm_sd + b[2],
                tdm_st=a[3] * table.tdm_st + b[3],
            )
            assert rank_from_table(table).ids() == rank_from_table(shifted).ids()

    def test_tie_break_ascending_id(self):
        n = 5
        table = ScoreTable(
            seed_id="s",
            candidate_ids=("e", "b", "d", "a", "c"),
            cos_d=np.ones(n), cos_t=np.ones(n),
            tdm_sd=np.ones(n), tdm_st=np.ones(n),
        )
        # all columns degenerate, all totals zero: pure id order
        ranking = rank_from_table(table)
        assert ranking.ids() == ("a", "b", "c", "d", "e")
        assert all(e.total == 0.0 for e in ranking.entries)

    def test_missing_cross_columns_rejected(self):
        table = random_table(3, with_cross=False)
        with pytest.raises(RankerError):
            rank_from_table(table, lambdas=(1, 1, 1, 1))
        ranking = rank_from_table(table, lambdas=(1, 1, 0, 0))
        assert ranking.entries[0].tdm_sd is None

    def test_position_lookup(self):
        ranking = rank_from_table(random_table(4))
        first = ranking.ids()[0]
        assert ranking.position(first) == 1
        with pytest.raises(KeyError):
            ranking.position("nope")


class TestScoreTableAndRank:
    def setup_model(self, tiny_vocab, n=6):
        params = init_model(CONFIG, seed=5)
        catalog = vocab_catalog(n)
        store = embed_catalog(params, catalog, tiny_vocab)
        return params, catalog, store

    def test_seed_excluded_from_pool(self, tiny_vocab):
        params, catalog, store = self.setup_model(tiny_vocab)
        table = score_table(params, catalog, store, tiny_vocab, "c02", need_cross=False)
        assert "c02" not in table.candidate_ids
        assert len(table.candidate_ids) == 5
        explicit = score_table(params, catalog, store, tiny_vocab, "c02",
                               candidate_ids=["c02", "c00", "c01"], need_cross=False)
        assert explicit.candidate_ids == ("c00", "c01")

    def test_unknown_seed(self, tiny_vocab):
        params, catalog, store = self.setup_model(tiny_vocab)
        with pytest.raises(UnknownSeed):
            score_table(params, catalog, store, tiny_vocab, "ghost")

    def test_empty_candidates(self, tiny_vocab):
        params, catalog, store = self.setup_model(tiny_vocab)
        with pytest.raises(EmptyCandidates):
            score_table(params, catalog, store, tiny_vocab, "c00", candidate_ids=["c00"])

    def test_zero_cross_weights_skip_cross_passes(self, tiny_vocab):
        params, catalog, store = self.setup_model(tiny_vocab)
        counter = PassCounter()
        ranking = rank("c00", catalog, store, params, tiny_vocab,
                       lambdas=(1, 1, 0, 0), counter=counter)
        assert counter.count == 0
        assert all(e.tdm_sd is None and e.tdm_st is None for e in ranking.entries)

    def test_skip_cross_flag(self, tiny_vocab):
        params, catalog, store = self.setup_model(tiny_vocab)
        counter = PassCounter()
        ranking = rank("c00", catalog, store, params, tiny_vocab,
                       lambdas=(1, 1, 1, 1), skip_cross=True, counter=counter)
        assert counter.count == 0
        assert len(ranking) == 5

    def test_full_rank_runs_cross_passes(self, tiny_vocab):
        params, catalog, store = self.setup_model(tiny_vocab)
        counter = PassCounter()
        ranking = rank("c00", catalog, store, params, tiny_vocab, counter=counter)
        assert counter.count == 2 * 5
        assert all(e.tdm_sd is not None for e in ranking.entries)

    def test_consistent_with_manual_table(self, tiny_vocab):
        params, catalog, store = self.setup_model(tiny_vocab)
        counter = PassCounter()
        via_rank = rank("c01", catalog, store, params, tiny_vocab, counter=counter)
        table = score_table(params, catalog, store, tiny_vocab, "c01", counter=counter)
        via_table = rank_from_table(table)
        assert via_rank == via_table


class TestSaveRecommendations:
    def test_schema_and_truncation(self, tmp_path):
        rankings = [rank_from_table(random_table(7, n=6))]
        path = tmp_path / "recs.jsonl"
        save_recommendations(rankings, path, top=3)
        lines = [json.loads(line) for line in path.read_text().splitlines()]
        assert len(lines) == 1
        record = lines[0]
        assert record["seed_id"] == "s"
        assert len(record["ranked"]) == 3
        assert set(record["ranked"][0]) == {"id", "total", "cos_d", "cos_t", "tdm_sd", "tdm_st"}
        totals = [r["total"] for r in record["ranked"]]
        assert totals == sorted(totals, reverse=True)

    def test_no_truncation_by_default(self, tmp_path):
        rankings = [rank_from_table(random_table(8, n=6))]
        path = tmp_path / "recs.jsonl"
        save_recommendations(rankings, path)
        record = json.loads(path.read_text().splitlines()[0])
        assert len(record["ranked"]) == 6
