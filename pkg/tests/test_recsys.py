import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import sparse

from conftest import random_triple, small_manifest
from nere import annindex
from nere.errors import ConfigError, EmbeddingIndexError, FormatError, PreconditionError, ShapeError
from nere.recsys import (
    ModelConfig,
    NereModel,
    RecommendationCache,
    TrainConfig,
    build_cache,
    build_model,
    evaluate_mse,
    export_cache,
    load_cache,
    mf_recommend,
    model_inputs,
    predict_embedding,
    recommend,
    split_rows,
    train,
    train_mf_baseline,
    window_inputs,
)

SMALL = ModelConfig(embed_dim=4, hidden=6, dense=16, content_dim=8, input_len=4)


def _window(triple, i=0):
    um, sm, ct = window_inputs(triple, 4, np.array([i]))
    return um[0], sm[0], ct[0]


class TestBuildModel:
    def test_variants_streams(self):
        m = small_manifest()
        assert build_model(m, "both", SMALL).input_streams() == ["user_meta", "set_meta", "content"]
        assert build_model(m, "content", SMALL).input_streams() == ["content"]
        meta = build_model(m, "metadata", SMALL)
        assert meta.input_streams() == ["user_meta", "set_meta"]
        # the metadata graph has no content-sized input block
        n_cat = sum(c["kind"] == "c" for s in ("user", "set") for c in m[s])
        n_cont = 25 - n_cat
        assert meta.input_width == n_cat * SMALL.embed_dim + n_cont

    def test_metadata_forward_without_content(self):
        trip = random_triple(3, dim=8)
        model = build_model(small_manifest(), "metadata", SMALL)
        um, sm, _ = window_inputs(trip, 4)
        assert model.forward(um, sm, None).shape == (3, 8)

    def test_same_seed_same_init(self):
        a = build_model(small_manifest(), "both", SMALL, seed=3).parameters()
        b = build_model(small_manifest(), "both", SMALL, seed=3).parameters()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            build_model(small_manifest(), "nothing", SMALL)

    def test_bad_manifest(self):
        m = small_manifest()
        m["user"][0]["kind"] = "x"
        with pytest.raises(ConfigError):
            build_model(m, "both", SMALL)

    def test_cardinality_overflow(self):
        trip = random_triple(2, dim=8, card=7)
        trip.user_meta[:, :, 0] = 7
        model = build_model(small_manifest(5), "both", SMALL)
        with pytest.raises(EmbeddingIndexError, match="7"):
            model.forward(*model_inputs(model, trip))

    def test_checkpoint_round_trip(self, tmp_path):
        model = build_model(small_manifest(), "both", SMALL, seed=5)
        model.bn.running_mean = np.random.default_rng(0).normal(size=model.input_width)
        model.save(tmp_path / "m.ckpt")
        back = NereModel.load(tmp_path / "m.ckpt")
        assert back.variant == "both" and back.config == SMALL
        for k, v in model.state_arrays().items():
            assert back.state_arrays()[k].tobytes() == v.tobytes()


class TestTrain:
    def test_lr_zero_keeps_params(self):
        trip = random_triple(40, dim=8)
        model = build_model(small_manifest(), "both", SMALL, seed=1)
        before = {k: v.copy() for k, v in model.parameters().items()}
        hist = train(model, trip, TrainConfig(lr=0.0, max_epochs=3, early_stopping=False, batch_size=16))
        assert all(np.array_equal(before[k], v) for k, v in model.parameters().items())
        assert len({round(h["val_mse"], 12) for h in hist}) == 1

    def test_history_bounded_and_best_restored(self):
        trip = random_triple(60, dim=8, seed=2)
        model = build_model(small_manifest(), "both", SMALL, seed=1)
        cfg = TrainConfig(max_epochs=12, patience=2, batch_size=16, lr=0.01)
        hist = train(model, trip, cfg)
        assert 1 <= len(hist) <= 12
        _, va = split_rows(len(trip), cfg.validation_fraction, cfg.seed)
        best = min(h["val_mse"] for h in hist)
        assert evaluate_mse(model, trip, va) == pytest.approx(best, rel=0, abs=0)

    def test_deterministic(self):
        trip = random_triple(50, dim=8, seed=3)
        runs = []
        for _ in range(2):
            model = build_model(small_manifest(), "both", SMALL, seed=2)
            train(model, trip, TrainConfig(max_epochs=2, batch_size=16))
            runs.append(model.state_arrays())
        assert all(runs[0][k].tobytes() == runs[1][k].tobytes() for k in runs[0])

    def test_empty(self):
        trip = random_triple(0, dim=8)
        with pytest.raises(PreconditionError):
            train(build_model(small_manifest(), "both", SMALL), trip)

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            TrainConfig(validation_fraction=1.0).validate()


class TestPredict:
    def test_deterministic_shape(self):
        trip = random_triple(3, dim=8)
        model = build_model(small_manifest(), "both", SMALL)
        a = predict_embedding(model, _window(trip))
        assert a.shape == (8,)
        np.testing.assert_array_equal(a, predict_embedding(model, _window(trip)))
        assert np.all(np.isfinite(a))

    def test_zero_parameters(self):
        model = build_model(small_manifest(), "both", SMALL)
        for p in model.parameters().values():
            p[...] = 0.0
        out = predict_embedding(model, _window(random_triple(1, dim=8)))
        np.testing.assert_array_equal(out, np.zeros(8))

    def test_malformed_window(self):
        model = build_model(small_manifest(), "both", SMALL)
        um, sm, ct = _window(random_triple(1, dim=8))
        with pytest.raises(ShapeError):
            predict_embedding(model, (um, sm, ct[None]))


@pytest.fixture(scope="module")
def setup():
    rng = np.random.default_rng(0)
    vecs = rng.normal(size=(60, 8))
    ids = np.arange(1000, 1060)
    graph = annindex.build(vecs, annindex.IndexConfig(K=8), ids=ids)
    model = build_model(small_manifest(), "both", SMALL)
    return graph, model, random_triple(4, dim=8)


class TestRecommend:
    def test_unique_in_catalog(self, setup):
        graph, model, trip = setup
        out = recommend(model, graph, _window(trip), m=20)
        assert len(set(out.tolist())) == 20 and set(out.tolist()) <= set(range(1000, 1060))

    def test_m_too_large(self, setup):
        graph, model, trip = setup
        with pytest.raises(PreconditionError):
            recommend(model, graph, _window(trip), m=61)

    def test_build_cache(self, setup, tmp_path):
        graph, model, trip = setup
        um, sm, ct = window_inputs(trip, 4)
        keys = [(i, "Science") for i in range(4)]
        cache = build_cache(model, graph, keys, um, sm, ct, 10, "abc", 123)
        assert len(cache) == 4
        for k, (ids, _) in cache.entries.items():
            np.testing.assert_array_equal(ids, recommend(model, graph, _window(trip, k[0]), m=10))
        export_cache(cache, tmp_path / "c.jsonl")
        assert load_cache(tmp_path / "c.jsonl", catalog_ids=set(range(1000, 1060))) == cache


def _cache(n=3, m=4, seed=0):
    rng = np.random.default_rng(seed)
    c = RecommendationCache("deadbeef", 1700000000, m)
    for u in range(n):
        c.add(u + 1, "Math" if u % 2 else "Français", rng.choice(500, m, replace=False), np.sort(rng.random(m)))
    return c


class TestCache:
    def test_round_trip(self, tmp_path):
        c = _cache()
        export_cache(c, tmp_path / "c.jsonl")
        assert load_cache(tmp_path / "c.jsonl") == c

    def test_empty_cache_has_header(self, tmp_path):
        c = RecommendationCache("h", 0, 100)
        export_cache(c, tmp_path / "c.jsonl")
        lines = (tmp_path / "c.jsonl").read_text().splitlines()
        assert len(lines) == 1 and '"model_hash": "h"' in lines[0]
        assert load_cache(tmp_path / "c.jsonl") == c

    def test_truncated(self, tmp_path):
        export_cache(_cache(), tmp_path / "c.jsonl")
        data = (tmp_path / "c.jsonl").read_bytes()
        (tmp_path / "c.jsonl").write_bytes(data[:-20])
        with pytest.raises(FormatError, match="line 4"):
            load_cache(tmp_path / "c.jsonl")

    def test_missing_record(self, tmp_path):
        export_cache(_cache(), tmp_path / "c.jsonl")
        lines = (tmp_path / "c.jsonl").read_text().splitlines(keepends=True)
        (tmp_path / "c.jsonl").write_text("".join(lines[:-1]))
        with pytest.raises(FormatError, match="records"):
            load_cache(tmp_path / "c.jsonl")

    def test_corrupt_line_number(self, tmp_path):
        export_cache(_cache(), tmp_path / "c.jsonl")
        lines = (tmp_path / "c.jsonl").read_text().splitlines(keepends=True)
        lines[2] = "{not json\n"
        (tmp_path / "c.jsonl").write_text("".join(lines))
        with pytest.raises(FormatError, match="line 3"):
            load_cache(tmp_path / "c.jsonl")

    def test_out_of_catalog(self, tmp_path):
        export_cache(_cache(), tmp_path / "c.jsonl")
        with pytest.raises(FormatError, match="catalog"):
            load_cache(tmp_path / "c.jsonl", catalog_ids=set(range(3)))

    def test_add_validates(self):
        c = RecommendationCache("h", 0, 2)
        with pytest.raises(PreconditionError):
            c.add(1, "Math", [1, 1], [0.1, 0.2])
        with pytest.raises(PreconditionError):
            c.add(1, "Math", [1, 2], [0.3, 0.2])
        with pytest.raises(PreconditionError):
            c.add(1, "Math", [1], [0.3])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 20), st.integers(1, 30), st.integers(0, 2**31 - 1))
    def test_property_round_trip(self, n, m, seed):
        import tempfile
        from pathlib import Path

        c = _cache(n, m, seed)
        with tempfile.TemporaryDirectory() as d:
            export_cache(c, Path(d) / "c.jsonl")
            assert load_cache(Path(d) / "c.jsonl") == c


class TestMF:
    def test_single_user_single_set(self):
        R = sparse.csr_matrix(np.array([[0, 0, 1, 0, 0]], dtype=float))
        X = np.ones((1, 1))
        Y = np.eye(5)
        mf = train_mf_baseline(R, X, Y, d=4, epochs=300, lr=0.05, neg_ratio=4, seed=0)
        assert mf_recommend(mf, 0, 1).tolist() == [2]

    def test_zero_dimension(self):
        with pytest.raises(ConfigError):
            train_mf_baseline(sparse.csr_matrix(np.ones((1, 1))), np.ones((1, 1)), np.ones((1, 1)), d=0)

    def test_empty_interactions(self):
        with pytest.raises(PreconditionError):
            train_mf_baseline(sparse.csr_matrix((2, 3)), np.ones((2, 1)), np.ones((3, 1)))

    def test_non_binary(self):
        with pytest.raises(PreconditionError):
            train_mf_baseline(sparse.csr_matrix(np.array([[2.0]])), np.ones((1, 1)), np.ones((1, 1)))

    def test_feature_shape_mismatch(self):
        with pytest.raises(ShapeError):
            train_mf_baseline(sparse.csr_matrix(np.ones((2, 2))), np.ones((3, 1)), np.ones((2, 1)))

    def test_learns_block_structure(self):
        # two user groups with disjoint item preferences
        R = np.zeros((20, 10))
        R[:10, :5] = 1
        R[10:, 5:] = 1
        X = np.zeros((20, 2))
        X[:10, 0] = X[10:, 1] = 1
        mf = train_mf_baseline(sparse.csr_matrix(R), X, np.eye(10), d=4, epochs=100, lr=0.05, seed=1)
        assert set(mf_recommend(mf, 0, 5).tolist()) == set(range(5))
        assert set(mf_recommend(mf, 15, 5).tolist()) == set(range(5, 10))
