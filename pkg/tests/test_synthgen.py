import dataclasses
import itertools
from collections import Counter

import numpy as np
import pytest

from nere import synthgen
from nere.errors import ConfigError, PreconditionError
from nere.synthgen import BROAD_SUBJECTS, SynthConfig, generate_catalog, generate_sessions, successor_rate
from nere.textvec import tokenize


def _jaccard(a, b):
    return len(a & b) / len(a | b) if a | b else 0.0


class TestConfig:
    @pytest.mark.parametrize("field", ["n_sets", "n_users", "n_topics", "chapters_per_topic", "vocab_size"])
    def test_zero_count_rejected(self, field):
        with pytest.raises(ConfigError):
            generate_catalog(SynthConfig(**{field: 0}))

    @pytest.mark.parametrize("s", [-0.1, 1.5])
    def test_sequentiality_range(self, s):
        with pytest.raises(ConfigError):
            SynthConfig(sequentiality=s).validate()

    def test_sets_must_fit_chains(self):
        with pytest.raises(ConfigError):
            SynthConfig(n_sets=50, n_topics=2, chapters_per_topic=10).validate()


class TestCatalog:
    def test_deterministic(self, tmp_path):
        cfg = SynthConfig(n_sets=100, n_topics=10, chapters_per_topic=10, rng_seed=7)
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        synthgen.write_jsonl(generate_catalog(cfg), a)
        synthgen.write_jsonl(generate_catalog(cfg), b)
        assert a.read_bytes() == b.read_bytes()

    def test_invariants(self, tiny_config, tiny_catalog):
        assert len(tiny_catalog) == tiny_config.n_sets
        ids = [r.set_id for r in tiny_catalog]
        assert len(set(ids)) == len(ids)
        for r in tiny_catalog:
            assert r.broad_subject in BROAD_SUBJECTS
            assert tokenize(r.terms) and tokenize(r.definitions)
            assert r.mean_studier_age >= 13.0
            assert r.mean_session_length > 0 and r.studier_count >= 0 and r.total_views >= 0
            assert 1 <= r.chapter_index <= tiny_config.chapters_per_topic

    def test_one_topic_one_chapter(self, tiny_catalog):
        pairs = [(r.topic_id, r.chapter_index) for r in tiny_catalog]
        assert len(set(pairs)) == len(pairs)

    def test_within_topic_overlap_exceeds_cross_topic(self):
        cat = generate_catalog(SynthConfig(n_sets=200, n_topics=20, chapters_per_topic=10, rng_seed=7))
        toks = [set(tokenize(r.terms)) | set(tokenize(r.definitions)) for r in cat]
        within, across = [], []
        for i, j in itertools.combinations(range(len(cat)), 2):
            (within if cat[i].topic_id == cat[j].topic_id else across).append(_jaccard(toks[i], toks[j]))
        assert np.mean(within) > np.mean(across)

    def test_review_mode_marks_closing_sets(self, tiny_catalog):
        chains, _ = synthgen._chain_index(tiny_catalog)
        for r in tiny_catalog:
            closing = r.chapter_index == max(chains[r.topic_id])
            assert (r.preferred_study_mode == synthgen.REVIEW_MODE) == closing

    def test_jsonl_round_trip(self, tmp_path, tiny_catalog):
        path = tmp_path / "sets.jsonl"
        synthgen.write_jsonl(tiny_catalog, path)
        assert synthgen.read_catalog(path) == tiny_catalog
        first = path.read_text(encoding="utf-8").splitlines()[0]
        for f in dataclasses.fields(synthgen.SetRecord):
            assert f'"{f.name}"' in first


class TestSessions:
    def test_invariants(self, tiny_config, tiny_catalog, tiny_sessions):
        by_id = {r.set_id: r for r in tiny_catalog}
        per_user = {}
        for s in tiny_sessions:
            per_user.setdefault(s.user_id, []).append(s)
            assert s.end_timestamp >= s.begin_timestamp
            assert abs(s.session_length - (s.end_timestamp - s.begin_timestamp) / 60.0) <= 1e-6
            assert s.obfuscated_ip.endswith(".0")
            assert s.broad_subject == by_id[s.set_id].broad_subject
        assert len(per_user) == tiny_config.n_users
        for recs in per_user.values():
            assert len(recs) >= tiny_config.sessions_per_user_min
            begins = [r.begin_timestamp for r in recs]
            assert all(a < b for a, b in zip(begins, begins[1:]))

    def test_empty_catalog(self, tiny_config):
        with pytest.raises(PreconditionError):
            generate_sessions(tiny_config, [])

    def test_deterministic(self, tiny_config, tiny_catalog, tiny_sessions):
        assert generate_sessions(tiny_config, tiny_catalog) == tiny_sessions

    def test_full_sequentiality_walks_chains(self, tiny_config, tiny_catalog):
        cfg = dataclasses.replace(tiny_config, sequentiality=1.0)
        log = generate_sessions(cfg, tiny_catalog)
        chains, _ = synthgen._chain_index(tiny_catalog)
        by_id = {r.set_id: r for r in tiny_catalog}
        for prev, cur in zip(log, log[1:]):
            if prev.user_id != cur.user_id:
                continue
            nxt = synthgen.successor(chains, by_id[prev.set_id])
            if nxt is not None:
                assert cur.set_id == nxt.set_id

    def test_zero_sequentiality_matches_chance(self):
        # uniform same-subject moves: successor rate ~ E[1 / |subject|] over eligible transitions
        cfg = SynthConfig(n_users=3000, n_sets=400, n_topics=40, chapters_per_topic=10,
                          sequentiality=0.0, regional_jump=0.0, detour_return=False, rng_seed=5)
        cat = generate_catalog(cfg)
        log = generate_sessions(cfg, cat)
        chains, by_subject = synthgen._chain_index(cat)
        by_id = {r.set_id: r for r in cat}
        hits = 0
        expected = []
        for prev, cur in zip(log, log[1:]):
            if prev.user_id != cur.user_id:
                continue
            p = by_id[prev.set_id]
            nxt = synthgen.successor(chains, p)
            if nxt is None:
                continue
            expected.append(1.0 / len(by_subject[p.broad_subject]))
            hits += int(cur.set_id == nxt.set_id)
        n = len(expected)
        p0 = float(np.mean(expected))
        assert abs(hits / n - p0) <= 3 * np.sqrt(p0 * (1 - p0) / n)

    def test_planted_rate(self):
        cfg = SynthConfig(n_users=2500, n_sets=2000, sequentiality=0.9, rng_seed=11)
        cat = generate_catalog(cfg)
        hits, eligible = successor_rate(generate_sessions(cfg, cat), cat)
        assert eligible >= 10000
        assert abs(hits / eligible - 0.9) <= 3 * np.sqrt(0.9 * 0.1 / eligible)

    def test_regional_jumps_follow_syllabus(self, tiny_config, tiny_catalog):
        cfg = dataclasses.replace(tiny_config, sequentiality=0.0, detour_return=False)
        log = generate_sessions(cfg, tiny_catalog)
        chains, _ = synthgen._chain_index(tiny_catalog)
        syllabus = synthgen._regional_syllabus(chains, cfg.n_regions)
        by_id = {r.set_id: r for r in tiny_catalog}
        prefixes = {}
        for s in log:
            prefixes.setdefault(s.user_id, []).append(s.obfuscated_ip.rsplit(".", 1)[0])
        # the home prefix is the majority one; 5% of sessions roam
        home = {}
        for u, ps in prefixes.items():
            top, count = Counter(ps).most_common(1)[0]
            if 2 * count > len(ps):
                home[u] = top
        moves = 0
        for prev, cur in zip(log, log[1:]):
            if prev.user_id == cur.user_id and prev.user_id in home:
                region = synthgen.geo_region(home[prev.user_id], cfg.n_regions)
                assert by_id[cur.set_id].topic_id in syllabus[region, prev.broad_subject]
                assert by_id[cur.set_id].chapter_index == min(chains[by_id[cur.set_id].topic_id])
                moves += 1
        assert moves > 0

    def test_syllabus_bands_partition_each_subject(self, tiny_config, tiny_catalog):
        chains, _ = synthgen._chain_index(tiny_catalog)
        syllabus = synthgen._regional_syllabus(chains, tiny_config.n_regions)
        for subject in {r.broad_subject for r in tiny_catalog}:
            topics = sorted({r.topic_id for r in tiny_catalog if r.broad_subject == subject})
            bands = [syllabus[r, subject] for r in range(tiny_config.n_regions)]
            assert all(bands) and sorted(set().union(*bands)) == topics

    def test_language_follows_home_region(self, tiny_config, tiny_catalog):
        log = generate_sessions(dataclasses.replace(tiny_config, n_users=600), tiny_catalog)
        first = {}
        for s in log:
            first.setdefault(s.user_id, s)
        match = [
            s.preferred_term_language
            == synthgen.LANGUAGES[synthgen.geo_region(s.obfuscated_ip.rsplit(".", 1)[0], tiny_config.n_regions) % len(synthgen.LANGUAGES)]
            for s in first.values()
        ]
        # 80% by construction plus chance agreement, less roaming first sessions
        assert np.mean(match) > 0.7

    def test_detours_return_to_the_chain(self, tiny_config, tiny_catalog):
        cfg = dataclasses.replace(tiny_config, n_users=400, sequentiality=0.5)
        log = generate_sessions(cfg, tiny_catalog)
        chains, _ = synthgen._chain_index(tiny_catalog)
        by_id = {r.set_id: r for r in tiny_catalog}
        detours = 0
        for a, b, c in zip(log, log[1:], log[2:]):
            if not a.user_id == b.user_id == c.user_id:
                continue
            nxt = synthgen.successor(chains, by_id[a.set_id])
            if nxt is None or b.set_id == nxt.set_id:
                continue
            # an interruption visits a closing set, then the chain resumes
            x = by_id[b.set_id]
            assert x.chapter_index == max(chains[x.topic_id])
            assert c.set_id == nxt.set_id
            detours += 1
        assert detours > 100

    def test_jsonl_round_trip(self, tmp_path, tiny_sessions):
        path = tmp_path / "sessions.jsonl"
        synthgen.write_jsonl(tiny_sessions, path)
        assert synthgen.read_sessions(path) == tiny_sessions


class TestGeo:
    def test_obfuscate(self):
        assert synthgen.obfuscate_ip("10.1.2.77") == "10.1.2.0"

    def test_obfuscate_rejects_garbage(self):
        with pytest.raises(ValueError):
            synthgen.obfuscate_ip("10.1.2")

    def test_regions_balanced(self):
        counts = np.bincount([synthgen.geo_region(p) for p in synthgen.GEO_TABLE], minlength=synthgen.N_REGIONS)
        assert counts.min() == counts.max() == len(synthgen.GEO_TABLE) // synthgen.N_REGIONS
