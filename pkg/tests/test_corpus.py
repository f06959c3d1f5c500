import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import minidpg as m
from minidpg.corpus import compilable_fraction

V = m.Vocab.default()


def rng(seed=0):
    return np.random.default_rng(seed)


class TestGenerateProgram:
    def test_forced_minimal_shape(self):
        cfg = m.GenConfig(max_stmts=1, max_depth=0, more_terms=0.0,
                          more_factors=0.0, factor_weights=(1.0, 0.0, 0.0))
        s = m.generate_program(rng(3), V, cfg)
        classes = [V.token_class(i) for i in s.body(V)]
        assert classes == ["IDENT", "=", "NUM", ";"]

    def test_always_compiles(self):
        cfg = m.GenConfig(seed=1)
        r = rng(7)
        for _ in range(300):
            assert m.compile_check(V, m.generate_program(r, V, cfg)).ok

    def test_fits_l_max(self):
        cfg = m.GenConfig(l_max=12, more_terms=0.6)
        r = rng(5)
        for _ in range(200):
            assert len(m.generate_program(r, V, cfg).ids) <= 12

    def test_seed_determinism(self):
        cfg = m.GenConfig()
        a = m.generate_program(rng(42), V, cfg)
        b = m.generate_program(rng(42), V, cfg)
        assert a == b

    def test_retries_exhausted(self):
        # nine terms can never fit in eight token slots
        cfg = m.GenConfig(l_max=8, term_count_weights=(0,)*8 + (1.0,),
                          max_retries=20)
        with pytest.raises(m.RetriesExhaustedError):
            m.generate_program(rng(0), V, cfg)


class TestCorrupt:
    def test_drop_semicolon_breaks(self):
        cfg = m.GenConfig(corrupt_ops=("drop",))
        s = m.tokenize(V, "x = 1 ;")
        # every one of the four interior drops breaks the grammar
        for pos in range(1, 5):
            ids = list(s.ids)
            del ids[pos]
            assert not m.compile_check(V, m.TokenSeq(tuple(ids))).ok

    def test_drop_only_full_corruption_kills_compilability(self):
        cfg = m.GenConfig(max_stmts=1, max_depth=0, more_terms=0.0,
                          more_factors=0.0, factor_weights=(1.0, 0.0, 0.0),
                          p_corrupt=1.0, corrupt_ops=("drop",))
        r = rng(11)
        for _ in range(100):
            s = m.generate_program(r, V, cfg)
            c = m.corrupt(r, V, s, cfg)
            assert not m.compile_check(V, c).ok

    def test_substitute_never_emits_specials(self):
        cfg = m.GenConfig(corrupt_ops=("substitute",))
        s = m.tokenize(V, "x = 1 + 2 ;")
        r = rng(2)
        for _ in range(200):
            c = m.corrupt(r, V, s, cfg)
            assert c.ids[0] == V.bos_id
            assert c.ids[-1] == V.eos_id
            assert V.bos_id not in c.ids[1:]
            assert V.eos_id not in c.ids[:-1]

    def test_swap_without_pair_is_identity(self):
        cfg = m.GenConfig(corrupt_ops=("swap",))
        s = V.make_seq([V.id_of("x")])
        assert m.corrupt(rng(0), V, s, cfg) == s

    def test_exactly_one_edit(self):
        cfg = m.GenConfig(corrupt_ops=("drop", "duplicate", "substitute"))
        s = m.tokenize(V, "x = 1 + 2 ;")
        r = rng(9)
        for _ in range(100):
            c = m.corrupt(r, V, s, cfg)
            assert abs(len(c.ids) - len(s.ids)) <= 1

    @given(st.integers(0, 10_000))
    @settings(max_examples=50)
    def test_output_is_valid_tokenseq(self, seed):
        cfg = m.GenConfig()
        r = rng(seed)
        s = m.generate_program(r, V, cfg)
        c = m.corrupt(r, V, s, cfg)
        V.validate_seq(c, l_max=cfg.l_max)


class TestBuildDataset:
    def test_clean_dataset_fully_compilable(self):
        cfg = m.GenConfig(seed=5)
        ds = m.build_dataset(V, cfg, n_train=300, n_test=50)
        assert compilable_fraction(V, ds.train + ds.test) == 1.0
        assert all(len(s.ids) <= cfg.l_max for s in ds.train + ds.test)

    def test_splits_disjoint_and_unique(self):
        cfg = m.GenConfig(seed=5)
        ds = m.build_dataset(V, cfg, n_train=400, n_test=100)
        all_ids = [s.ids for s in ds.train + ds.test]
        assert len(set(all_ids)) == len(all_ids) == 500
        assert not set(s.ids for s in ds.train) & set(s.ids for s in ds.test)

    def test_pure_function_of_inputs(self):
        cfg = m.GenConfig(seed=8)
        a = m.build_dataset(V, cfg, n_train=100, n_test=20)
        b = m.build_dataset(V, cfg, n_train=100, n_test=20)
        assert a.train == b.train and a.test == b.test

    def test_uniqueness_unattainable(self):
        # tiny vocabulary with one-statement support of two programs
        t = m.Vocab.tiny()
        cfg = m.GenConfig(max_stmts=1, max_depth=0, more_terms=0.0,
                          more_factors=0.0, factor_weights=(0.5, 0.5, 0.0),
                          l_max=6, max_retries=50)
        with pytest.raises(m.RetriesExhaustedError):
            m.build_dataset(t, cfg, n_train=3, n_test=1)

    def test_invalid_sizes(self):
        with pytest.raises(ValueError):
            m.build_dataset(V, m.GenConfig(), n_train=0, n_test=1)


class TestPersistence:
    def test_round_trip_and_digests(self, tmp_path):
        cfg = m.GenConfig(seed=13)
        ds = m.build_dataset(V, cfg, n_train=50, n_test=10)
        manifest = m.save_dataset(ds, V, tmp_path)
        assert set(manifest["digests"]) == {"train.txt", "test.txt"}
        loaded = m.load_dataset(V, tmp_path)
        assert loaded.train == ds.train
        assert loaded.test == ds.test

    def test_file_format_is_plain_surface_text(self, tmp_path):
        cfg = m.GenConfig(seed=13)
        ds = m.build_dataset(V, cfg, n_train=5, n_test=2)
        m.save_dataset(ds, V, tmp_path)
        lines = (tmp_path / "train.txt").read_text().splitlines()
        assert len(lines) == 5
        assert lines[0] == m.detokenize(V, ds.train[0])
        assert "<s>" not in lines[0]

    def test_digest_verification_failure(self, tmp_path):
        cfg = m.GenConfig(seed=13)
        ds = m.build_dataset(V, cfg, n_train=5, n_test=2)
        m.save_dataset(ds, V, tmp_path)
        (tmp_path / "train.txt").write_text("x = 1 ;\n")
        with pytest.raises(ValueError, match="digest"):
            m.load_dataset(V, tmp_path)

    def test_byte_identical_across_runs(self, tmp_path):
        cfg = m.GenConfig(seed=21)
        for d in ("a", "b"):
            ds = m.build_dataset(V, cfg, n_train=30, n_test=5)
            m.save_dataset(ds, V, tmp_path / d)
        assert (tmp_path / "a" / "train.txt").read_bytes() == \
            (tmp_path / "b" / "train.txt").read_bytes()
        assert (tmp_path / "a" / "manifest.json").read_bytes() == \
            (tmp_path / "b" / "manifest.json").read_bytes()
