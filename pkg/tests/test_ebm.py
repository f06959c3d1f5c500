import math
from collections import Counter

import numpy as np
import pytest

import minidpg as m
from minidpg.ebm import (BudgetExceededError, BudgetExhaustedError,
                         enumerate_terminated, importance_weights)

TINY = m.Vocab.tiny()


def eos_biased_policy(logit=12.0):
    pol = m.TabularPolicy(TINY, order=1, seed=0)
    pol.params["table"][:, :] = 0.0
    pol.params["table"][:, TINY.eos_id] = logit
    return pol


class TestScore:
    def test_non_compilable_scores_zero(self, tiny_ebm, tiny_vocab):
        s = m.tokenize(tiny_vocab, "x =")
        assert tiny_ebm.score(s) == 0.0
        assert tiny_ebm.log_score(s) == -math.inf

    def test_compilable_equals_base_probability(self, tiny_ebm, tiny_vocab):
        s = m.tokenize(tiny_vocab, "x = 0 ;")
        assert tiny_ebm.score(s) == pytest.approx(
            math.exp(tiny_ebm.base.logprob(s)))

    def test_score_bounded_by_base(self, tiny_ebm, tiny_vocab, tiny_base):
        for text in ("x = 0 ;", "x = x ;", "x ="):
            s = m.tokenize(tiny_vocab, text)
            bound = math.exp(tiny_base.logprob(s)) if s.has_eos(tiny_vocab) \
                else 1.0
            assert tiny_ebm.score(s) <= bound + 1e-15

    def test_truncated_carries_no_mass(self, tiny_ebm, tiny_vocab):
        s = m.TokenSeq((tiny_vocab.bos_id,) + (tiny_vocab.id_of("x"),) * 5)
        assert tiny_ebm.score(s) == 0.0


class TestExactZ:
    def test_accept_all_with_strong_eos_gives_one(self):
        ebm = m.Ebm(eos_biased_policy(), l_max=6, scorer=lambda s: True)
        z = m.exact_Z(ebm)
        assert z.mode == "exact" and z.stderr == 0.0
        assert z.value == pytest.approx(1.0, abs=1e-9)

    def test_uniform_four_sequences_quarter(self):
        # uniform over single-token bodies {x,=,0,;}, b accepts exactly one
        pol = m.TabularPolicy(TINY, order=1, seed=0)
        pol.params["table"][:, :] = -40.0
        pol.params["table"][TINY.bos_id, 2:] = 0.0      # body token uniform
        pol.params["table"][2:, TINY.eos_id] = 40.0     # then EOS
        ebm = m.Ebm(pol, l_max=3,
                    scorer=lambda s: s.ids[1] == TINY.id_of("x"))
        assert m.exact_Z(ebm).value == pytest.approx(0.25, abs=1e-9)

    def test_equals_expected_b_under_a(self, tiny_ebm):
        # footnote identity: Z = E_{x~a} b(x), by enumeration
        total = 0.0
        for seq, lp in enumerate_terminated(tiny_ebm.base, 6):
            if tiny_ebm.accepts(seq):
                total += math.exp(lp)
        assert m.exact_Z(tiny_ebm).value == pytest.approx(total, abs=1e-15)

    def test_budget_guard(self):
        big = m.Vocab.default()
        pol = m.TabularPolicy(big, order=1, seed=0)
        ebm = m.Ebm(pol, l_max=24)
        with pytest.raises(BudgetExceededError):
            m.exact_Z(ebm)


class TestExactP:
    def test_sums_to_one(self, tiny_ebm):
        table = m.exact_p(tiny_ebm)
        assert sum(table.values()) == pytest.approx(1.0, abs=1e-9)

    def test_support_is_compilable_support(self, tiny_ebm, tiny_vocab):
        table = m.exact_p(tiny_ebm)
        expect = {m.tokenize(tiny_vocab, "x = 0 ;").ids,
                  m.tokenize(tiny_vocab, "x = x ;").ids}
        assert set(table) == expect

    def test_point_mass_when_single_survivor(self, tiny_base, tiny_vocab):
        target = m.tokenize(tiny_vocab, "x = 0 ;").ids
        ebm = m.Ebm(tiny_base, l_max=6, scorer=lambda s: s.ids == target)
        table = m.exact_p(ebm)
        assert set(table) == {target}
        assert table[target] == pytest.approx(1.0)

    def test_b_one_recovers_base_restricted(self, tiny_base):
        ebm = m.Ebm(tiny_base, l_max=6, scorer=lambda s: True)
        table = m.exact_p(ebm)
        total = sum(math.exp(lp) for _, lp in
                    enumerate_terminated(tiny_base, 6))
        for ids, p in table.items():
            lp = tiny_base.logprob(m.TokenSeq(ids))
            assert p == pytest.approx(math.exp(lp) / total, rel=1e-9)

    def test_csv_export(self, tiny_ebm, tiny_vocab, tmp_path):
        from minidpg.ebm import export_p_csv
        table = m.exact_p(tiny_ebm)
        path = tmp_path / "p.csv"
        export_p_csv(table, tiny_vocab, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "sequence,probability"
        assert len(lines) == 1 + len(table)


class TestEstimateZ:
    def test_proposal_equals_base_reduces_to_mean_b(self, tiny_ebm,
                                                    tiny_base):
        rng = np.random.default_rng(0)
        est = m.estimate_Z(tiny_ebm, tiny_base, 2000, rng)
        rng = np.random.default_rng(0)
        seqs = tiny_base.sample_batch(rng, 2000, 6)
        frac = np.mean([tiny_ebm.accepts(s) for s in seqs])
        assert est.value == pytest.approx(frac, abs=1e-12)
        assert est.mode == "monte-carlo" and est.n == 2000

    def test_b_one_estimates_one(self):
        pol = eos_biased_policy()
        ebm = m.Ebm(pol, l_max=6, scorer=lambda s: True)
        est = m.estimate_Z(ebm, pol, 4000, np.random.default_rng(1))
        assert est.value == pytest.approx(1.0, abs=1e-6)
        assert est.stderr < 1e-6

    def test_converges_to_exact(self, tiny_ebm, tiny_base):
        z = m.exact_Z(tiny_ebm).value
        est = m.estimate_Z(tiny_ebm, tiny_base, 50_000,
                           np.random.default_rng(2))
        assert abs(est.value - z) / z < 0.02

    def test_weights_zero_for_rejected(self, tiny_ebm, tiny_base,
                                       tiny_vocab):
        seqs = [m.tokenize(tiny_vocab, "x = 0 ;"),
                m.tokenize(tiny_vocab, "x x x ;")]
        w = importance_weights(tiny_ebm, tiny_base, seqs)
        assert w[1] == 0.0
        assert w[0] == pytest.approx(1.0)  # proposal = base cancels


class TestFilterSample:
    def test_b_one_returns_first_draw(self, tiny_base):
        ebm = m.Ebm(tiny_base, l_max=6, scorer=lambda s: True)
        rng = np.random.default_rng(5)
        got = m.filter_sample(ebm, rng)
        rng = np.random.default_rng(5)
        assert got == tiny_base.sample(rng, 6)

    def test_b_zero_exhausts_budget(self, tiny_base):
        ebm = m.Ebm(tiny_base, l_max=6, scorer=lambda s: False)
        with pytest.raises(BudgetExhaustedError):
            m.filter_sample(ebm, np.random.default_rng(0), budget=50)

    def test_matches_exact_p(self, tiny_ebm):
        table = m.exact_p(tiny_ebm)
        n = 20_000
        samples = m.filter_sample_many(tiny_ebm, np.random.default_rng(3), n)
        counts = Counter(s.ids for s in samples)
        tv = 0.5 * sum(abs(counts.get(ids, 0) / n - p)
                       for ids, p in table.items())
        tv += 0.5 * sum(counts[ids] / n for ids in counts if ids not in table)
        assert tv < 0.05

    def test_unbiasedness_of_z_estimator(self, tiny_ebm, tiny_base):
        # grand mean over 1000 independent estimates (n=1000 each) vs exact Z
        z = m.exact_Z(tiny_ebm).value
        rng = np.random.default_rng(17)
        estimates = [m.estimate_Z(tiny_ebm, tiny_base, 1000, rng).value
                     for _ in range(1000)]
        grand = np.mean(estimates)
        se = np.std(estimates, ddof=1) / math.sqrt(len(estimates))
        assert abs(grand - z) <= 3 * se
