import math

import numpy as np
import pytest
from scipy import stats

from wmlab import kernels, lm
from wmlab.attacks import SynonymTable
from wmlab.detector import exp_alignment_test, green_hits
from wmlab.errors import InvalidInput, InvalidParameter
from wmlab.watermark import (
    ExpKeySequence, SchemeConfig, SchemeKind, WatermarkKey, bias_logits, exp_sample, green_count,
    kgw_partition, multiset_hash, sirlite_bias_vector, unigram_partition, watermarked_generate,
)

KEY = WatermarkKey(0xC0FFEE)


def test_green_list_sizes():
    assert len(kgw_partition(KEY, [3], 0.5, 10)) == 5
    assert len(unigram_partition(KEY, 0.25, 1000)) == 250
    assert green_count(0.25, 5000) == 1250
    for V in (7, 11, 5000):
        assert len(kgw_partition(KEY, [1], 0.3, V)) == round(0.3 * V + 1e-9)


def test_partitions_deterministic_and_keyed():
    a = kgw_partition(KEY, [4, 9], 0.25, 500, width=2)
    assert a == kgw_partition(KEY, [4, 9], 0.25, 500, width=2)
    assert a != kgw_partition(KEY, [4, 8], 0.25, 500, width=2)
    assert a != kgw_partition(WatermarkKey(1), [4, 9], 0.25, 500, width=2)
    assert unigram_partition(KEY, 0.25, 500) == unigram_partition(KEY, 0.25, 500)
    assert a.green | a.red == frozenset(range(500)) and not (a.green & a.red)


def test_gamma_validation():
    for g in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(InvalidParameter):
            kgw_partition(KEY, [1], g, 10)
        with pytest.raises(InvalidParameter):
            SchemeConfig(SchemeKind.KGW, KEY, gamma=g)


def test_key_repr_hides_secret():
    assert "C0FFEE".lower() not in repr(KEY).lower() and str(0xC0FFEE) not in repr(KEY)


def test_green_membership_uniform_over_keys():
    # each token is green for about gamma of the keys
    V, trials = 50, 4000
    hits = np.zeros(V)
    for s in range(trials):
        hits += kgw_partition(WatermarkKey(s), [7], 0.2, V).mask
    assert stats.chisquare(hits, np.full(V, hits.sum() / V)).pvalue > 1e-3


def test_sirlite_bias_is_order_and_class_invariant():
    table = SynonymTable.frequency_buckets(100)
    cls = table.class_of
    ctx = [5, 17, 42, 63]
    base = sirlite_bias_vector(KEY, ctx, table.num_classes, 2.0, 100, cls)
    assert np.array_equal(base, sirlite_bias_vector(KEY, ctx[::-1], table.num_classes, 2.0, 100, cls))
    swapped = [int(table.members_of(int(cls[5]))[0]), 17, 42, 63]
    assert swapped[0] != 5
    assert np.array_equal(base, sirlite_bias_vector(KEY, swapped, table.num_classes, 2.0, 100, cls))
    # constant within a class, +-delta only
    for c in range(table.num_classes):
        assert len(set(base[table.members_of(c)])) == 1
    assert set(np.unique(base)) <= {-2.0, 2.0}
    assert multiset_hash([], cls) == 0


def test_bias_logits():
    logits = np.random.default_rng(0).normal(size=10)
    part = kgw_partition(KEY, [1], 0.5, 10)
    assert np.array_equal(bias_logits(logits, part, 0.0), logits)
    out = bias_logits(np.zeros(10), part, 2.0)
    p = np.exp(out) / np.exp(out).sum()
    assert p[part.mask].sum() == pytest.approx(math.e ** 2 / (math.e ** 2 + 1))
    assert p[part.mask].sum() == pytest.approx(0.881, abs=5e-4)
    with pytest.raises(InvalidInput):
        bias_logits(np.zeros(9), part, 2.0)
    with pytest.raises(InvalidInput):
        bias_logits(np.zeros(9), np.zeros(10))


def test_exp_sample_examples():
    xi = np.array([0.3, 0.9, 0.5, 0.1])
    assert exp_sample([0, 0, 1, 0], xi) == 2
    assert exp_sample([0.5, 0.5, 0, 0], xi) == 1
    with pytest.raises(InvalidInput):
        exp_sample([0, 0, 0, 0], xi)
    with pytest.raises(InvalidInput):
        exp_sample([1, 0], xi)


def test_exp_key_sequence_rows():
    seq = ExpKeySequence(KEY, 16, 40, shift=3)
    assert seq.row_index(0) == 3 and seq.row_index(13) == 0
    ent = seq.entries
    assert ent.shape == (16, 40) and ((ent > 0) & (ent < 1)).all()
    assert ent[5, 7] == seq.value(5, 7)
    with pytest.raises(InvalidParameter):
        ExpKeySequence(KEY, 0, 10)


def _chi2_first_token(model, prompt, scheme, expected, n=20000):
    toks = np.array([watermarked_generate(model, prompt, scheme, 1, rng_seed=s).ids[0] for s in range(n)])
    top = np.argsort(-expected)[:25]
    obs = np.array([(toks == t).sum() for t in top] + [0])
    obs[-1] = n - obs[:-1].sum()
    exp = np.append(expected[top] * n, 0)
    exp[-1] = n - exp[:-1].sum()
    return stats.chisquare(obs, exp).pvalue


@pytest.fixture(scope="module")
def small_model(ref_data):
    vocab, flat, _ = ref_data
    return lm.train_ngram(flat[:30000], 2, 0.5, "s", vocab)


def test_sampling_matches_biased_distribution(small_model, ref_data):
    _, flat, _ = ref_data
    m, V = small_model, small_model.vocab_size
    prompt = flat[200:201]
    p0 = lm.next_token_distribution(m, prompt)
    assert _chi2_first_token(m, prompt, None, p0) > 1e-3

    kgw = SchemeConfig(SchemeKind.KGW, KEY, gamma=0.25, delta=2.0)
    mask = kgw_partition(KEY, prompt, 0.25, V).mask
    p = p0 * np.where(mask, math.e ** 2, 1.0)
    assert _chi2_first_token(m, prompt, kgw, p / p.sum()) > 1e-3

    # delta = 0 leaves the distribution unchanged
    flat_scheme = SchemeConfig(SchemeKind.KGW, KEY, gamma=0.25, delta=0.0)
    assert _chi2_first_token(m, prompt, flat_scheme, p0) > 1e-3

    table = SynonymTable.frequency_buckets(V)
    sir = SchemeConfig(SchemeKind.SIRLITE, KEY, delta=2.0, class_of=table.class_of)
    bias = sirlite_bias_vector(KEY, [], table.num_classes, 2.0, V, table.class_of)
    q = p0 * np.exp(bias)
    assert _chi2_first_token(m, prompt, sir, q / q.sum()) > 1e-3


def test_strong_kgw_is_mostly_green(ref_models, ref_prompts):
    V = ref_models[0].vocab_size
    scheme = SchemeConfig(SchemeKind.KGW, KEY, gamma=0.25, delta=4.0)
    for m in ref_models:
        for j in range(50 // len(ref_models) + 1):
            t = watermarked_generate(m, ref_prompts[j], scheme, 200, rng_seed=j)
            hits, _ = green_hits(np.concatenate([ref_prompts[j][-1:], t.ids]), scheme, V)
            assert hits.mean() >= 0.5


def test_recorded_seeds_roundtrip(ref_models, ref_prompts):
    m, prompt = ref_models[1], ref_prompts[3]
    scheme = SchemeConfig(SchemeKind.KGW, KEY, gamma=0.25, delta=2.0, context_width=2)
    text, trace = watermarked_generate(m, prompt, scheme, 30, rng_seed=1, record=True)
    hist = np.concatenate([prompt, text.ids])
    for i in range(30):
        ctx = hist[len(prompt) + i - 2 : len(prompt) + i]
        assert int(trace.seeds[i]) == kernels.green_seed(KEY.secret, kernels.context_hash(ctx))


def test_exp_generation_replays_against_own_key(ref_models, ref_prompts):
    scheme = SchemeConfig(SchemeKind.EXP, KEY, exp_key_length=256)
    for j, m in enumerate(ref_models):
        t = watermarked_generate(m, ref_prompts[j], scheme, 200, rng_seed=j)
        res = exp_alignment_test(t, KEY, 256, num_permutations=100, rng_seed=j)
        assert res.p_value == pytest.approx(1 / 101)
        assert res.is_watermarked


def test_exp_kernel_matches_exp_sample(small_model, ref_data):
    _, flat, _ = ref_data
    m = small_model
    scheme = SchemeConfig(SchemeKind.EXP, KEY, exp_key_length=8, exp_shift=2)
    prompt = flat[50:52]
    text = watermarked_generate(m, prompt, scheme, 40, rng_seed=0)
    seq = ExpKeySequence(KEY, 8, m.vocab_size, shift=2)
    hist = list(prompt)
    for i, tok in enumerate(text.ids):
        p = lm.next_token_distribution(m, hist)
        assert exp_sample(p, seq.row(seq.row_index(i))) == tok
        hist.append(tok)


def test_exp_marginals_chi_square_small():
    p = np.array([0.4, 0.25, 0.2, 0.1, 0.05])
    draws = [exp_sample(p, ExpKeySequence(WatermarkKey(s), 1, 5).row(0)) for s in range(20000)]
    obs = np.bincount(draws, minlength=5)
    assert stats.chisquare(obs, p * len(draws)).pvalue > 0.01


def test_scheme_config_validation():
    with pytest.raises(InvalidParameter):
        SchemeConfig(SchemeKind.KGW, KEY, context_width=0)
    with pytest.raises(InvalidParameter):
        SchemeConfig(SchemeKind.SIRLITE, KEY)
    with pytest.raises(InvalidParameter):
        SchemeConfig(SchemeKind.KGW, KEY, delta=-1)
    with pytest.raises(InvalidParameter):
        SchemeConfig(SchemeKind.EXP, KEY, exp_key_length=0)
    s = SchemeConfig(SchemeKind.UNIGRAM, KEY, context_width=3)
    assert s.context_width == 0
    assert "secret" not in str(s.public_dict()) and "key" not in s.public_dict()


def test_negative_length_rejected(ref_models):
    with pytest.raises(InvalidParameter):
        watermarked_generate(ref_models[0], [2], None, -1)
