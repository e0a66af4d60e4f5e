import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import labels_with, make_stay
from visitemb.corpus import N_LABELS, Stay, generate_synthetic, split_patients
from visitemb.errors import ConfigError, IntegrityError, ParseError
from visitemb.featurize import (
    PAD,
    UNK,
    Preprocessing,
    aggregate_structured,
    apply,
    build_vocabulary,
    chi2_scores,
    compute_truncation_length,
    encode_text,
    fit_preprocessing,
    select_features,
)


def brute_chi2(X, Y):
    """Contingency tables built one cell at a time."""
    n, d = X.shape
    out = np.zeros(d)
    for f in range(d):
        best = 0.0
        for l in range(Y.shape[1]):
            total = 0.0
            obs = {0: 0.0, 1: 0.0}
            count = {0: 0, 1: 0}
            for i in range(n):
                c = int(Y[i, l])
                obs[c] += X[i, f]
                count[c] += 1
                total += X[i, f]
            stat = 0.0
            for c in (0, 1):
                exp = count[c] / n * total
                if exp > 0:
                    stat += (obs[c] - exp) ** 2 / exp
            best = max(best, stat)
        out[f] = best
    return out


# -- vocabulary ---------------------------------------------------------------


def test_empty_vocabulary():
    v = build_vocabulary([])
    assert len(v) == 2
    assert v.index("anything") == UNK


def test_min_count_threshold():
    stays = [make_stay("a", words=["fever"] * 5 + ["rare"] * 4)]
    v = build_vocabulary(stays, 5)
    assert "fever" in v and "rare" not in v
    assert v.index("fever") == 2


def test_vocabulary_order_frequency_then_name():
    stays = [make_stay("a", words=["b"] * 3 + ["a"] * 3 + ["c"] * 7)]
    v = build_vocabulary(stays, 1)
    assert v.words == ("c", "a", "b")
    assert [v.index(w) for w in v.words] == [2, 3, 4]


def test_min_count_must_be_positive():
    with pytest.raises(ConfigError):
        build_vocabulary([], 0)


# -- truncation ------------------------------------------------------------------


def test_nearest_rank_percentile():
    stays = [make_stay(str(n), words=["w"] * n) for n in range(1, 11)]
    assert compute_truncation_length(stays, 90) == 9


@pytest.mark.parametrize("p", [1, 50, 90, 100])
def test_single_stay_percentile(p):
    assert compute_truncation_length([make_stay("a", words=["w"] * 17)], p) == 17


def test_truncation_empty_set_is_config_error():
    with pytest.raises(ConfigError):
        compute_truncation_length([], 90)


def test_length_concatenates_documents():
    s = Stay("a", "p", [["x"] * 3, ["y"] * 4])
    assert compute_truncation_length([s], 90) == 7


# -- encoding ---------------------------------------------------------------------


def test_encode_empty():
    assert encode_text(make_stay("a"), build_vocabulary([]), 10) == []


def test_encode_unknown_maps_to_unk():
    v = build_vocabulary([make_stay("a", words=["known"] * 5)], 5)
    assert encode_text(make_stay("b", words=["known", "other", "known"]), v, 10) == [2, UNK, 2]


def test_encode_truncates_to_prefix():
    words = [f"w{i}" for i in range(20)]
    v = build_vocabulary([make_stay("a", words=words)], 1)
    full = encode_text(make_stay("b", words=words), v, 100)
    assert encode_text(make_stay("b", words=words), v, 16) == full[:16]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.sampled_from("abcdefg"), max_size=8), max_size=4), st.integers(1, 30))
def test_encoding_bounds(docs, max_len):
    v = build_vocabulary([Stay("f", "p", [list("abcd")])], 1)
    s = Stay("s", "p", docs)
    ids = encode_text(s, v, max_len)
    assert len(ids) <= min(max_len, sum(map(len, docs)))
    assert all(PAD < i < len(v) for i in ids)


# -- aggregation ------------------------------------------------------------------


def test_aggregate_empty():
    assert aggregate_structured(make_stay("a")) == {}


def test_aggregate_sums_over_time():
    s = make_stay("a", events=[("lab_x", 1.0, 0.0), ("lab_x", 2.0, 5.0)])
    assert aggregate_structured(s) == {"lab_x": 3.0}


@settings(max_examples=50, deadline=None)
@given(st.permutations([("a", 1.0, 0.0), ("b", 2.5, 1.0), ("a", 0.5, 2.0), ("c", 4.0, 3.0)]))
def test_aggregate_order_invariant(events):
    assert aggregate_structured(make_stay("a", events=events)) == {"a": 1.5, "b": 2.5, "c": 4.0}


# -- chi-square ---------------------------------------------------------------------


def test_chi2_zero_feature():
    Y = np.zeros((4, N_LABELS))
    Y[:2, 0] = 1
    assert chi2_scores(np.zeros((4, 1)), Y)[0] == 0.0


def test_chi2_hand_example():
    Y = np.zeros((4, N_LABELS))
    Y[:2, 0] = 1
    X = np.array([[1.0], [1.0], [0.0], [0.0]])
    assert chi2_scores(X, Y)[0] == pytest.approx(2.0, abs=1e-12)


def test_chi2_rejects_negative():
    with pytest.raises(IntegrityError):
        chi2_scores(-np.ones((2, 1)), np.zeros((2, N_LABELS)))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 50), st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_chi2_matches_brute_force(n, d, seed):
    r = np.random.default_rng(seed)
    X = r.poisson(1.0, (n, d)) * r.uniform(0, 3, (n, d))
    Y = (r.random((n, N_LABELS)) < r.uniform(0.05, 0.95, N_LABELS)).astype(float)
    np.testing.assert_allclose(chi2_scores(X, Y), brute_chi2(X, Y), rtol=1e-9, atol=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
def test_chi2_rank_invariant_under_global_scaling(seed, c):
    r = np.random.default_rng(seed)
    X = r.poisson(2.0, (40, 12)).astype(float)
    Y = (r.random((40, N_LABELS)) < 0.3).astype(float)
    base, scaled = chi2_scores(X, Y), chi2_scores(c * X, Y)
    np.testing.assert_allclose(scaled, c * base, rtol=1e-9, atol=1e-12)
    names = [f"f{i:02d}" for i in range(12)]
    a = select_features(dict(zip(names, base)), 5).names
    b = select_features(dict(zip(names, scaled)), 5).names
    assert set(a) == set(b)


# -- selection ----------------------------------------------------------------------


def test_select_top_k():
    sel = select_features({"a": 5, "b": 2, "c": 9}, 2)
    assert sel.names == ("c", "a")
    assert sel.column("c") == 0 and sel.column("a") == 1 and sel.column("b") is None


def test_select_all_is_identity():
    scores = {"a": 5, "b": 2, "c": 9}
    assert set(select_features(scores, 3).names) == set(scores)


def test_select_ties_by_name():
    assert select_features({"z": 1.0, "m": 1.0, "a": 1.0}, 2).names == ("a", "m")


def test_select_too_many():
    with pytest.raises(ConfigError):
        select_features({"a": 1.0}, 2)


# -- apply / fitted state ---------------------------------------------------------------


def _fitted():
    stays = [
        make_stay("a", words=["x"] * 5 + ["y"] * 5, events=[("f1", 1.0, 0.0)], labels=labels_with(0)),
        make_stay("b", words=["x"] * 2, events=[("f2", 3.0, 0.0)], labels=labels_with(1)),
    ]
    return fit_preprocessing(stays, 1, min_count=5)


def test_apply_empty_stay():
    pre = _fitted()
    s = make_stay("e", labels=labels_with(3))
    enc = pre.encode(s)
    assert enc.token_ids == () and enc.structured == {} and enc.labels == s.labels


def test_apply_drops_unselected():
    pre = _fitted()
    unselected = [n for n in ("f1", "f2") if n not in pre.selector.names][0]
    assert pre.encode(make_stay("e", events=[(unselected, 2.0, 0.0)])).structured == {}


def test_apply_is_idempotent():
    pre = _fitted()
    s = make_stay("e", words=["x", "q"], events=[("f1", 1.0, 0.0), ("f2", 1.0, 1.0)])
    assert apply(pre.selector, pre.vocabulary, pre.max_len, s) == pre.encode(s)


def test_fit_uses_only_training_stays(small_config):
    ds = generate_synthetic(small_config)
    sp = split_patients(ds, 5, 5, 5, seed=0)
    train = sp.stays(ds, "train")
    pre = fit_preprocessing(train, 20)
    snapshot = pre.to_json()
    held_out = pre.encode_all(sp.stays(ds, "validation", "test"))
    assert pre.to_json() == snapshot
    assert pre == fit_preprocessing(train, 20)
    for enc in held_out:
        assert all(i < pre.vocab_size for i in enc.token_ids)
        assert all(0 <= c < pre.n_structured for c in enc.structured)
        assert len(enc.token_ids) <= pre.max_len


def test_max_len_override():
    stays = [make_stay(str(n), words=["w"] * n) for n in range(1, 11)]
    assert fit_preprocessing(stays, 0, 1, 90).max_len == 9
    assert fit_preprocessing(stays, 0, 1, 90, max_len=4).max_len == 4


def test_preprocessing_roundtrip(tmp_path, small_config):
    ds = generate_synthetic(small_config)
    pre = fit_preprocessing(ds.stays, 10)
    pre.save(tmp_path / "p.json")
    back = Preprocessing.load(tmp_path / "p.json")
    assert back == pre
    assert back.digest() == pre.digest()
    assert [back.encode(s) for s in ds.stays[:10]] == pre.encode_all(ds.stays[:10])


def test_preprocessing_version_check(tmp_path):
    pre = _fitted()
    text = pre.to_json().replace('"version":1', '"version":99')
    with pytest.raises(ParseError):
        Preprocessing.from_json(text)
