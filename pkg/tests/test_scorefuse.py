import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from earface.errors import DataError, DegenerateInputError
from earface.scorefuse import (
    METHODS,
    ModelScore,
    confidence,
    first_divergent_id,
    fuse_decisions,
    fuse_score_tables,
    read_scores,
    sort_desc,
    write_fused,
    write_scores,
)


def oracle_confidences(probs):
    """Plain-Python reference: sort by selection, then evaluate each formula term by term."""
    remaining = list(enumerate(float(p) for p in probs))
    s, order = [], []
    while remaining:
        best = remaining[0]
        for item in remaining[1:]:
            if item[1] > best[1]:
                best = item
        remaining.remove(best)
        order.append(best[0])
        s.append(best[1])
    m = len(s)
    out = {"basic": s[0], "d2s": s[0] - s[1]}
    out["d2sr"] = None if s[0] == 0 else 1 - s[1] / s[0]
    total = 0.0
    for i in range(1, m):
        total += s[0] - s[i]
    out["avg_diff"] = total / (m - 1)
    total = 0.0
    for i in range(1, m):
        total += (s[i - 1] - s[i]) / i
    out["diff1"] = total
    return out, order[0], s[0]


def oracle_fuse(pa, pb, method, id_a="a", id_b="b"):
    ca, cls_a, top_a = oracle_confidences(pa)
    cb, cls_b, top_b = oracle_confidences(pb)
    ca, cb = ca[method], cb[method]
    if ca > cb:
        return id_a, cls_a
    if cb > ca:
        return id_b, cls_b
    if top_a != top_b:
        return (id_a, cls_a) if top_a > top_b else (id_b, cls_b)
    if id_b == "ear" and id_a != "ear":
        return id_b, cls_b
    return id_a, cls_a


def prob_vectors(m):
    return st.lists(st.floats(0, 1, allow_nan=False), min_size=m, max_size=m).filter(lambda v: sum(v) > 1e-6).map(
        lambda v: np.asarray(v) / np.sum(v)
    )


def test_hand_computed_table():
    v = sort_desc([0.5, 0.3, 0.2])
    got = [confidence(v, m) for m in METHODS]
    np.testing.assert_allclose(got, [0.5, 0.2, 0.4, 0.25, 0.25], atol=1e-12, rtol=0)


def test_sort_desc_orders_and_validates():
    v = sort_desc([0.2, 0.5, 0.3])
    np.testing.assert_array_equal(v.probs, [0.5, 0.3, 0.2])
    np.testing.assert_array_equal(v.class_order, [1, 2, 0])
    tie = sort_desc([0.4, 0.2, 0.4])
    assert list(tie.class_order) == [0, 2, 1]
    with pytest.raises(DataError):
        sort_desc([0.7, 0.7])
    with pytest.raises(DataError):
        sort_desc([1.2, -0.2])
    with pytest.raises(DataError):
        sort_desc([1.0])


def test_degenerate_cases():
    one_hot = sort_desc([0.0, 1.0, 0.0])
    assert confidence(one_hot, "d2sr") == 1.0
    uniform = sort_desc([0.25] * 4)
    assert all(confidence(uniform, m) == (0.25 if m == "basic" else 0.0) for m in METHODS)
    from earface.scorefuse import ProbabilityVector

    with pytest.raises(DegenerateInputError):
        confidence(ProbabilityVector(np.zeros(3), np.arange(3)), "d2sr")
    with pytest.raises(ValueError):
        confidence(one_hot, "entropy")


@settings(max_examples=300)
@given(st.sampled_from([2, 5, 10]).flatmap(lambda m: st.tuples(prob_vectors(m), prob_vectors(m))), st.sampled_from(METHODS))
def test_matches_oracle(pair, method):
    pa, pb = pair
    ref, _, _ = oracle_confidences(pa)
    if ref[method] is None:
        return
    assert abs(confidence(sort_desc(pa), method) - ref[method]) <= 1e-12
    d = fuse_decisions(ModelScore.from_raw("a", pa), ModelScore.from_raw("b", pb), method)
    assert (d.chosen_model_id, d.predicted_class) == oracle_fuse(pa, pb, method)


@settings(max_examples=100)
@given(st.sampled_from([2, 5, 10]).flatmap(prob_vectors))
def test_confidence_bounds(p):
    v = sort_desc(p)
    for m in METHODS:
        assert -1e-12 <= confidence(v, m) <= 1 + 1e-12


def test_tie_breaks():
    same = [0.6, 0.4]
    d = fuse_decisions(ModelScore.from_raw("profile", same), ModelScore.from_raw("ear", [0.4, 0.6]), "basic")
    assert d.chosen_model_id == "ear" and d.predicted_class == 1
    d = fuse_decisions(ModelScore.from_raw("x", same), ModelScore.from_raw("y", [0.4, 0.6]), "basic")
    assert d.chosen_model_id == "x"
    # equal d2s (0.25, exact in binary) but different top probability
    d = fuse_decisions(ModelScore.from_raw("a", [0.5, 0.25, 0.25]), ModelScore.from_raw("b", [0.625, 0.375, 0.0]), "d2s")
    assert d.chosen_model_id == "b"
    with pytest.raises(DataError):
        fuse_decisions(ModelScore.from_raw("a", [0.5, 0.5]), ModelScore.from_raw("b", [0.2, 0.3, 0.5]), "basic")


def test_identical_inputs_reproduce_predictions():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(5), size=30)
    ids = [f"s{i}" for i in range(30)]
    for method in METHODS:
        res = fuse_score_tables(ids, p, p, method)
        assert [res.decisions[i].predicted_class for i in ids] == list(p.argmax(axis=1))


def test_batch_reports_bad_rows_and_continues():
    pa = np.array([[0.0, 0.0, 0.0], [0.5, 0.3, 0.2]])
    pb = np.array([[0.2, 0.3, 0.5], [0.1, 0.1, 0.8]])
    res = fuse_score_tables(["bad", "ok"], pa, pb, "basic")
    assert "bad" in res.errors and res.decisions["ok"].predicted_class == 2


def test_score_files_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    p = rng.dirichlet(np.ones(3), size=4)
    ids = ["a", "b", "c", "d"]
    write_scores(tmp_path / "s.csv", ids, p)
    ids2, p2 = read_scores(tmp_path / "s.csv")
    assert ids2 == ids
    np.testing.assert_array_equal(p2, p)
    res = fuse_score_tables(ids, p, p[::-1], "d2s")
    text = write_fused(tmp_path / "f.csv", res, ids).read_text().splitlines()
    assert text[0] == "sample_id,chosen_model,predicted_class,conf_a,conf_b"
    assert len(text) == 5


def test_score_file_errors(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("sample_id,p_0,p_1\na,0.5,0.5\nb,0.5\n")
    with pytest.raises(DataError, match="line 3"):
        read_scores(path)
    path.write_text("id,p\n")
    with pytest.raises(DataError, match="line 1"):
        read_scores(path)


def test_first_divergent_id():
    assert first_divergent_id(["a", "b"], ["a", "b"]) is None
    assert first_divergent_id(["a", "b", "c"], ["a", "x", "c"]) == "b"
    assert first_divergent_id(["a"], ["a", "z"]) == "z"
