import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from loadanon.errors import LoadAnonError, ShapeMismatch
from loadanon.ingest import SynthConfig, read_wide_csv, synth_panel
from loadanon.mdav import (
    GroupAssignment, anonymize, build_anonymized_panel, distance, mdav_partition,
    write_assignment_csv, write_centroids_csv,
)
from loadanon.panel import global_average_profile

from _reference import reference_mdav
from conftest import make_panel


def test_distance_examples():
    assert distance([0, 0], [3, 4]) == 5.0
    assert distance([1.5, 2.5], [1.5, 2.5]) == 0.0
    assert distance([1, 2, 3], [1, 2, 4]) == 1.0
    with pytest.raises(ShapeMismatch):
        distance([1, 2], [1, 2, 3])


@given(st.lists(st.integers(-1000, 1000), min_size=1, max_size=6), st.data())
def test_distance_symmetric(a, data):
    b = data.draw(st.lists(st.integers(-1000, 1000), min_size=len(a), max_size=len(a)))
    assert distance(a, b) == distance(b, a)
    assert (distance(a, b) == 0) == (a == b)


def hand_panel():
    rows = {"a": 1, "b": 2, "c": 9, "d": 10, "e": 20, "f": 21}
    return make_panel([[v] for v in rows.values()], ids=list(rows))


def test_hand_example():
    anon = anonymize(hand_panel(), 2)
    assert anon.assignment.groups == (("e", "f"), ("a", "b"), ("c", "d"))
    np.testing.assert_array_equal(anon.centroids[:, 0], [20.5, 1.5, 9.5])


def test_k1_is_identity():
    panel = synth_panel(SynthConfig(n_households=7, days=1, seed=1))
    anon = anonymize(panel, 1)
    assert sorted(anon.assignment.sizes) == [1] * 7
    np.testing.assert_array_equal(anon.expanded(), panel.values)


def test_k_equals_n_gives_global_average():
    panel = synth_panel(SynthConfig(n_households=1000, days=1, seed=5))
    anon = anonymize(panel, 1000)
    assert anon.assignment.n_groups == 1 and not anon.assignment.degenerate
    np.testing.assert_allclose(anon.centroids[0], global_average_profile(panel), rtol=0, atol=1e-14)


def test_k_above_n_is_degenerate(caplog):
    panel = make_panel([[1.0], [2.0]])
    a = mdav_partition(panel, 5)
    assert a.degenerate and a.groups == (("s000", "s001"),)
    assert "degenerate" in caplog.text


@pytest.mark.parametrize("k", [0, -1, 1.5])
def test_bad_k(k):
    with pytest.raises(LoadAnonError):
        mdav_partition(make_panel([[1.0]]), k)


def test_missing_values_rejected():
    with pytest.raises(LoadAnonError):
        mdav_partition(make_panel([[1.0, np.nan], [1.0, 2.0]]), 1)


def test_tail_rule_splits_between_2k_and_3k_minus_1():
    # 5 records, k=2: the canonical rule forms one pair then a residual triple
    panel = make_panel([[0.0], [1.0], [2.0], [10.0], [11.0]])
    assert mdav_partition(panel, 2).sizes == (2, 3)
    # 3 records, k=2: fewer than 2k, so one residual group
    assert mdav_partition(make_panel([[0.0], [5.0], [9.0]]), 2).sizes == (3,)


def test_tie_break_prefers_smallest_id():
    # d is farthest from the mean; b and c tie as its nearest neighbour
    panel = make_panel([[0.0], [1.0], [1.0], [5.0]], ids=["a", "c", "b", "d"])
    assert mdav_partition(panel, 2).groups == (("b", "d"), ("a", "c"))
    # two records tie for farthest from the mean
    panel = make_panel([[0.0], [2.0], [1.0], [1.0]], ids=["z", "y", "m", "n"])
    assert mdav_partition(panel, 2).groups[0] == ("m", "y")


@given(st.integers(1, 30), st.integers(1, 4), st.integers(0, 2**32 - 1), st.booleans())
def test_matches_reference(n, t, seed, integer):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, n + 3))
    values = rng.integers(0, 4, (n, t)).astype(float) if integer else rng.normal(size=(n, t))
    ids = [f"r{j:02d}" for j in rng.permutation(n)]
    got = mdav_partition(make_panel(values, ids), k).groups
    ref = reference_mdav(dict(zip(ids, values.tolist())), k)
    assert [list(g) for g in got] == ref


@given(st.integers(1, 40), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_partition_properties(n, t, seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, n + 3))
    panel = make_panel(rng.random((n, t)))
    a = mdav_partition(panel, k)
    members = [sid for g in a.groups for sid in g]
    assert sorted(members) == sorted(panel.ids)
    assert set(a.group_of.values()) == set(range(a.n_groups))
    if n >= k:
        assert all(k <= s <= 2 * k - 1 for s in a.sizes)
    else:
        assert a.degenerate and a.sizes == (n,)


@given(st.integers(2, 25), st.integers(0, 2**32 - 1))
def test_row_order_does_not_matter(n, seed):
    rng = np.random.default_rng(seed)
    values = rng.random((n, 3))
    ids = [f"h{j}" for j in range(n)]
    perm = rng.permutation(n)
    a = mdav_partition(make_panel(values, ids), 2)
    b = mdav_partition(make_panel(values[perm], [ids[j] for j in perm]), 2)
    assert a == b


def test_prescale_hook_changes_clustering_only():
    panel = make_panel([[1.0, 2.0], [10.0, 20.0], [1.0, 1.0], [10.0, 10.0]], ids=list("abcd"))
    raw = mdav_partition(panel, 2).groups
    assert set(raw) == {("a", "c"), ("b", "d")}
    shape = mdav_partition(panel, 2, prescale=lambda X: X / X.sum(axis=1, keepdims=True)).groups
    assert set(shape) == {("a", "b"), ("c", "d")}


def test_build_anonymized_panel_examples():
    panel = make_panel([[1.0, 2.0], [3.0, 4.0]], ids=["a", "b"])
    anon = build_anonymized_panel(panel, GroupAssignment(2, (("a", "b"),)))
    np.testing.assert_array_equal(anon.centroids, [[2.0, 3.0]])
    np.testing.assert_array_equal(anon.expanded(), [[2.0, 3.0], [2.0, 3.0]])
    single = build_anonymized_panel(panel, GroupAssignment(1, (("b",), ("a",))))
    np.testing.assert_array_equal(single.expanded(), panel.values)
    with pytest.raises(ShapeMismatch):
        build_anonymized_panel(panel, GroupAssignment(1, (("a",),)))


def test_size_weighted_centroids_conserve_totals():
    panel = synth_panel(SynthConfig(n_households=53, days=1, seed=9))
    anon = anonymize(panel, 5)
    np.testing.assert_allclose(anon.sizes @ anon.centroids, panel.values.sum(axis=0), rtol=1e-12)
    np.testing.assert_allclose(anon.expanded().sum(), panel.values.sum(), rtol=1e-12)


def test_csv_outputs():
    anon = anonymize(hand_panel(), 2)
    buf = io.StringIO()
    write_assignment_csv(anon.assignment, buf)
    assert buf.getvalue().splitlines() == [
        "series_id,group_index", "a,1", "b,1", "c,2", "d,2", "e,0", "f,0"]
    buf = io.StringIO()
    write_centroids_csv(anon, buf)
    buf.seek(0)
    back = read_wide_csv(buf)
    assert back.ids == ("group_0", "group_1", "group_2")
    np.testing.assert_array_equal(back.values[:, 0], [20.5, 1.5, 9.5])
