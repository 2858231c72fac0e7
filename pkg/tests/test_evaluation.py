import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lidkit import evaluation as E

LANGS = ["en", "fr", "de"]


def _trials(true, predicted, durations=None, langs=LANGS, confidence=0.9):
    K = len(langs)
    post = np.full((len(true), K), (1 - confidence) / (K - 1))
    for i, p in enumerate(predicted):
        post[i, langs.index(p)] = confidence
    durations = durations or [3] * len(true)
    return E.TrialSet(langs, [f"u{i}" for i in range(len(true))], list(true), durations, post)


def test_error_rate_counts():
    true = ["en", "fr", "de", "en", "fr", "de", "en", "fr", "de", "en"]
    assert E.error_rate(_trials(true, true)) == {3: 0.0}
    wrong = list(true)
    wrong[1], wrong[4] = "en", "de"
    assert E.error_rate(_trials(true, wrong))[3] == 20.0


def test_error_rate_by_duration_and_empty_condition():
    true = ["en"] * 4
    pred = ["en", "fr", "en", "en"]
    er = E.error_rate(_trials(true, pred, [3, 3, 10, 10]))
    assert er == {3: 50.0, 10: 0.0}


def test_argmax_ties_go_to_first_language():
    t = E.TrialSet(LANGS, ["a", "b"], ["en", "fr"], [3, 3], np.full((2, 3), 1 / 3))
    assert E.error_rate(t)[3] == 50.0


def test_pairwise_rates_extremes():
    true = ["en"] * 5 + ["fr"] * 5
    assert E.pairwise_rates(_trials(true, true), "en", "fr") == (0.0, 0.0)
    swapped = ["fr"] * 5 + ["en"] * 5
    assert E.pairwise_rates(_trials(true, swapped), "en", "fr") == (1.0, 1.0)


def test_pairwise_hand_count():
    true = ["en"] * 10 + ["fr"] * 10
    pred = ["fr", "fr"] + ["en"] * 8 + ["en"] * 3 + ["fr"] * 7
    p_miss, p_fa = E.pairwise_rates(_trials(true, pred, langs=["en", "fr"]), "en", "fr")
    assert (p_miss, p_fa) == (0.2, 0.3)


def test_pairwise_uses_log_odds_between_the_pair_only():
    post = np.array([[0.3, 0.2, 0.5], [0.1, 0.3, 0.6]])
    t = E.TrialSet(LANGS, ["a", "b"], ["en", "fr"], [3, 3], post)
    # "de" wins both argmaxes but the en/fr detector only compares en against fr.
    assert E.pairwise_rates(t, "en", "fr") == (0.0, 0.0)


@pytest.mark.parametrize("K", [2, 3, 14])
def test_c_avg_uniform_rates(K):
    langs = [f"l{i}" for i in range(K)]
    table = {(a, b): (0.1, 0.2) for a in langs for b in langs if a != b}
    assert abs(E.c_avg(table, langs) - 15.0) <= 1e-12


def test_c_avg_spreadsheet_oracle():
    rng = np.random.default_rng(0)
    langs = LANGS + ["es"]
    table = {(a, b): tuple(rng.random(2)) for a in langs for b in langs if a != b}
    rows = []
    for t in langs:
        others = [n for n in langs if n != t]
        miss = np.mean([table[(t, n)][0] for n in others])
        fa = sum(table[(t, n)][1] for n in others) * 0.5 / 3
        rows.append(0.5 * miss + fa)
    assert abs(E.c_avg(table, langs) - 100 * np.mean(rows)) < 1e-12


def test_c_avg_zero_and_incomplete():
    table = {(a, b): (0.0, 0.0) for a in LANGS for b in LANGS if a != b}
    assert E.c_avg(table, LANGS) == 0.0
    del table[("en", "de")]
    with pytest.raises(ValueError, match="incomplete"):
        E.c_avg(table, LANGS)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=12, max_size=12), st.integers(0, 11),
       st.floats(0, 1))
def test_c_avg_bounds_and_monotonicity(rates, which, bump):
    langs = ["a", "b", "c"]
    pairs = [(x, y) for x in langs for y in langs if x != y]
    table = {p: (rates[2 * i], rates[2 * i + 1]) for i, p in enumerate(pairs)}
    base = E.c_avg(table, langs)
    assert 0.0 <= base <= 100.0
    pair = pairs[which // 2]
    vals = list(table[pair])
    vals[which % 2] = min(1.0, vals[which % 2] + bump)
    table[pair] = tuple(vals)
    assert E.c_avg(table, langs) >= base - 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_language_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    post = rng.dirichlet(np.ones(3), 30)
    true = [LANGS[i] for i in rng.integers(3, size=30)]
    dur = [int(d) for d in rng.choice([3, 10, 30], 30)]
    base = E.evaluate(E.TrialSet(LANGS, [str(i) for i in range(30)], true, dur, post))
    for perm in itertools.permutations(range(3)):
        langs = [LANGS[i] for i in perm]
        rep = E.evaluate(E.TrialSet(langs, [str(i) for i in range(30)], true, dur,
                                    post[:, list(perm)]))
        for d in base.durations:
            assert rep.error_rate[d] == pytest.approx(base.error_rate[d])
            assert rep.c_avg[d] == pytest.approx(base.c_avg[d], abs=1e-12)


def test_report_layout():
    rep = E.EvalReport(LANGS, {3: 12.98, 10: 2.69, 30: 0.42}, {3: 7.73, 10: 1.61, 30: 0.24})
    lines = rep.to_text().splitlines()
    assert lines[0].split() == ["Duration", "(sec)", "3", "sec", "10", "sec", "30", "sec",
                                "Average"]
    assert lines[1].split() == ["ER", "(%)", "12.98", "2.69", "0.42", "5.36"]
    assert lines[2].split() == ["C_avg", "(%)", "7.73", "1.61", "0.24", "3.19"]


def test_trial_validation():
    with pytest.raises(ValueError):
        E.TrialSet(LANGS, ["a"], ["en"], [5], [[1.0, 0, 0]])
    with pytest.raises(ValueError):
        E.TrialSet(LANGS, ["a"], ["en"], [3], [[0.5, 0, 0]])
    with pytest.raises(ValueError):
        E.TrialSet(LANGS, ["a", "b"], ["en"], [3], [[1.0, 0, 0]])


def test_duration_condition():
    assert [E.duration_condition(s) for s in (2.9, 3.0, 9.5, 29.0, 31.0)] == [3, 3, 10, 30, 30]


def test_scores_and_report_files(tmp_path):
    rng = np.random.default_rng(1)
    t = E.TrialSet(LANGS, list("abcdef"), ["en", "fr", "de", "en", "fr", "de"],
                   [3, 3, 10, 10, 30, 30], rng.dirichlet(np.ones(3), 6))
    E.write_scores(tmp_path / "s.tsv", t)
    back = E.read_scores(tmp_path / "s.tsv")
    assert np.array_equal(back.posteriors, t.posteriors)
    assert back.utt_ids == t.utt_ids and back.true_languages == t.true_languages
    rep = E.evaluate(back)
    E.write_report(tmp_path, rep, "title")
    assert (tmp_path / "report.txt").read_text().startswith("title\n")
    assert "C_avg" in (tmp_path / "report.tsv").read_text()


def test_single_language_condition_has_undefined_cost():
    t = _trials(["en", "fr", "en"], ["en", "fr", "fr"], [3, 3, 10])
    rep = E.evaluate(t)
    assert rep.error_rate == {3: 0.0, 10: 100.0}
    assert np.isnan(rep.c_avg[10])


def test_pairwise_error_rate_hand_count_and_outside_class():
    true = ["en"] * 10 + ["fr"] * 10
    pred = ["fr", "fr"] + ["en"] * 8 + ["en"] * 3 + ["fr"] * 7
    t = _trials(true, pred, langs=["en", "fr"])
    assert E.pairwise_error_rate(t) == pytest.approx(25.0)
    widened = np.hstack([t.posteriors * 0.5, np.full((20, 1), 0.5)])
    t3 = E.TrialSet(["en", "fr", "de"], t.utt_ids, true, [3] * 20, widened)
    assert E.pairwise_error_rate(t3, ["en", "fr"]) == pytest.approx(25.0)
