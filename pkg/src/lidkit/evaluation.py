"""Closed-set error rate and NIST LRE07-style average detection cost."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

DURATIONS = (3, 10, 30)
C_MISS = 1.0
C_FA = 1.0
P_TARGET = 0.5


@dataclass
class TrialSet:
    """Scored test segments: one posterior vector over ``languages`` each."""

    languages: List[str]
    utt_ids: List[str]
    true_languages: List[str]
    durations: np.ndarray
    posteriors: np.ndarray

    def __post_init__(self):
        self.durations = np.asarray(self.durations, dtype=np.int64)
        self.posteriors = np.asarray(self.posteriors, dtype=np.float64)
        n = len(self.utt_ids)
        if not (len(self.true_languages) == n == self.durations.size == self.posteriors.shape[0]):
            raise ValueError("trial fields have inconsistent lengths")
        if n and self.posteriors.shape[1] != len(self.languages):
            raise ValueError("posterior width does not match language list")
        if n and np.max(np.abs(self.posteriors.sum(axis=1) - 1.0)) > 1e-8:
            raise ValueError("posterior vectors must sum to 1")
        bad = set(self.durations.tolist()) - set(DURATIONS)
        if bad:
            raise ValueError(f"unknown duration conditions {sorted(bad)}")

    def subset(self, keep) -> "TrialSet":
        keep = np.asarray(keep, dtype=bool)
        idx = np.nonzero(keep)[0]
        return TrialSet(self.languages, [self.utt_ids[i] for i in idx],
                        [self.true_languages[i] for i in idx], self.durations[idx],
                        self.posteriors[idx])

    def true_index(self) -> np.ndarray:
        lookup = {l: i for i, l in enumerate(self.languages)}
        return np.array([lookup[l] for l in self.true_languages], dtype=np.int64)


def _error_percent(trials: TrialSet) -> float:
    # np.argmax returns the first maximum: ties go to the lowest language index
    wrong = np.argmax(trials.posteriors, axis=1) != trials.true_index()
    return 100.0 * float(np.mean(wrong))


def error_rate(trials: TrialSet, durations: Sequence[int] = DURATIONS) -> Dict[int, float]:
    """Percentage of trials whose argmax posterior is not the true language."""
    out = {}
    for d in durations:
        sub = trials.subset(trials.durations == d)
        if not sub.utt_ids:
            logger.warning("no trials for %d s condition; omitted", d)
            continue
        out[d] = _error_percent(sub)
    return out


def pairwise_rates(trials: TrialSet, target: str, nontarget: str) -> Tuple[float, float]:
    """``(P_miss, P_fa)`` for one target/non-target pair at log-odds 0."""
    langs = trials.languages
    if target not in langs or nontarget not in langs:
        raise ValueError(f"languages {target!r}/{nontarget!r} not both in trial set")
    truth = np.asarray(trials.true_languages, dtype=object)
    tgt, non = truth == target, truth == nontarget
    if not tgt.any() or not non.any():
        raise ValueError(f"trial set lacks segments of {target!r} or {nontarget!r}")
    ti, ni = langs.index(target), langs.index(nontarget)
    with np.errstate(divide="ignore"):
        logp = np.log(trials.posteriors)
    accept = (logp[:, ti] - logp[:, ni]) > 0
    return float(np.mean(~accept[tgt])), float(np.mean(accept[non]))


def pair_table(trials: TrialSet) -> Dict[Tuple[str, str], Tuple[float, float]]:
    return {(t, n): pairwise_rates(trials, t, n)
            for t in trials.languages for n in trials.languages if t != n}


def pairwise_error_rate(trials: TrialSet, languages: Optional[Sequence[str]] = None) -> float:
    """Mean two-class error (percent) over unordered pairs of ``languages``.

    Each pair is judged on its own log-odds, so classes outside the pair
    (e.g. a newly added language) cannot affect it.
    """
    langs = list(trials.languages if languages is None else languages)
    if len(langs) < 2:
        raise ValueError("need at least two languages")
    errs = []
    for i, a in enumerate(langs):
        for b in langs[i + 1:]:
            p_miss, p_fa = pairwise_rates(trials, a, b)
            errs.append(0.5 * (p_miss + p_fa))
    return 100.0 * float(np.mean(errs))


def c_avg(table: Dict[Tuple[str, str], Tuple[float, float]], languages: Sequence[str]) -> float:
    """Average detection cost in percent.

    Per target the miss rate is averaged over non-targets and weighted by
    ``C_miss * P_target``; each false-alarm rate is weighted by
    ``C_fa * (1 - P_target) / (K - 1)``; targets are averaged.
    """
    K = len(languages)
    if K < 2:
        raise ValueError("need at least two languages")
    p_non = (1.0 - P_TARGET) / (K - 1)
    total = 0.0
    for t in languages:
        missing = [n for n in languages if n != t and (t, n) not in table]
        if missing:
            raise ValueError(f"pair table incomplete: ({t!r}, {missing[0]!r}) absent")
        p_miss = [table[(t, n)][0] for n in languages if n != t]
        p_fa = [table[(t, n)][1] for n in languages if n != t]
        total += C_MISS * P_TARGET * (sum(p_miss) / (K - 1)) + C_FA * p_non * sum(p_fa)
    return 100.0 * total / K


@dataclass
class EvalReport:
    languages: List[str]
    error_rate: Dict[int, float] = field(default_factory=dict)
    c_avg: Dict[int, float] = field(default_factory=dict)
    pairs: Dict[int, Dict[Tuple[str, str], Tuple[float, float]]] = field(default_factory=dict)

    @property
    def durations(self) -> List[int]:
        return [d for d in DURATIONS if d in self.error_rate]

    def average(self, which: str) -> float:
        values = getattr(self, which)
        return float(np.mean([values[d] for d in self.durations])) if self.durations else 0.0

    def to_text(self, title: str = "") -> str:
        heads = [f"{d} sec" for d in self.durations] + ["Average"]
        width = max(10, *(len(h) for h in heads))
        lines = []
        if title:
            lines.append(title)
        lines.append(f"{'Duration (sec)':<16}" + "".join(f"{h:>{width}}" for h in heads))
        for label, key in (("ER (%)", "error_rate"), ("C_avg (%)", "c_avg")):
            values = [getattr(self, key)[d] for d in self.durations] + [self.average(key)]
            lines.append(f"{label:<16}" + "".join(f"{v:>{width}.2f}" for v in values))
        return "\n".join(lines) + "\n"

    def to_tsv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(["duration", "metric", "target", "nontarget", "value"])
        for d in self.durations:
            w.writerow([d, "ER", "", "", repr(self.error_rate[d])])
            w.writerow([d, "C_avg", "", "", repr(self.c_avg[d])])
            for (t, n), (pm, pf) in sorted(self.pairs[d].items()):
                w.writerow([d, "P_miss", t, n, repr(pm)])
                w.writerow([d, "P_fa", t, n, repr(pf)])
        w.writerow(["average", "ER", "", "", repr(self.average("error_rate"))])
        w.writerow(["average", "C_avg", "", "", repr(self.average("c_avg"))])
        return buf.getvalue()


def evaluate(trials: TrialSet) -> EvalReport:
    report = EvalReport(list(trials.languages))
    for d in DURATIONS:
        sub = trials.subset(trials.durations == d)
        if not sub.utt_ids:
            logger.warning("no trials for %d s condition; omitted", d)
            continue
        present = set(sub.true_languages)
        langs = [l for l in trials.languages if l in present]
        table = {(t, n): pairwise_rates(sub, t, n) for t in langs for n in langs if t != n}
        report.error_rate[d] = _error_percent(sub)
        if len(langs) < 2:
            logger.warning("%d s condition has a single language; C_avg undefined", d)
            report.c_avg[d] = float("nan")
        else:
            report.c_avg[d] = c_avg(table, langs)
        report.pairs[d] = table
    return report


# --- score files -------------------------------------------------------------

def write_scores(path, trials: TrialSet) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["utt_id", "true_lang", "duration"] + list(trials.languages))
        for i, utt in enumerate(trials.utt_ids):
            w.writerow([utt, trials.true_languages[i], int(trials.durations[i])]
                       + [repr(float(p)) for p in trials.posteriors[i]])


def read_scores(path) -> TrialSet:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows or rows[0][:3] != ["utt_id", "true_lang", "duration"]:
        raise ValueError(f"{path}: bad score file header")
    langs = rows[0][3:]
    body = [r for r in rows[1:] if r]
    for lineno, r in enumerate(body, start=2):
        if len(r) != 3 + len(langs):
            raise ValueError(f"{path}:{lineno}: expected {3 + len(langs)} columns")
    post = np.array([[float(v) for v in r[3:]] for r in body]).reshape(len(body), len(langs))
    return TrialSet(langs, [r[0] for r in body], [r[1] for r in body],
                    [int(float(r[2])) for r in body], post)


def duration_condition(seconds: float) -> int:
    """Nearest nominal condition (3, 10 or 30 s) for a segment length."""
    return min(DURATIONS, key=lambda d: abs(d - seconds))


def write_report(directory, report: EvalReport, title: str = "") -> None:
    directory = Path(directory)
    (directory / "report.txt").write_text(report.to_text(title), encoding="utf-8")
    (directory / "report.tsv").write_text(report.to_tsv(), encoding="utf-8")
