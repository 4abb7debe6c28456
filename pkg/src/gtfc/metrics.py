"""Trial scoring and verification metrics: cosine, EER, minDCF, fusion.

A trial pairs an enrollment utterance with a test utterance and carries a
target/nontarget label. Metrics sweep every distinct score as an accept
threshold (accept iff score >= t), so a brute-force oracle over the same
sweep reproduces them exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, List, Sequence, Tuple

import numpy as np

TARGET = "target"
NONTARGET = "nontarget"


class ZeroVector(ValueError):
    """Cosine similarity is undefined for a zero embedding."""


class DegenerateSet(ValueError):
    """Score set lacks a class or contains non-finite scores."""


class TrialMismatch(ValueError):
    """Two trial sets do not share identical keys and labels."""


@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    label: str
    score: float

    def key(self) -> tuple:
        return (self.enroll_id, self.test_id)


def cosine_score(e1, e2) -> float:
    """dot(e1, e2) / (||e1|| ||e2||), in [-1, 1]."""
    a = np.asarray(e1, dtype=np.float64).ravel()
    b = np.asarray(e2, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise TrialMismatch(f"embedding sizes differ: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity of a zero embedding")
    return float(a @ b) / (na * nb)


def _split_scores(trials: Sequence[Trial]) -> tuple:
    targets = np.array([t.score for t in trials if t.label == TARGET], dtype=np.float64)
    nons = np.array([t.score for t in trials if t.label == NONTARGET], dtype=np.float64)
    if targets.size == 0 or nons.size == 0:
        raise DegenerateSet("need at least one target and one nontarget trial")
    if not (np.isfinite(targets).all() and np.isfinite(nons).all()):
        raise DegenerateSet("scores must be finite")
    return np.sort(targets), np.sort(nons)


def _sweep(targets: np.ndarray, nons: np.ndarray, thresholds: np.ndarray) -> tuple:
    """Miss and false-accept rates at each threshold (accept iff score >= t)."""
    n_miss = np.searchsorted(targets, thresholds, side="left")
    n_fa = nons.size - np.searchsorted(nons, thresholds, side="left")
    return n_miss / targets.size, n_fa / nons.size


def eer(trials: Sequence[Trial]) -> Tuple[float, float]:
    """Equal error rate and its threshold.

    Sweeps every distinct score plus a reject-all endpoint; when FAR and
    FRR cross between adjacent sweep points, both are interpolated
    linearly and the crossing value is returned.
    """
    targets, nons = _split_scores(trials)
    thresholds = np.append(np.unique(np.concatenate([targets, nons])), np.inf)
    frr, far = _sweep(targets, nons, thresholds)
    diff = far - frr
    j = int(np.argmax(diff <= 0.0))
    if diff[j] == 0.0:
        return float(frr[j]), float(thresholds[j])
    d0, d1 = diff[j - 1], diff[j]
    lam = d0 / (d0 - d1)
    value = frr[j - 1] + lam * (frr[j] - frr[j - 1])
    if np.isinf(thresholds[j]):
        threshold = float(thresholds[j - 1])
    else:
        threshold = float(thresholds[j - 1] + lam * (thresholds[j] - thresholds[j - 1]))
    return float(value), threshold


def min_dcf(trials: Sequence[Trial], p_target: float = 0.01,
            c_miss: float = 1.0, c_fa: float = 1.0) -> float:
    """Minimum normalized detection cost over the threshold sweep.

    Cost at t is c_miss * P_miss * p_target + c_fa * P_fa * (1 - p_target),
    normalized by the best trivial system min(c_miss * p_target,
    c_fa * (1 - p_target)). The sweep includes accept-all and reject-all
    endpoints.
    """
    targets, nons = _split_scores(trials)
    thresholds = np.concatenate([[-np.inf],
                                 np.unique(np.concatenate([targets, nons])),
                                 [np.inf]])
    p_miss, p_fa = _sweep(targets, nons, thresholds)
    dcf = c_miss * p_miss * p_target + c_fa * p_fa * (1.0 - p_target)
    normalizer = min(c_miss * p_target, c_fa * (1.0 - p_target))
    return float(dcf.min() / normalizer)


def fuse(a: Sequence[Trial], b: Sequence[Trial],
         weights: Tuple[float, float] = (0.5, 0.5)) -> List[Trial]:
    """Per-trial linear score fusion; keys and labels must match exactly."""
    by_key = {}
    for t in b:
        if t.key() in by_key:
            raise TrialMismatch(f"duplicate trial key {t.key()} in second set")
        by_key[t.key()] = t
    seen = set()
    fused = []
    for t in a:
        if t.key() in seen:
            raise TrialMismatch(f"duplicate trial key {t.key()} in first set")
        seen.add(t.key())
        other = by_key.get(t.key())
        if other is None:
            raise TrialMismatch(f"trial {t.key()} missing from second set")
        if other.label != t.label:
            raise TrialMismatch(f"label mismatch on trial {t.key()}")
        fused.append(replace(t, score=weights[0] * t.score + weights[1] * other.score))
    if len(seen) != len(by_key):
        extra = sorted(set(by_key) - seen)[:5]
        raise TrialMismatch(f"second set has extra trials, e.g. {extra}")
    return fused


# -- file formats ---------------------------------------------------------------


def read_trial_list(path) -> List[tuple]:
    """Trial list lines `label enroll_utt test_utt` with label 1=target, 0=nontarget."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[0] not in ("0", "1"):
                raise TrialMismatch(f"{path}:{lineno}: expected 'label enroll test'")
            label = TARGET if parts[0] == "1" else NONTARGET
            rows.append((label, parts[1], parts[2]))
    return rows


def write_trial_list(path, rows: Iterable[tuple]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for label, enroll, test in rows:
            fh.write(f"{1 if label == TARGET else 0} {enroll} {test}\n")


def read_score_file(path) -> List[tuple]:
    """Score lines `enroll_utt test_utt score`."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise TrialMismatch(f"{path}:{lineno}: expected 'enroll test score'")
            rows.append((parts[0], parts[1], float(parts[2])))
    return rows


def write_score_file(path, trials: Sequence[Trial]) -> None:
    """Scores are written with full round-trip precision."""
    with open(path, "w", encoding="utf-8") as fh:
        for t in trials:
            fh.write(f"{t.enroll_id} {t.test_id} {t.score!r}\n")


def attach_scores(trial_rows: Sequence[tuple], score_rows: Sequence[tuple]) -> List[Trial]:
    """Join a trial list with a score file into labeled trials."""
    scores = {(e, t): s for e, t, s in score_rows}
    if len(scores) != len(score_rows):
        raise TrialMismatch("duplicate keys in score file")
    missing = [(e, t) for _, e, t in trial_rows if (e, t) not in scores]
    if missing:
        raise TrialMismatch(f"scores missing for {len(missing)} trials, "
                            f"e.g. {missing[:5]}")
    return [Trial(e, t, label, scores[(e, t)]) for label, e, t in trial_rows]
