"""Evaluation quantities for continual unlearning.

Accuracies are fractions. :func:`knowledge_erosion` and
:func:`forgetting_reversal` are linear, so they report in whatever unit
the caller passes (the experiment log uses percentage points).
Undefined quantities are ``None``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import softmax
from .losses import unlearning_margin
from .model import Model, forward_classify

DBI_GUARD = 1e-12


def predict(model: Model, x) -> np.ndarray:
    # np.argmax breaks ties toward the lowest index
    return np.argmax(forward_classify(model, x)[1], axis=1)


def accuracy(model: Model, x, y) -> float | None:
    y = np.asarray(y)
    if y.size == 0:
        return None
    return float(np.mean(predict(model, x) == y))


def knowledge_erosion(retain_acc) -> float | None:
    """Mean drop in retain accuracy between consecutive phases (negative = improvement)."""
    a = np.asarray(retain_acc, dtype=np.float64)
    if a.size < 2:
        return None
    return float(np.mean(a[:-1] - a[1:]))


def forgetting_reversal(forget_acc, forgot_acc) -> float | None:
    """Mean rise from Acc_t(forget^(t)) to Acc_{t+1}(forgot^(t+1)).

    ``forget_acc[i]`` is the forget-set accuracy after phase i+1 (only the
    first T-1 are used); ``forgot_acc[i]`` is the forgot-set accuracy after
    phase i+2.
    """
    f = np.asarray(forget_acc, dtype=np.float64)
    g = np.asarray(forgot_acc, dtype=np.float64)
    n = g.size
    if n < 1:
        return None
    if f.size < n:
        raise ValueError(f"need {n} forget accuracies, got {f.size}")
    return float(-np.mean(f[:n] - g))


def tug_of_war(unlearned: dict, retrained: dict) -> float:
    """Product over evaluation sets of 1 - |acc_unlearned - acc_retrain|."""
    if set(unlearned) != set(retrained):
        raise ValueError(f"evaluation sets differ: {sorted(unlearned)} vs {sorted(retrained)}")
    out = 1.0
    for key in sorted(unlearned):
        out *= 1.0 - abs(unlearned[key] - retrained[key])
    return float(out)


@dataclass
class DbiResult:
    value: float
    per_class: dict[int, float]
    guarded: bool


def dbi(features, labels) -> DbiResult:
    """Davies-Bouldin style score with mean *squared* distance as intra-class spread."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("dbi needs at least two classes")
    cents = np.stack([x[y == c].mean(axis=0) for c in classes])
    intra = np.array([np.mean(np.sum((x[y == c] - cents[i]) ** 2, axis=1)) for i, c in enumerate(classes)])
    inter = np.sqrt(((cents[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2))
    guarded = bool(np.any(inter[~np.eye(classes.size, dtype=bool)] < DBI_GUARD))
    ratio = (intra[:, None] + intra[None, :]) / np.maximum(inter, DBI_GUARD)
    np.fill_diagonal(ratio, -np.inf)
    per = ratio.max(axis=1)
    return DbiResult(float(per.mean()), {int(c): float(v) for c, v in zip(classes, per)}, guarded)


@dataclass
class MarginHistogram:
    edges: np.ndarray
    counts: np.ndarray
    tag: str = ""
    phase: int = 0
    frac_negative: float | None = None


def margin_histogram(model: Model, x, y, edges, tag: str = "", phase: int = 0) -> MarginHistogram:
    """Histogram of unlearning margins on fixed bin edges; outliers land in the end bins."""
    edges = np.asarray(edges, dtype=np.float64)
    y = np.asarray(y)
    if y.size == 0:
        return MarginHistogram(edges, np.zeros(edges.size - 1, dtype=int), tag, phase, None)
    um = unlearning_margin(forward_classify(model, x)[1], y)
    clipped = np.clip(um, edges[0], edges[-1])
    counts, _ = np.histogram(clipped, bins=edges)
    return MarginHistogram(edges, counts.astype(int), tag, phase, float(np.mean(um < 0)))


def per_sample_loss(model: Model, x, y) -> np.ndarray:
    logits = forward_classify(model, x)[1]
    p = softmax(logits)
    y = np.asarray(y)
    return -np.log(np.maximum(p[np.arange(y.size), y], 1e-300))


@dataclass
class MiaResult:
    score: float
    threshold: float
    balanced_accuracy: float
    degenerate: bool


def threshold_attack(member_loss, nonmember_loss, target_loss) -> MiaResult:
    """Loss-threshold membership attacker.

    Rows with loss <= threshold are called members; the threshold is the
    observed loss value maximizing balanced accuracy between the member and
    non-member pools. The score is the percentage of ``target_loss`` rows
    called non-members.
    """
    m = np.asarray(member_loss, dtype=np.float64)
    n = np.asarray(nonmember_loss, dtype=np.float64)
    t = np.asarray(target_loss, dtype=np.float64)
    if m.size == 0 or n.size == 0 or t.size == 0:
        raise ValueError("membership attack needs non-empty member, non-member and target sets")
    pool = np.concatenate([m, n])
    if np.all(pool == pool[0]):
        return MiaResult(50.0, float(pool[0]), 0.5, True)
    ms = np.sort(m)
    ns = np.sort(n)
    cands = np.concatenate([[-np.inf], np.unique(pool)])
    tpr = np.searchsorted(ms, cands, side="right") / m.size
    tnr = 1.0 - np.searchsorted(ns, cands, side="right") / n.size
    bal = 0.5 * (tpr + tnr)
    best = int(np.argmax(bal))
    thr = cands[best]
    return MiaResult(float(100.0 * np.mean(t > thr)), float(thr), float(bal[best]), False)


def mia_score(model: Model, member, nonmember, target) -> MiaResult:
    """Each of ``member``, ``nonmember``, ``target`` is an ``(x, y)`` pair."""
    return threshold_attack(
        per_sample_loss(model, *member),
        per_sample_loss(model, *nonmember),
        per_sample_loss(model, *target),
    )


@dataclass
class Similarity:
    values: np.ndarray
    excluded: int


def representation_similarity(before: Model, after: Model, x) -> Similarity:
    """Cosine similarity of extractor features per row; zero-norm rows are dropped."""
    fb = forward_classify(before, x)[0]
    fa = forward_classify(after, x)[0]
    if fb.shape[1] != fa.shape[1]:
        raise ValueError("models have different feature widths")
    nb = np.linalg.norm(fb, axis=1)
    na = np.linalg.norm(fa, axis=1)
    ok = (nb > 0) & (na > 0)
    cos = np.sum(fb[ok] * fa[ok], axis=1) / (nb[ok] * na[ok])
    return Similarity(np.clip(cos, -1.0, 1.0), int((~ok).sum()))
