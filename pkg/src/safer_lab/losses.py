"""SAFER objectives: the four-term retain loss, the EMA anchor, random
retain-class targets with the forget KL loss, and the unlearning margin."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .diffcore import Graph
from .model import ModelSpec, head, stability

SEP_STABILIZER = 1e-6


@dataclass(frozen=True)
class EmaState:
    """Running mean of latent means.

    ``mu_ema`` has shape ``(latent_dim,)`` for the global anchor, or
    ``(n_classes, latent_dim)`` when ``per_class`` is set; ``seen`` then
    marks which class rows have been initialized.
    """

    latent_dim: int
    decay: float = 0.99
    per_class: bool = False
    n_classes: int = 0
    mu_ema: np.ndarray | None = None
    seen: np.ndarray | None = None
    steps: int = 0

    @property
    def initialized(self) -> bool:
        return self.mu_ema is not None and (not self.per_class or bool(self.seen.any()))


def ema_update(state: EmaState, mu_batch, labels=None) -> EmaState:
    mu_batch = np.atleast_2d(np.asarray(mu_batch, dtype=np.float64))
    if mu_batch.shape[0] == 0:
        raise ValueError("ema_update needs a non-empty batch")
    d = state.decay
    if not state.per_class:
        m = mu_batch.mean(axis=0)
        new = m if state.mu_ema is None else d * state.mu_ema + (1.0 - d) * m
        return replace(state, mu_ema=new, steps=state.steps + 1)
    if labels is None:
        raise ValueError("per-class EMA needs labels")
    labels = np.asarray(labels)
    ema = np.zeros((state.n_classes, state.latent_dim)) if state.mu_ema is None else state.mu_ema.copy()
    seen = np.zeros(state.n_classes, dtype=bool) if state.seen is None else state.seen.copy()
    for c in np.unique(labels):
        m = mu_batch[labels == c].mean(axis=0)
        ema[c] = d * ema[c] + (1.0 - d) * m if seen[c] else m
        seen[c] = True
    return replace(state, mu_ema=ema, seen=seen, steps=state.steps + 1)


def gaussian_kl(g: Graph, mu: int, logvar: int) -> int:
    """Batch mean of KL(N(mu, exp(logvar)) || N(0, I))."""
    mu_v = g.value(mu)
    if mu_v.shape != g.value(logvar).shape:
        raise ValueError(f"mu shape {mu_v.shape} != logvar shape {g.value(logvar).shape}")
    inner = g.sub(g.add(g.square(mu), g.exp(logvar)), logvar)
    n = mu_v.shape[0] if mu_v.ndim == 2 else 1
    d = mu_v.shape[-1]
    total = g.scale(g.sum(inner), 0.5 / n)
    return g.add(total, g.constant(-0.5 * d))


@dataclass
class RetainLossBreakdown:
    ce: float
    recon: float
    kl: float
    sep: float  # already multiplied by lam
    total: float
    lam: float
    total_id: int
    mu: np.ndarray
    term_ids: dict[str, int]  # graph node per active term


def retain_loss(
    g: Graph,
    spec: ModelSpec,
    p: dict[str, int],
    features: int,
    labels,
    eps,
    ema: EmaState,
    lam: float = 0.1,
    *,
    use_recon: bool = True,
    use_kl: bool = True,
    use_sep: bool = True,
) -> RetainLossBreakdown:
    """Cross-entropy on stabilized features + reconstruction + KL + lam / mean distance to the EMA.

    The EMA enters as a constant. Before it is initialized the separation
    term contributes nothing.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    if n == 0:
        raise ValueError("retain_loss needs a non-empty batch")
    st = stability(g, spec, p, features, labels, eps)
    terms = {"ce": g.cross_entropy(head(g, p, st.x_prime), labels)}
    if use_recon:
        per_row = g.sum(g.square(g.sub(features, st.x_hat)), axis=1)
        terms["recon"] = g.mean(per_row)
    if use_kl:
        terms["kl"] = gaussian_kl(g, st.mu, st.logvar)
    if use_sep and lam != 0 and ema.initialized:
        anchor = ema.mu_ema[labels] if ema.per_class else np.broadcast_to(ema.mu_ema, (n, spec.latent_dim))
        dist = g.mean(g.l2_norm(g.sub(st.mu, g.constant(anchor)), axis=1))
        shifted = g.add(dist, g.constant(SEP_STABILIZER))
        # 1/x as exp(-log x)
        terms["sep"] = g.scale(g.exp(g.scale(g.log(shifted), -1.0)), lam)
    total = terms["ce"]
    for key in ("recon", "kl", "sep"):
        if key in terms:
            total = g.add(total, terms[key])
    vals = {k: float(g.value(v)) for k, v in terms.items()}
    return RetainLossBreakdown(
        ce=vals["ce"],
        recon=vals.get("recon", 0.0),
        kl=vals.get("kl", 0.0),
        sep=vals.get("sep", 0.0),
        total=float(g.value(total)),
        lam=lam,
        total_id=total,
        mu=g.value(st.mu).copy(),
        term_ids=terms,
    )


@dataclass
class ForgetTarget:
    q: np.ndarray
    retain_class_set: frozenset


def build_forget_target(K: int, retain_class_set, rng: np.random.Generator) -> ForgetTarget:
    """Uniform [0, 1] draws on the retain classes, zeros elsewhere, normalized."""
    classes = sorted(int(c) for c in retain_class_set)
    if not classes:
        raise ValueError("retain class set is empty")
    if classes[0] < 0 or classes[-1] >= K:
        raise ValueError(f"retain classes must lie in [0, {K})")
    while True:
        r = rng.uniform(0.0, 1.0, size=len(classes))
        s = r.sum()
        if s > 0:
            break
    q = np.zeros(K)
    q[classes] = r / s
    return ForgetTarget(q, frozenset(classes))


def forget_targets(K: int, labels, retain_classes, rng: np.random.Generator) -> np.ndarray:
    """One fresh target row per forget sample; each row excludes the sample's own label."""
    rows = []
    for y in np.asarray(labels):
        allowed = set(retain_classes) - {int(y)}
        rows.append(build_forget_target(K, allowed, rng).q)
    return np.vstack(rows) if rows else np.zeros((0, K))


def forget_loss(g: Graph, logits: int, q) -> int:
    """Batch mean of KL(q || softmax(logits)), with 0 log 0 = 0."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    nz = q > 0
    neg_entropy = float(np.sum(q[nz] * np.log(q[nz]))) / q.shape[0]
    return g.add(g.cross_entropy(logits, q), g.constant(neg_entropy))


def unlearning_margin(logits, y) -> np.ndarray | float:
    """Original-class logit minus the largest competing logit."""
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    y = np.atleast_1d(np.asarray(y))
    if z.shape[1] < 2:
        raise ValueError("unlearning margin needs at least two classes")
    rows = np.arange(z.shape[0])
    own = z[rows, y]
    rest = z.copy()
    rest[rows, y] = -np.inf
    um = own - rest.max(axis=1)
    return float(um[0]) if single else um
