"""Unlearning algorithms and the continual-unlearning orchestrator.

Algorithms never see a dataset: each phase hands them a :class:`PhaseView`
holding only the current forget rows and the retain rows. Previously
forgotten rows stay with the orchestrator, which uses them for evaluation
only.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .datagen import LabeledDataset, PhasePlan
from .diffcore import Graph
from .losses import EmaState, ema_update, forget_loss, forget_targets, retain_loss
from .metrics import accuracy
from .model import Model, bind, extract, head, init_model
from .rng import stream

log = logging.getLogger(__name__)

ALGORITHMS = ("retrain", "finetune", "neggrad", "safer")
# picked by phase-1 ToW on the desk scenario; SAFER diverges at 0.05 with momentum
DEFAULT_LR = {"retrain": 0.05, "finetune": 0.05, "neggrad": 0.04, "safer": 0.02}


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Architecture and schedule for the original model and for Retrain."""

    hidden: tuple[int, ...] = (32, 32)
    latent_dim: int = 8
    encoder_hidden: tuple[int, ...] = (32,)
    decoder_hidden: tuple[int, ...] = (32,)
    activation: str = "tanh"
    epochs: int = 20
    lr: float = 0.05
    batch_size: int = 64
    optimizer: str = "momentum"
    momentum: float = 0.9

    def __post_init__(self) -> None:
        self.hidden = tuple(self.hidden)
        self.encoder_hidden = tuple(self.encoder_hidden)
        self.decoder_hidden = tuple(self.decoder_hidden)
        _check_schedule(self.epochs, self.lr, self.batch_size, self.optimizer, self.momentum)


@dataclass
class AlgorithmConfig:
    name: str = "safer"
    epochs: int = 10
    lr: float | None = None  # None: DEFAULT_LR[name]
    batch_size: int = 64
    lam: float = 0.1
    beta: float = 1.0
    um: bool = True
    ic: bool = True
    cd: bool = True
    optimizer: str = "momentum"
    momentum: float = 0.9
    ema_decay: float = 0.99
    per_class_ema: bool = False
    label: str = ""

    def __post_init__(self) -> None:
        if self.name not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.name!r}; expected one of {ALGORITHMS}")
        if self.lr is None:
            self.lr = DEFAULT_LR[self.name]
        _check_schedule(self.epochs, self.lr, self.batch_size, self.optimizer, self.momentum)
        if not 0 < self.ema_decay < 1:
            raise ValueError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")
        if not self.label:
            self.label = self.name

    @property
    def retain_active(self) -> bool:
        return self.ic or self.cd


def _check_schedule(epochs, lr, batch_size, optimizer, momentum) -> None:
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if optimizer not in ("sgd", "momentum"):
        raise ValueError(f"optimizer must be sgd or momentum, got {optimizer!r}")
    if not 0 <= momentum < 1:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")


class Optimizer:
    """Gradient descent, optionally with heavy-ball momentum."""

    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    @classmethod
    def from_config(cls, cfg) -> "Optimizer":
        return cls(cfg.lr, cfg.momentum if cfg.optimizer == "momentum" else 0.0)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if self.momentum:
                v = self.velocity.get(name)
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[name] = v
                g = v
            params[name] -= self.lr * g


def _grads(g: Graph, p: dict[str, int], loss: int) -> dict[str, np.ndarray]:
    leaf_grads = g.backward(loss)
    return {name: leaf_grads[nid] for name, nid in p.items()}


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _cycle(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        yield from _batches(n, batch_size, rng)


def _check_finite(value: float, step: int) -> None:
    if not np.isfinite(value):
        raise DivergenceError(f"loss became non-finite at step {step}")


# ---------------------------------------------------------------------------
# training from scratch


def ce_step(model: Model, x: np.ndarray, y: np.ndarray, opt: Optimizer, sign: float = 1.0) -> float:
    """One step on the plain-path cross-entropy; ``sign=-1`` ascends."""
    g = Graph()
    p = bind(g, model)
    loss = g.cross_entropy(head(g, p, extract(g, model.spec, p, g.constant(x))), y)
    value = float(g.value(loss))
    if sign != 1.0:
        loss = g.scale(loss, sign)
    opt.step(model.params, _grads(g, p, loss))
    return value


def train_model(x: np.ndarray, y: np.ndarray, n_classes: int, cfg: TrainConfig, seed: int) -> Model:
    """Fresh initialization plus mini-batch cross-entropy for a fixed epoch budget."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    sizes = (x.shape[1], *cfg.hidden)
    model = init_model(
        sizes,
        n_classes,
        cfg.latent_dim,
        seed,
        encoder_hidden=cfg.encoder_hidden,
        decoder_hidden=cfg.decoder_hidden,
        activation=cfg.activation,
    )
    rng = stream(seed, "shuffle", "train")
    opt = Optimizer.from_config(cfg)
    step = 0
    for _ in range(cfg.epochs):
        for idx in _batches(len(y), cfg.batch_size, rng):
            _check_finite(ce_step(model, x[idx], y[idx], opt), step)
            step += 1
    return model


def train_original(dataset: LabeledDataset, cfg: TrainConfig, seed: int) -> Model:
    tr = dataset.train_idx
    return train_model(dataset.features[tr], dataset.labels[tr], dataset.n_classes, cfg, seed)


def retrain(dataset: LabeledDataset, plan: PhasePlan, t: int, cfg: TrainConfig, seed: int) -> Model:
    """Train from scratch on the phase-``t`` retain rows; the K-way head is kept."""
    idx = plan.retain_idx(t)
    return train_model(dataset.features[idx], dataset.labels[idx], dataset.n_classes, cfg, seed)


# ---------------------------------------------------------------------------
# approximate unlearning


@dataclass(frozen=True)
class PhaseView:
    """What an unlearning algorithm is allowed to see at phase ``t``."""

    t: int
    forget_x: np.ndarray
    forget_y: np.ndarray
    retain_x: np.ndarray
    retain_y: np.ndarray
    n_classes: int

    @property
    def retain_classes(self) -> frozenset:
        return frozenset(int(c) for c in np.unique(self.retain_y))


def finetune_step(model: Model, x: np.ndarray, y: np.ndarray, opt: Optimizer) -> float:
    return ce_step(model, x, y, opt)


def neggrad_step(model: Model, x: np.ndarray, y: np.ndarray, opt: Optimizer) -> float:
    return ce_step(model, x, y, opt, sign=-1.0)


@dataclass
class SaferState:
    ema: EmaState
    eps_rng: np.random.Generator
    target_rng: np.random.Generator


def safer_step(
    model: Model,
    retain: tuple[np.ndarray, np.ndarray],
    forget: tuple[np.ndarray, np.ndarray] | None,
    retain_classes,
    state: SaferState,
    cfg: AlgorithmConfig,
    opt: Optimizer,
) -> dict[str, float]:
    """One paired step: retain loss on ``retain`` plus ``beta`` times the forget KL on ``forget``."""
    xr, yr = retain
    if len(yr) == 0:
        raise ValueError("safer_step needs a non-empty retain batch")
    row = {"ce": 0.0, "recon": 0.0, "kl": 0.0, "sep": 0.0, "forget_kl": 0.0}
    if not (cfg.retain_active or (cfg.um and forget is not None)):
        return row
    spec = model.spec
    g = Graph()
    p = bind(g, model)
    total = None
    breakdown = None
    if cfg.retain_active:
        feats = extract(g, spec, p, g.constant(xr))
        eps = state.eps_rng.standard_normal((len(yr), spec.latent_dim))
        breakdown = retain_loss(
            g, spec, p, feats, yr, eps, state.ema, cfg.lam,
            use_recon=cfg.ic, use_kl=cfg.ic, use_sep=cfg.cd,
        )
        total = breakdown.total_id
        row.update(ce=breakdown.ce, recon=breakdown.recon, kl=breakdown.kl, sep=breakdown.sep)
    if cfg.um and forget is not None and len(forget[1]):
        xf, yf = forget
        logits = head(g, p, extract(g, spec, p, g.constant(xf)))
        q = forget_targets(spec.n_classes, yf, retain_classes, state.target_rng)
        fl = forget_loss(g, logits, q)
        row["forget_kl"] = float(g.value(fl))
        fl = g.scale(fl, cfg.beta)
        total = fl if total is None else g.add(total, fl)
    if total is None:
        return row
    opt.step(model.params, _grads(g, p, total))
    if breakdown is not None:
        state.ema = ema_update(state.ema, breakdown.mu, yr)
    return row


def unlearn_phase(
    model: Model, view: PhaseView, cfg: AlgorithmConfig, seed: int, ema: EmaState | None = None
) -> tuple[Model, list[dict], EmaState | None]:
    """Run one phase of an approximate unlearning algorithm on a copy of ``model``."""
    model = model.copy()
    opt = Optimizer.from_config(cfg)
    shuffle = stream(seed, "shuffle", "phase", view.t)
    trace: list[dict] = []
    step = 0
    if cfg.name == "finetune":
        for _ in range(cfg.epochs):
            for idx in _batches(len(view.retain_y), cfg.batch_size, shuffle):
                v = finetune_step(model, view.retain_x[idx], view.retain_y[idx], opt)
                _check_finite(v, step)
                trace.append({"step": step, "ce": v})
                step += 1
    elif cfg.name == "neggrad":
        for _ in range(cfg.epochs):
            for idx in _batches(len(view.forget_y), cfg.batch_size, shuffle):
                v = neggrad_step(model, view.forget_x[idx], view.forget_y[idx], opt)
                _check_finite(v, step)
                trace.append({"step": step, "ce": v})
                step += 1
    elif cfg.name == "safer":
        if ema is None:
            ema = EmaState(model.spec.latent_dim, cfg.ema_decay, cfg.per_class_ema, model.spec.n_classes)
        state = SaferState(ema, stream(seed, "eps", view.t), stream(seed, "targets", view.t))
        forget_iter = (
            _cycle(len(view.forget_y), cfg.batch_size, stream(seed, "forget-shuffle", view.t))
            if len(view.forget_y)
            else None
        )
        retain_classes = view.retain_classes
        for _ in range(cfg.epochs):
            for idx in _batches(len(view.retain_y), cfg.batch_size, shuffle):
                fb = None
                if forget_iter is not None:
                    fi = next(forget_iter)
                    fb = (view.forget_x[fi], view.forget_y[fi])
                row = safer_step(
                    model, (view.retain_x[idx], view.retain_y[idx]), fb, retain_classes, state, cfg, opt
                )
                _check_finite(sum(row.values()), step)
                trace.append({"step": step, **row})
                step += 1
        ema = state.ema
    else:
        raise ValueError(f"{cfg.name} is not an approximate unlearning algorithm")
    return model, trace, ema


# ---------------------------------------------------------------------------
# orchestration


def eval_sets(dataset: LabeledDataset, plan: PhasePlan, t: int) -> dict[str, np.ndarray]:
    """Row indices of every evaluation set at phase ``t``."""
    return {
        "retain_train": plan.retain_idx(t),
        "forget_train": plan.forget_idx(t),
        "forgot_train": plan.forgot_idx(t),
        "retain_test": plan.retain_idx(t, test=True),
        "forget_test": plan.forget_idx(t, test=True),
        "forgot_test": plan.forgot_idx(t, test=True),
        "test": plan.test_rows,
    }


@dataclass
class PhaseResult:
    t: int
    model: Model = field(repr=False)
    accuracy: dict[str, float | None]
    wall_time: float
    trace: list[dict] = field(default_factory=list, repr=False)


def phase_view(dataset: LabeledDataset, plan: PhasePlan, t: int) -> PhaseView:
    f = plan.forget_idx(t)
    r = plan.retain_idx(t)
    return PhaseView(
        t,
        dataset.features[f].copy(),
        dataset.labels[f].copy(),
        dataset.features[r].copy(),
        dataset.labels[r].copy(),
        dataset.n_classes,
    )


def iter_continual(
    dataset: LabeledDataset,
    plan: PhasePlan,
    cfg: AlgorithmConfig,
    train_cfg: TrainConfig,
    seed: int,
    original: Model | None = None,
):
    """Yield one :class:`PhaseResult` per phase as soon as it is done.

    Non-retrain algorithms chain from the previous phase's model, starting at
    ``original`` (trained here when not supplied). Hyperparameters are fixed
    across phases.
    """
    if plan.unit_of_row is not dataset.entity_ids and not np.array_equal(plan.unit_of_row, dataset.entity_ids):
        raise ValueError("plan was built for a different dataset")
    if cfg.name != "retrain" and original is None:
        original = train_original(dataset, train_cfg, seed)
    current = original
    ema = None
    for t in range(1, plan.T + 1):
        start = time.perf_counter()
        if cfg.name == "retrain":
            current = retrain(dataset, plan, t, train_cfg, seed)
            trace: list[dict] = []
        else:
            current, trace, ema = unlearn_phase(current, phase_view(dataset, plan, t), cfg, seed, ema)
        elapsed = time.perf_counter() - start
        acc = {
            name: accuracy(current, dataset.features[idx], dataset.labels[idx])
            for name, idx in eval_sets(dataset, plan, t).items()
        }
        log.info("%s phase %d: %s", cfg.label, t, {k: v for k, v in acc.items() if v is not None})
        yield PhaseResult(t, current.copy(), acc, elapsed, trace)


def run_continual(
    dataset: LabeledDataset,
    plan: PhasePlan,
    cfg: AlgorithmConfig,
    train_cfg: TrainConfig,
    seed: int,
    original: Model | None = None,
) -> list[PhaseResult]:
    return list(iter_continual(dataset, plan, cfg, train_cfg, seed, original))
