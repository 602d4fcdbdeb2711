"""Synthetic datasets and per-phase forget/retain/forgot bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import stream


class ConfigError(ValueError):
    pass


class ScheduleError(ValueError):
    pass


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    entity_ids: np.ndarray
    is_test: np.ndarray
    n_classes: int

    @property
    def class_aligned(self) -> bool:
        return bool(np.array_equal(self.entity_ids, self.labels))

    @property
    def train_idx(self) -> np.ndarray:
        return np.flatnonzero(~self.is_test)

    @property
    def test_idx(self) -> np.ndarray:
        return np.flatnonzero(self.is_test)

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def units(self) -> set[int]:
        return set(int(u) for u in np.unique(self.entity_ids))


def _stratified_test_mask(groups: np.ndarray, test_fraction: float, rng) -> np.ndarray:
    mask = np.zeros(groups.shape[0], dtype=bool)
    for g in np.unique(groups):
        rows = np.flatnonzero(groups == g)
        n_test = int(round(test_fraction * rows.size))
        if rows.size > 1:
            n_test = min(max(n_test, 1), rows.size - 1)
        mask[rng.permutation(rows)[:n_test]] = True
    return mask


def gaussian_blobs(
    K: int,
    d: int,
    n_per_class: int,
    center_spread: float = 8.0,
    noise_sigma: float = 1.0,
    test_fraction: float = 0.2,
    seed: int = 0,
) -> LabeledDataset:
    """K isotropic Gaussian clusters; centers uniform in a hypercube of side ``center_spread``."""
    if K < 2 or d < 1:
        raise ConfigError(f"need K >= 2 and d >= 1, got K={K}, d={d}")
    if n_per_class < 20:
        raise ConfigError(f"n_per_class must be >= 20, got {n_per_class}")
    if not noise_sigma > 0:
        raise ConfigError(f"noise_sigma must be positive, got {noise_sigma}")
    if not 0 < test_fraction < 1:
        raise ConfigError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    if not center_spread > 0:
        raise ConfigError(f"center_spread must be positive, got {center_spread}")
    rng = stream(seed, "gaussian_blobs")
    centers = rng.uniform(-center_spread / 2, center_spread / 2, size=(K, d))
    labels = np.repeat(np.arange(K), n_per_class)
    x = centers[labels] + noise_sigma * rng.standard_normal((labels.size, d))
    is_test = _stratified_test_mask(labels, test_fraction, rng)
    return LabeledDataset(x, labels, labels.copy(), is_test, K)


def misaligned_entities(
    n_entities: int,
    samples_per_entity: int,
    K_attributes: int,
    d: int,
    noise_sigma: float = 0.5,
    test_fraction: float = 0.2,
    seed: int = 0,
) -> LabeledDataset:
    """Entities carry an attribute class; the attribute is the classification label.

    Feature = entity prototype + attribute offset + noise, with the attribute
    offsets three times the prototype magnitude so attributes stay learnable
    after entities are removed. Train and test hold disjoint entities.
    """
    if n_entities < 40:
        raise ConfigError(f"n_entities must be >= 40, got {n_entities}")
    if K_attributes < 2:
        raise ConfigError(f"K_attributes must be >= 2, got {K_attributes}")
    if K_attributes > n_entities:
        raise ConfigError(f"K_attributes ({K_attributes}) exceeds n_entities ({n_entities})")
    if samples_per_entity < 1:
        raise ConfigError(f"samples_per_entity must be >= 1, got {samples_per_entity}")
    if not noise_sigma > 0:
        raise ConfigError(f"noise_sigma must be positive, got {noise_sigma}")
    if not 0 < test_fraction < 1:
        raise ConfigError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = stream(seed, "misaligned_entities")
    attr_of_entity = rng.permutation(np.arange(n_entities) % K_attributes)
    offsets = rng.standard_normal((K_attributes, d))
    offsets *= 3.0 / np.linalg.norm(offsets, axis=1, keepdims=True)
    prototypes = rng.standard_normal((n_entities, d))
    prototypes *= 1.0 / np.linalg.norm(prototypes, axis=1, keepdims=True)
    entity_ids = np.repeat(np.arange(n_entities), samples_per_entity)
    labels = attr_of_entity[entity_ids]
    x = prototypes[entity_ids] + offsets[labels] + noise_sigma * rng.standard_normal((entity_ids.size, d))
    # whole entities go to test, stratified by attribute
    test_entities = _stratified_test_mask(attr_of_entity, test_fraction, rng)
    is_test = test_entities[entity_ids]
    return LabeledDataset(x, labels, entity_ids, is_test, K_attributes)


@dataclass
class PhasePlan:
    """Per-phase index sets over the train rows (and their test counterparts).

    Phase numbers are 1-based in :meth:`forget_idx` and friends.
    """

    forget_units: list[frozenset]
    train_rows: np.ndarray
    test_rows: np.ndarray
    unit_of_row: np.ndarray = field(repr=False)

    @property
    def T(self) -> int:
        return len(self.forget_units)

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise IndexError(f"phase {t} outside 1..{self.T}")

    def _rows(self, rows: np.ndarray, units) -> np.ndarray:
        if not units:
            return rows[:0]
        return rows[np.isin(self.unit_of_row[rows], list(units))]

    def forgot_units(self, t: int) -> frozenset:
        self._check(t)
        return frozenset().union(*self.forget_units[: t - 1])

    def forget_idx(self, t: int, test: bool = False) -> np.ndarray:
        self._check(t)
        return self._rows(self.test_rows if test else self.train_rows, self.forget_units[t - 1])

    def forgot_idx(self, t: int, test: bool = False) -> np.ndarray:
        return self._rows(self.test_rows if test else self.train_rows, self.forgot_units(t))

    def retain_idx(self, t: int, test: bool = False) -> np.ndarray:
        rows = self.test_rows if test else self.train_rows
        gone = self.forgot_units(t) | self.forget_units[t - 1]
        return rows[~np.isin(self.unit_of_row[rows], list(gone))]


def plan_phases(dataset: LabeledDataset, forget_schedule) -> PhasePlan:
    """Validate a per-phase schedule of forget units and build the index sets.

    Units are class ids in the class-aligned case and entity ids otherwise.
    """
    known = dataset.units()
    seen: dict[int, int] = {}
    phases = []
    for t, units in enumerate(forget_schedule, start=1):
        units = [int(u) for u in units]
        for u in units:
            if u not in known:
                raise ScheduleError(f"phase {t}: unknown unit {u}")
            if u in seen:
                raise ScheduleError(f"unit {u} repeated in phases {seen[u]} and {t}")
            seen[u] = t
        phases.append(frozenset(units))
    if not phases:
        raise ScheduleError("schedule has no phases")
    return PhasePlan(phases, dataset.train_idx, dataset.test_idx, dataset.entity_ids)
