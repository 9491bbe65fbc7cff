"""Named dataset presets: synthetic task shape, training settings and scenario levels.

Distances in ``cv2_levels``, ``cv3_levels`` and ``bernoulli_thresholds`` are in
preset distance units; see :mod:`mia_bench.scenarios` for how raw MMD values
are mapped onto them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

from .models import Hyper, SyntheticTask

IMAGE_CV4 = (0.20, 0.40, 0.45, 0.49)
TEXT_CV4 = (0.02, 0.04, 0.10, 0.12)

BERNOULLI_P = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass(frozen=True)
class DatasetPreset:
    name: str
    modality: str  # "image" or "text"
    class_count: int
    feature_dim: int
    mean_scale: float
    noise_scale: float
    hyper: Hyper
    cv2_levels: Tuple[float, float, float]
    cv3_levels: Tuple[float, float, float]
    bernoulli_thresholds: Tuple[float, ...]  # one per BERNOULLI_P
    task_seed: int = 0
    target_train: int = 1000
    target_heldout: int = 1000
    reserve: int = 2000
    shadow_pool: int = 2000
    shadow_count: int = 16
    in_matrix: bool = True  # False for presets outside the scenario matrix

    @property
    def cv4_ratios(self) -> Tuple[float, ...]:
        return IMAGE_CV4 if self.modality == "image" else TEXT_CV4

    @property
    def pool_size(self) -> int:
        return self.target_train + self.target_heldout + self.reserve

    def task(self, seed_offset: int = 0) -> SyntheticTask:
        return SyntheticTask(
            seed=self.task_seed + seed_offset,
            class_count=self.class_count,
            feature_dim=self.feature_dim,
            per_class_mean_scale=self.mean_scale,
            noise_scale=self.noise_scale,
            pool_size=self.pool_size,
        )

    def bernoulli_threshold(self, p: float = 0.5) -> float:
        for q, eps in zip(BERNOULLI_P, self.bernoulli_thresholds):
            if abs(q - p) < 1e-9:
                return eps
        raise KeyError(f"no Bernoulli threshold tabulated for p={p}")


def _hyper(epochs=200, hidden=(64,), lr=0.01, weight_decay=0.01):
    return Hyper(hidden=hidden, epochs=epochs, lr=lr, weight_decay=weight_decay)


PRESETS: Dict[str, DatasetPreset] = {
    p.name: p
    for p in (
        DatasetPreset(
            "CIFAR100", "image", 100, 32, 1.0, 2.0, _hyper(),
            (2.893, 3.813, 4.325), (0.085, 0.119, 0.157),
            (2.623, 2.97, 3.306, 3.535, 3.778, 4.013, 4.259, 4.555, 4.913),
            task_seed=1001,
        ),
        DatasetPreset(
            "CIFAR10", "image", 10, 32, 1.0, 3.0, _hyper(),
            (1.908, 2.501, 3.472), (0.155, 0.213, 0.291),
            (1.147, 1.529, 1.84, 2.097, 2.39, 2.707, 3.064, 3.513, 4.285),
            task_seed=1002,
        ),
        DatasetPreset(
            "CH_MNIST", "image", 8, 32, 1.0, 2.5, _hyper(),
            (0.954, 1.355, 1.720), (0.083, 0.108, 0.133),
            (0.729, 0.837, 0.935, 1.081, 1.186, 1.30, 1.45, 1.765, 2.19),
            task_seed=1003,
        ),
        DatasetPreset(
            "ImageNet", "image", 200, 32, 1.0, 1.5, _hyper(),
            (0.934, 1.130, 1.388), (0.046, 0.080, 0.145),
            (0.835, 0.906, 0.964, 1.021, 1.081, 1.153, 1.227, 1.323, 1.491),
            task_seed=1004,
        ),
        DatasetPreset(
            "Location30", "text", 30, 32, 1.0, 2.0, _hyper(),
            (0.570, 0.724, 0.801), (0.041, 0.076, 0.094),
            (0.520, 0.574, 0.608, 0.660, 0.705, 0.750, 0.784, 0.845, 0.920),
            task_seed=1005,
        ),
        DatasetPreset(
            "Purchase100", "text", 100, 32, 1.0, 2.0, _hyper(),
            (0.550, 0.625, 0.729), (0.087, 0.110, 0.156),
            (0.504, 0.554, 0.566, 0.608, 0.620, 0.635, 0.675, 0.688, 0.741),
            task_seed=1006,
        ),
        DatasetPreset(
            "Texas100", "text", 100, 32, 1.0, 2.5, _hyper(),
            (0.530, 0.641, 0.734), (0.038, 0.073, 0.107),
            (0.512, 0.551, 0.578, 0.605, 0.630, 0.661, 0.692, 0.729, 0.813),
            task_seed=1007,
        ),
        # Deliberately overfit 10-class task used by the property checks.
        DatasetPreset(
            "overfit", "image", 10, 32, 1.0, 4.0, _hyper(hidden=(128,), weight_decay=0.003),
            (1.908, 2.501, 3.472), (0.155, 0.213, 0.291),
            (1.147, 1.529, 1.84, 2.097, 2.39, 2.707, 3.064, 3.513, 4.285),
            task_seed=1099,
            in_matrix=False,
        ),
    )
}

MATRIX_PRESETS = tuple(name for name, p in PRESETS.items() if p.in_matrix)


def get_preset(name: str) -> DatasetPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown dataset preset {name!r}; known: {sorted(PRESETS)}") from None
