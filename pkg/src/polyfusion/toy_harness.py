"""Teacher-student regression for checking that each fusion family trains.

A teacher layer produces targets from standard-normal embeddings; a student
of a compatible config is fitted with Adam on ``MSE + lambda2 * Omega``,
where ``Omega`` is the squared-Frobenius penalty of the student.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import __version__
from .factorizations import load_arrays, save_arrays
from .fusion import FusionConfig, FusionLayer, forward, init_layer
from .grad_opt import adam_init, adam_step, backward, frobenius_penalty

__all__ = [
    "INIT_STD",
    "TEACHER_STD",
    "DIVERGENCE_LIMIT",
    "SyntheticTask",
    "TrainReport",
    "generate_task",
    "mse_loss",
    "train",
    "save_task",
    "load_task",
]

INIT_STD = 0.02
TEACHER_STD = 0.5
DIVERGENCE_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class SyntheticTask:
    teacher: FusionLayer
    z_a: np.ndarray
    z_d: np.ndarray
    targets: np.ndarray
    val_z_a: np.ndarray
    val_z_d: np.ndarray
    val_targets: np.ndarray
    noise_sigma: float
    seed: int

    @property
    def num_samples(self) -> int:
        return self.z_a.shape[0]


def generate_task(config: FusionConfig, num_samples: int, noise_sigma: float = 0.0, seed: int = 0,
                  num_val: Optional[int] = None, teacher_std: float = TEACHER_STD) -> SyntheticTask:
    """Draw a teacher and ``num_samples`` training plus ``num_val`` validation pairs.

    Validation defaults to a fifth of the training size (at least one).
    """
    if num_samples < 1:
        raise ValueError(f"need at least one sample, got {num_samples}")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be non-negative, got {noise_sigma}")
    if num_val is None:
        num_val = max(1, num_samples // 5)
    rng = np.random.default_rng(seed)
    teacher = init_layer(config, rng, std=teacher_std)

    def draw(count):
        za = rng.standard_normal((count, config.a))
        zd = rng.standard_normal((count, config.d))
        y = forward(teacher, za, zd)
        if noise_sigma > 0:
            y = y + noise_sigma * rng.standard_normal(y.shape)
        return za, zd, y

    za, zd, y = draw(num_samples)
    vza, vzd, vy = draw(num_val)
    for arr in (za, zd, y, vza, vzd, vy):
        arr.flags.writeable = False
    return SyntheticTask(teacher, za, zd, y, vza, vzd, vy, float(noise_sigma), int(seed))


def mse_loss(pred, target) -> float:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    return float(np.mean(np.square(p - t)))


@dataclass
class TrainReport:
    config: dict
    seed: int
    epochs: int
    batch_size: Optional[int]
    lr: float
    lambda2: float
    init_std: float
    train_mse: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    final_penalty: float = 0.0
    status: str = "ok"
    wall_time_s: float = 0.0
    version: str = __version__

    @property
    def final_train_mse(self) -> float:
        return self.train_mse[-1]

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def _check_compatible(student: FusionLayer, task: SyntheticTask) -> None:
    s, t = student.config, task.teacher.config
    if (s.a, s.d) != (t.a, t.d) or s.output_dim != t.output_dim:
        raise ValueError(
            f"student dims (m={s.output_dim}, a={s.a}, d={s.d}) do not match "
            f"teacher dims (m={t.output_dim}, a={t.a}, d={t.d})"
        )


def train(student: FusionLayer, task: SyntheticTask, epochs: int, batch_size: Optional[int] = None,
          lr: float = 1e-4, lambda2: float = 0.0, seed: Optional[int] = None,
          init_std: float = INIT_STD) -> tuple[FusionLayer, TrainReport]:
    """Fit ``student`` to ``task`` with Adam.

    Entry 0 of each trajectory is the loss before any update; entry ``e`` is
    the loss after epoch ``e``. ``batch_size=None`` means full batch. A
    non-finite objective or one above ``DIVERGENCE_LIMIT`` stops the run
    with ``status="diverged"``.
    """
    if epochs < 0:
        raise ValueError(f"epochs must be non-negative, got {epochs}")
    if batch_size is not None and batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    _check_compatible(student, task)
    seed = task.seed if seed is None else seed
    report = TrainReport(student.config.to_dict(), seed, epochs, batch_size, lr, lambda2, init_std)
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    n = task.num_samples
    m = student.config.output_dim
    layer = student
    params = layer.arrays()
    state = adam_init(params, lr=lr)

    def record() -> bool:
        train_mse = mse_loss(forward(layer, task.z_a, task.z_d), task.targets)
        val_mse = mse_loss(forward(layer, task.val_z_a, task.val_z_d), task.val_targets)
        obj = train_mse + lambda2 * frobenius_penalty(layer)
        report.train_mse.append(train_mse)
        report.val_mse.append(val_mse)
        report.objective.append(obj)
        return math.isfinite(obj) and math.isfinite(val_mse) and obj <= DIVERGENCE_LIMIT

    with np.errstate(over="ignore", invalid="ignore"):
        ok = record()
        for _ in range(epochs):
            if not ok:
                break
            order = np.arange(n) if batch_size is None else rng.permutation(n)
            step = n if batch_size is None else batch_size
            for lo in range(0, n, step):
                idx = order[lo : lo + step]
                za, zd, y = task.z_a[idx], task.z_d[idx], task.targets[idx]
                pred = forward(layer, za, zd)
                # d(mean over batch x m of squared error)/d pred
                upstream = (2.0 / (len(idx) * m)) * (pred - y)
                grads = backward(layer, za, zd, upstream).params
                if lambda2:
                    grads = {k: g + lambda2 * 2.0 * params[k] for k, g in grads.items()}
                params, state = adam_step(state, params, grads)
                layer = layer.with_arrays(params)
                params = layer.arrays()
            ok = record()

    if not ok:
        report.status = "diverged"
        for traj in (report.train_mse, report.val_mse, report.objective):
            traj[:] = [x if math.isfinite(x) else float("inf") for x in traj]
    report.final_penalty = frobenius_penalty(layer)
    report.wall_time_s = time.perf_counter() - start
    return layer, report


def save_task(task: SyntheticTask, path) -> None:
    arrays = {f"teacher.{k}": v for k, v in task.teacher.arrays().items()}
    arrays.update(z_a=task.z_a, z_d=task.z_d, targets=task.targets,
                  val_z_a=task.val_z_a, val_z_d=task.val_z_d, val_targets=task.val_targets)
    save_arrays(path, arrays, kind="synthetic_task", config=task.teacher.config.to_dict(),
                noise_sigma=task.noise_sigma, seed=task.seed)


def load_task(path) -> SyntheticTask:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "synthetic_task":
        raise ValueError(f"{path} does not hold a synthetic task")
    config = FusionConfig.from_dict(meta["config"])
    teacher_arrays = {k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("teacher.")}
    empty = init_layer(config, np.random.default_rng(0), std=0.0)
    teacher = empty.with_arrays(teacher_arrays) if teacher_arrays else empty
    return SyntheticTask(teacher, arrays["z_a"], arrays["z_d"], arrays["targets"],
                         arrays["val_z_a"], arrays["val_z_d"], arrays["val_targets"],
                         meta["noise_sigma"], meta["seed"])
