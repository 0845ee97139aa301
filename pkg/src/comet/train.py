"""Adam training loop for COMET / NODE / HNN and the constants-counting scan."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .dynamics import comet_loss, plain_loss, predict, weight_arrays
from .models import ModelConfig, ParamStore, init_params
from .physics import Dataset

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch, self.batch, self.loss = epoch, batch, loss
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    epochs: int = 1000
    batch_size: int = 32
    w1: float = 1.0
    w2: float = 1.0
    sigma: float = 0.1
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 0 or self.batch_size <= 0 or self.sigma < 0:
            raise ValueError(f"invalid training configuration {self}")
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("regularisation weights must be non-negative")


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    l1: list[float] = field(default_factory=list)
    l2: list[float] = field(default_factory=list)
    l3: list[float] = field(default_factory=list)
    val_l1: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int = -1
    n_jitter: int = 0

    def __len__(self) -> int:
        return len(self.loss)

    def append(self, loss, l1, l2, l3, val_l1, seconds):
        for name, v in zip(("loss", "l1", "l2", "l3", "val_l1", "seconds"),
                           (loss, l1, l2, l3, val_l1, seconds)):
            getattr(self, name).append(float(v))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "L", "L1", "L2", "L3", "val_L1", "seconds"])
            for k in range(len(self)):
                w.writerow([k + 1, repr(self.loss[k]), repr(self.l1[k]), repr(self.l2[k]),
                            repr(self.l3[k]), repr(self.val_l1[k]), f"{self.seconds[k]:.3f}"])


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
              ) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns new arrays, inputs are untouched."""
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grads
    v = beta2 * state.v + (1 - beta2) * grads * grads
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


def batch_loss(weights, config: ModelConfig, s, s_dot, x, tc: TrainConfig, rng):
    if config.model_kind == "comet":
        return comet_loss(weights, s, s_dot, x, tc.w1, tc.w2, tc.sigma, rng, config)
    return plain_loss(weights, s, s_dot, x, config)


def l1_error(store: ParamStore, s, s_dot, x=None, chunk: int = 4096) -> float:
    """Mean squared norm of (predicted - observed) derivative; no parameter gradients."""
    if len(s) == 0:
        return float("nan")
    weights = weight_arrays(store)
    total = 0.0
    for k in range(0, len(s), chunk):
        xs = None if x is None else x[k:k + chunk]
        pred = predict(weights, s[k:k + chunk], xs, store.config)
        total += float(np.sum((pred - s_dot[k:k + chunk]) ** 2))
    return total / len(s)


def train(model_config: ModelConfig, dataset: Dataset, train_config: TrainConfig | None = None,
          init: ParamStore | None = None) -> tuple[ParamStore, TrainHistory]:
    """Fit a model; returns the checkpoint with the lowest validation L1 and the history."""
    tc = train_config or TrainConfig()
    if dataset.n_s != model_config.n_s or dataset.n_x != model_config.n_x:
        raise ValueError(f"dataset ({dataset.n_s} states, {dataset.n_x} inputs) does not match "
                         f"model ({model_config.n_s}, {model_config.n_x})")
    s_tr, sd_tr, x_tr = dataset.split("train")
    s_va, sd_va, x_va = dataset.split("val")
    if len(s_tr) == 0:
        raise ValueError("dataset has no training samples")
    shuffle_rng, noise_rng = (np.random.default_rng(q)
                              for q in np.random.SeedSequence(tc.seed).spawn(2))

    store = init if init is not None else init_params(model_config)
    flat = store.flat.copy()
    state = AdamState.zeros(flat.size)
    hist = TrainHistory()
    best_flat, best_val = flat.copy(), np.inf
    n = len(s_tr)
    t0 = time.perf_counter()
    for epoch in range(tc.epochs):
        order = shuffle_rng.permutation(n) if tc.shuffle else np.arange(n)
        sums = np.zeros(4)
        for b, start in enumerate(range(0, n, tc.batch_size)):
            idx = order[start:start + tc.batch_size]
            weights = store.with_flat(flat).tensors(requires_grad=True)
            lb = batch_loss(weights, model_config, s_tr[idx], sd_tr[idx],
                            None if x_tr is None else x_tr[idx], tc, noise_rng)
            value = float(lb.total.data)
            if not np.isfinite(value):
                raise TrainingDiverged(epoch + 1, b + 1, value)
            grads = ad.grad(lb.total, weights, create_graph=False)
            flat, state = adam_step(flat, np.concatenate([g.data.ravel() for g in grads]),
                                    state, tc.lr)
            sums += len(idx) * np.array([value, lb.l1, lb.l2, lb.l3])
            hist.n_jitter += lb.n_jitter
        current = store.with_flat(flat)
        if len(s_va):
            val = l1_error(current, s_va, sd_va, x_va)
        else:
            val = sums[1] / n
        if not np.isfinite(val):
            val = np.inf
        if val < best_val:
            best_val, best_flat, hist.best_epoch = val, flat.copy(), epoch + 1
        hist.append(*(sums / n), val, time.perf_counter() - t0)
    if tc.epochs == 0:
        hist.best_epoch = 0
    return store.with_flat(best_flat), hist


# ---------------------------------------------------------------- n_c scan


@dataclass
class ScanCell:
    n_c: int
    seed: int
    final_l1: float = float("nan")  # last-epoch training L1
    best_val_l1: float = float("nan")
    train_curve: list[float] = field(default_factory=list)
    val_curve: list[float] = field(default_factory=list)
    error: str = ""


@dataclass
class ScanResult:
    system: str
    n_c_values: list[int]
    cells: list[ScanCell]

    def values(self, n_c: int, metric: str = "val") -> np.ndarray:
        attr = "best_val_l1" if metric == "val" else "final_l1"
        return np.array([getattr(c, attr) for c in self.cells if c.n_c == n_c and not c.error])

    def relative(self, metric: str = "val") -> dict[int, tuple[float, float]]:
        """Mean and std of L1 per n_c, divided by the mean at n_c = 0."""
        base = float(np.mean(self.values(0, metric)))
        out = {}
        for n_c in self.n_c_values:
            v = self.values(n_c, metric)
            if len(v) == 0:
                out[n_c] = (float("nan"), float("nan"))
            else:
                out[n_c] = (float(np.mean(v)) / base, float(np.std(v)) / base)
        return out

    def suggest_n_c(self, threshold: float = 3.0, metric: str = "val") -> int:
        """Largest n_c whose relative L1 stays below ``threshold`` (a heuristic)."""
        ok = [n for n, (m, _) in self.relative(metric).items() if m < threshold]
        return max(ok) if ok else 0

    def table_csv(self, path: str | Path) -> None:
        rel_v, rel_t = self.relative("val"), self.relative("train")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n_c", "rel_val_L1_mean", "rel_val_L1_std", "rel_train_L1_mean",
                        "rel_train_L1_std", "n_ok", "n_failed"])
            for n_c in self.n_c_values:
                cells = [c for c in self.cells if c.n_c == n_c]
                w.writerow([n_c, *rel_v[n_c], *rel_t[n_c], sum(not c.error for c in cells),
                            sum(bool(c.error) for c in cells)])

    def curves_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n_c", "seed", "epoch", "train_L1", "val_L1"])
            for c in self.cells:
                for k, (a, b) in enumerate(zip(c.train_curve, c.val_curve)):
                    w.writerow([c.n_c, c.seed, k + 1, repr(a), repr(b)])


def _scan_cell(args) -> ScanCell:
    model_config, dataset, tc = args
    cell = ScanCell(model_config.n_c, tc.seed)
    try:
        _, hist = train(model_config, dataset, tc)
    except (TrainingDiverged, ad.RankDeficient, FloatingPointError) as exc:
        cell.error = str(exc)
        return cell
    cell.final_l1 = hist.l1[-1] if len(hist) else float("nan")
    cell.best_val_l1 = float(np.min(hist.val_l1)) if len(hist) else float("nan")
    cell.train_curve, cell.val_curve = hist.l1, hist.val_l1
    return cell


def scan_ncom(dataset: Dataset, n_c_values=None, n_seeds: int = 5, epochs: int = 3000,
              hidden_layers: int = 3, hidden_width: int = 250,
              train_config: TrainConfig | None = None, workers: int = 1) -> ScanResult:
    """Train COMET for each assumed number of constants and several seeds.

    A run that aborts is recorded in its cell and the scan carries on.
    """
    if n_c_values is None:
        n_c_values = list(range(dataset.n_s))
    n_c_values = sorted(set(n_c_values) | {0})
    base = replace(train_config or TrainConfig(), epochs=epochs)
    jobs = []
    for n_c in n_c_values:
        for seed in range(n_seeds):
            mc = ModelConfig("comet", dataset.n_s, n_c, dataset.n_x, hidden_layers,
                             hidden_width, seed)
            jobs.append((mc, dataset, replace(base, seed=seed)))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            cells = list(pool.map(_scan_cell, jobs))
    else:
        cells = [_scan_cell(j) for j in jobs]
    for c in cells:
        log.info("scan n_c=%d seed=%d val L1=%.3g %s", c.n_c, c.seed, c.best_val_l1, c.error)
    return ScanResult(dataset.system, n_c_values, cells)
