"""IQA evaluation: LCC, SROCC, multi-crop scoring and per-level histograms."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .dataset import LabeledSample, iteration_rng, sample_subimage
from .tensor_core import Network, NetworkSpec, ParameterStore


class UndefinedCorrelationError(ValueError):
    """Correlation of a constant vector."""


def _pair(y, y_hat, minimum=2):
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.size} vs {y_hat.size}")
    if y.size < minimum:
        raise ValueError(f"need at least {minimum} samples, got {y.size}")
    return y, y_hat


def lcc(y, y_hat) -> float:
    """Pearson linear correlation coefficient."""
    y, y_hat = _pair(y, y_hat)
    dy = y - y.mean()
    dp = y_hat - y_hat.mean()
    sy = np.sqrt(np.sum(dy * dy))
    sp = np.sqrt(np.sum(dp * dp))
    if sy == 0 or sp == 0:
        raise UndefinedCorrelationError("LCC is undefined for a constant vector")
    return float(np.clip(np.sum(dy * dp) / (sy * sp), -1.0, 1.0))


def srocc(y, y_hat) -> float:
    """Spearman rank-order correlation with average ranks for ties.

    Without ties this is ``1 - 6 sum(d^2) / (N (N^2 - 1))``. With ties the
    squared-difference shortcut no longer equals a correlation, so the
    Pearson coefficient of the average-rank vectors is returned instead.
    If either rank vector is constant there is no ordering to agree with
    and the result is 0.
    """
    y, y_hat = _pair(y, y_hat)
    v = rankdata(y, method="average")
    p = rankdata(y_hat, method="average")
    n = y.size
    if np.unique(v).size == n and np.unique(p).size == n:
        return float(1.0 - 6.0 * np.sum((v - p) ** 2) / (n * (n * n - 1)))
    if np.ptp(v) == 0 or np.ptp(p) == 0:
        return 0.0
    return lcc(v, p)


@dataclass
class EvalResult:
    lcc: float | None
    srocc: float
    per_image_scores: list[tuple[str, float, float]]
    lcc_error: str | None = None

    @property
    def N(self) -> int:
        return len(self.per_image_scores)

    def summary(self) -> str:
        lcc_txt = f"{self.lcc:.4f}" if self.lcc is not None else f"undefined ({self.lcc_error})"
        return f"N={self.N} LCC={lcc_txt} SROCC={self.srocc:.4f}"

    def write_csv(self, path) -> None:
        """Per-image ``id,y,y_hat`` rows followed by a ``# summary`` line."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "y", "y_hat"])
            for row in self.per_image_scores:
                w.writerow([row[0], repr(float(row[1])), repr(float(row[2]))])
            fh.write(f"# {self.summary()}\n")


def crop_scores(net: Network, image, crops: int, rng: np.random.Generator) -> np.ndarray:
    """Network outputs on ``crops`` random patches of one image."""
    size = net.spec.input_shape[1]
    patches = [sample_subimage(image, size, rng)[0] for _ in range(crops)]
    return net.forward(np.stack(patches)[:, None])


def predict(spec: NetworkSpec, params: ParameterStore, images, crops_per_image: int = 30, seed: int = 0) -> np.ndarray:
    """Mean crop score per image; image ``i`` draws crops from its own stream."""
    if crops_per_image < 1:
        raise ValueError("crops_per_image must be at least 1")
    net = Network(spec, params)
    return np.array(
        [crop_scores(net, im, crops_per_image, iteration_rng(seed, i, stream=7)).mean() for i, im in enumerate(images)]
    )


def evaluate_model(
    spec: NetworkSpec,
    params: ParameterStore,
    samples: list[LabeledSample],
    crops_per_image: int = 30,
    seed: int = 0,
) -> EvalResult:
    """Score each sample as the mean over random crops and correlate with its MOS."""
    if not samples:
        raise ValueError("no samples to evaluate")
    preds = predict(spec, params, [s.image for s in samples], crops_per_image, seed)
    y = np.array([s.mos for s in samples])
    rows = [(s.id or str(i), float(s.mos), float(p)) for i, (s, p) in enumerate(zip(samples, preds))]
    try:
        lcc_value, err = lcc(y, preds), None
    except UndefinedCorrelationError as exc:
        lcc_value, err = None, str(exc)
    return EvalResult(lcc_value, srocc(y, preds), rows, err)


@dataclass
class LevelHistograms:
    """Scores of every distorted image, grouped by (kind, level)."""

    scores: dict[tuple[str, int], np.ndarray]
    bins: int = 30
    edges: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for kind in {k for k, _ in self.scores}:
            pooled = np.concatenate([v for (k, _), v in self.scores.items() if k == kind])
            lo, hi = float(pooled.min()), float(pooled.max())
            if hi <= lo:
                hi = lo + 1.0
            self.edges[kind] = np.linspace(lo, hi, self.bins + 1)

    def counts(self, kind: str, level: int) -> np.ndarray:
        return np.histogram(self.scores[(kind, level)], bins=self.edges[kind])[0]

    def level_means(self, kind: str) -> np.ndarray:
        levels = sorted(lv for k, lv in self.scores if k == kind)
        return np.array([self.scores[(kind, lv)].mean() for lv in levels])

    def ordered_steps(self, kind: str) -> tuple[int, int]:
        """(adjacent level pairs whose mean score strictly drops, total adjacent pairs)."""
        means = self.level_means(kind)
        return int(np.sum(np.diff(means) < 0)), max(len(means) - 1, 0)

    def level_srocc(self, kind: str) -> float:
        """SROCC between score and level quality rank over all images of ``kind``."""
        levels, scores = [], []
        for (k, lv), v in sorted(self.scores.items()):
            if k == kind:
                levels += [-lv] * len(v)
                scores += list(v)
        return srocc(levels, scores)

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "level", "bin_lo", "bin_hi", "count"])
            for kind, level in sorted(self.scores):
                e = self.edges[kind]
                for b, c in enumerate(self.counts(kind, level)):
                    w.writerow([kind, level, repr(float(e[b])), repr(float(e[b + 1])), int(c)])

    def plot(self, path) -> bool:
        """Render overlaid histograms; returns False if matplotlib is unavailable."""
        try:
            import matplotlib

            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError:
            return False
        kinds = sorted({k for k, _ in self.scores})
        fig, axes = plt.subplots(len(kinds), 1, figsize=(6, 3 * len(kinds)), squeeze=False)
        for ax, kind in zip(axes[:, 0], kinds):
            for (k, lv), v in sorted(self.scores.items()):
                if k == kind:
                    ax.hist(v, bins=self.edges[kind], alpha=0.5, label=f"level {lv}")
            ax.set_title(kind)
            ax.set_xlabel("predicted score")
            ax.legend(fontsize="small")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
        return True


def score_histograms(
    spec: NetworkSpec,
    params: ParameterStore,
    corpus,
    bins: int = 30,
    crops_per_image: int = 1,
    seed: int = 0,
) -> LevelHistograms:
    images, keys = [], []
    for g in corpus.groups:
        for lv, im in enumerate(g.distorted):
            images.append(im)
            keys.append((g.kind, lv))
    preds = predict(spec, params, images, crops_per_image, seed)
    grouped: dict[tuple[str, int], list[float]] = {}
    for key, p in zip(keys, preds):
        grouped.setdefault(key, []).append(float(p))
    return LevelHistograms({k: np.array(v) for k, v in grouped.items()}, bins)
