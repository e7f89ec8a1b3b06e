"""Mini-batch assembly from ranked groups and labeled IQA manifests.

Random draws are keyed on ``(seed, iteration)`` rather than on a running
generator, so the batch for iteration ``t`` can be rebuilt from the seed
alone. That is what makes checkpoint resumption bit-exact.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distortion import RankedGroup
from .pgm import read_pgm
from .ranking_loss import DEFAULT_MARGIN, ComparabilityMatrix


class ManifestError(ValueError):
    pass


class SmallPatchWarning(UserWarning):
    pass


def sample_subimage(image, size: int, rng: np.random.Generator):
    """Uniformly placed ``size`` x ``size`` crop; returns ``(patch, (top, left))``."""
    im = np.asarray(image)
    h, w = im.shape[-2:]
    if size > h or size > w:
        raise ValueError(f"patch size {size} exceeds image size {h}x{w}")
    if 3 * size < min(h, w):
        warnings.warn(
            f"patch size {size} is under a third of the image side ({min(h, w)}); "
            "crops may lack context",
            SmallPatchWarning,
            stacklevel=2,
        )
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return im[..., top:top + size, left:left + size], (top, left)


@dataclass
class MiniBatch:
    images: np.ndarray
    reference_ids: list[str]
    kinds: list[str]
    levels: np.ndarray
    labels: ComparabilityMatrix
    offsets: list[tuple[int, int]] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.images.shape[0]

    @property
    def kind_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for k in self.kinds:
            counts[k] = counts.get(k, 0) + 1
        return counts

    @property
    def n_kinds(self) -> int:
        return len(self.kind_counts)


def assemble_minibatch(
    groups: list[RankedGroup],
    patch_size: int,
    rng: np.random.Generator,
    eps: float = DEFAULT_MARGIN,
) -> MiniBatch:
    """Crop every level of each group at one shared window and stack them.

    Samples are ordered group by group, level 0 first within a group.
    """
    if not groups:
        raise ValueError("cannot assemble a mini-batch from zero groups")
    images, refs, kinds, levels, offsets = [], [], [], [], []
    for g in groups:
        stack = np.stack(g.distorted)
        patches, off = sample_subimage(stack, patch_size, rng)
        images.append(patches)
        refs += [g.reference_id] * g.n
        kinds += [g.kind] * g.n
        levels += list(range(g.n))
        offsets.append(off)
    batch = np.concatenate(images).astype(np.float32)[:, None]
    labels = ComparabilityMatrix.from_groups(refs, kinds, levels, eps)
    return MiniBatch(batch, refs, kinds, np.asarray(levels), labels, offsets)


def iteration_rng(seed: int, iteration: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, stream, iteration])


class GroupSampler:
    """Cycles through groups in a fresh random order each epoch.

    ``groups_for(t)`` returns the groups of iteration ``t``: positions
    ``t*k .. t*k+k-1`` of the concatenated per-epoch permutations.
    """

    def __init__(self, groups: list[RankedGroup], groups_per_batch: int, seed: int):
        if not groups:
            raise ValueError("no ranked groups to sample from")
        if groups_per_batch < 1:
            raise ValueError("groups_per_batch must be at least 1")
        self.groups = groups
        self.groups_per_batch = groups_per_batch
        self.seed = seed
        self._perms: dict[int, np.ndarray] = {}

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._perms:
            self._perms = {epoch: iteration_rng(self.seed, epoch, stream=1).permutation(len(self.groups))}
        return self._perms[epoch]

    def groups_for(self, iteration: int) -> list[RankedGroup]:
        n = len(self.groups)
        out = []
        for pos in range(iteration * self.groups_per_batch, (iteration + 1) * self.groups_per_batch):
            out.append(self.groups[int(self._perm(pos // n)[pos % n])])
        return out

    def batch_for(self, iteration: int, patch_size: int, eps: float = DEFAULT_MARGIN) -> MiniBatch:
        return assemble_minibatch(self.groups_for(iteration), patch_size, iteration_rng(self.seed, iteration), eps)


# ---------------------------------------------------------------------------
# Labeled data
# ---------------------------------------------------------------------------


@dataclass
class LabeledSample:
    image: np.ndarray
    mos: float
    id: str = ""
    reference_id: str = ""


@dataclass
class LabeledDataset:
    samples: list[LabeledSample]
    score_range: tuple[float, float]
    split_seed: int
    train_refs: list[str]
    test_refs: list[str]

    @property
    def train(self) -> list[LabeledSample]:
        keep = set(self.train_refs)
        return [s for s in self.samples if s.reference_id in keep]

    @property
    def test(self) -> list[LabeledSample]:
        keep = set(self.test_refs)
        return [s for s in self.samples if s.reference_id in keep]


def split_by_reference(reference_ids, train_fraction: float = 0.8, seed: int = 0):
    """Shuffle distinct reference ids and cut them into (train, test) lists."""
    refs = sorted(set(reference_ids))
    if not refs:
        return [], []
    order = np.random.default_rng(seed).permutation(len(refs))
    n_train = int(round(train_fraction * len(refs)))
    if len(refs) >= 2:
        n_train = min(max(n_train, 1), len(refs) - 1)
    train = sorted(refs[i] for i in order[:n_train])
    test = sorted(refs[i] for i in order[n_train:])
    return train, test


def synthetic_mos(level_index: int, n_levels: int, score_range=(0.0, 100.0)) -> float:
    """Monotone stand-in for human opinion: level 0 maps to the top of the range."""
    lo, hi = score_range
    return hi - (hi - lo) * level_index / (n_levels - 1)


def write_labeled_manifest(path, entries, score_range=(0.0, 100.0), split_seed: int = 0) -> None:
    """``entries``: iterable of ``(relative_path, mos, reference_id)``."""
    lines = [f"# score_range {score_range[0]:g} {score_range[1]:g}", f"# split_seed {split_seed}"]
    for rel, mos, ref in entries:
        lines.append(f"{rel} {mos!r} {ref}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_labeled_dataset(manifest_path, train_fraction: float = 0.8) -> LabeledDataset:
    """Read a labeled manifest and split it by reference id.

    Format: header lines ``# score_range LO HI`` and ``# split_seed S``,
    then one ``<relative_path> <mos> [reference_id]`` line per image. The
    reference id defaults to the name of the image's parent directory.
    Paths are relative to the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise ManifestError(f"manifest {manifest_path} does not exist")
    root = manifest_path.parent
    score_range = None
    split_seed = None
    entries = []
    problems = []
    for lineno, raw in enumerate(manifest_path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            try:
                if parts and parts[0] == "score_range":
                    score_range = (float(parts[1]), float(parts[2]))
                elif parts and parts[0] == "split_seed":
                    split_seed = int(parts[1])
            except (IndexError, ValueError):
                problems.append(f"line {lineno}: bad header {line!r}")
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            problems.append(f"line {lineno}: expected '<path> <mos> [reference_id]', got {line!r}")
            continue
        try:
            mos = float(parts[1])
        except ValueError:
            problems.append(f"line {lineno}: MOS {parts[1]!r} is not a number")
            continue
        ref = parts[2] if len(parts) == 3 else Path(parts[0]).parent.name
        entries.append((lineno, parts[0], mos, ref))
    if score_range is None:
        problems.append("missing '# score_range LO HI' header")
    if split_seed is None:
        problems.append("missing '# split_seed S' header")
    if problems:
        raise ManifestError(f"{manifest_path}: " + "; ".join(problems))

    lo, hi = score_range
    missing = [rel for _, rel, _, _ in entries if not (root / rel).is_file()]
    if missing:
        raise ManifestError(f"{manifest_path}: missing image files: {', '.join(missing)}")
    bad = [f"line {n}: {mos}" for n, _, mos, _ in entries if not (np.isfinite(mos) and lo <= mos <= hi)]
    if bad:
        raise ManifestError(f"{manifest_path}: MOS outside score range [{lo:g}, {hi:g}]: {', '.join(bad)}")

    samples = [LabeledSample(read_pgm(root / rel), mos, rel, ref) for _, rel, mos, ref in entries]
    train, test = split_by_reference([s.reference_id for s in samples], train_fraction, split_seed)
    return LabeledDataset(samples, score_range, split_seed, train, test)
