"""Ranked-image corpora in memory and on disk.

On-disk layout::

    <root>/manifest.json
    <root>/labels.txt                      synthetic-MOS labeled manifest
    <root>/references/<reference_id>.pgm
    <root>/<kind>/<reference_id>/level_<k>.pgm
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import synthetic_mos, write_labeled_manifest
from .distortion import KINDS, DistortionSpec, RankedGroup, synthesize_ranked_group, synthetic_reference
from .pgm import quantize8, read_pgm, write_pgm

MANIFEST_FORMAT = "siamrank-corpus"
MANIFEST_VERSION = 1


class CorpusError(ValueError):
    pass


@dataclass
class Corpus:
    groups: list[RankedGroup]
    seed: int = 0
    specs: dict[str, DistortionSpec] = field(default_factory=dict)

    @property
    def reference_ids(self) -> list[str]:
        seen = []
        for g in self.groups:
            if g.reference_id not in seen:
                seen.append(g.reference_id)
        return seen

    @property
    def kinds(self) -> list[str]:
        return sorted({g.kind for g in self.groups})

    def subset(self, reference_ids=None, kinds=None) -> "Corpus":
        keep_refs = None if reference_ids is None else set(reference_ids)
        keep_kinds = None if kinds is None else set(kinds)
        groups = [
            g for g in self.groups
            if (keep_refs is None or g.reference_id in keep_refs) and (keep_kinds is None or g.kind in keep_kinds)
        ]
        return Corpus(groups, self.seed, {k: s for k, s in self.specs.items() if keep_kinds is None or k in keep_kinds})

    @property
    def n_comparable_pairs(self) -> int:
        return sum(g.n * (g.n - 1) // 2 for g in self.groups)


def group_seed(seed: int, ref_index: int, kind: str) -> int:
    return int(np.random.SeedSequence([seed, ref_index, KINDS.index(kind)]).generate_state(1)[0])


def build_corpus(
    references: dict[str, np.ndarray],
    kinds=("gaussian_blur",),
    levels: dict | None = None,
    seed: int = 0,
    workers: int = 1,
) -> Corpus:
    """Distort every reference with every kind.

    ``levels`` optionally overrides the default grid per kind. Pixel
    values are rounded to 8 bits so that the in-memory corpus equals what
    :func:`write_corpus` stores.
    """
    levels = levels or {}
    specs = {k: DistortionSpec(k, tuple(levels.get(k, ())), seed) for k in kinds}
    jobs = [(i, rid, k) for i, rid in enumerate(references) for k in kinds]

    def make(job):
        i, rid, kind = job
        spec = DistortionSpec(kind, specs[kind].levels, group_seed(seed, i, kind))
        g = synthesize_ranked_group(quantize8(references[rid]), spec, rid)
        g.distorted = [quantize8(d) for d in g.distorted]
        return g

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            groups = list(pool.map(make, jobs))
    else:
        groups = [make(j) for j in jobs]
    return Corpus(groups, seed, specs)


def synthetic_references(n: int, size: int = 96, seed: int = 0, prefix: str = "ref") -> dict[str, np.ndarray]:
    return {f"{prefix}{i:03d}": synthetic_reference(seed * 100003 + i, size) for i in range(n)}


def write_corpus(corpus: Corpus, root, score_range=(0.0, 100.0), split_seed: int = 0) -> Path:
    """Write images, ``manifest.json`` and a synthetic-MOS ``labels.txt``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    group_entries = []
    label_entries = []
    written_refs = set()
    for g in corpus.groups:
        if g.reference_id not in written_refs:
            write_pgm(root / "references" / f"{g.reference_id}.pgm", g.reference)
            written_refs.add(g.reference_id)
        files = []
        for k, im in enumerate(g.distorted):
            rel = f"{g.kind}/{g.reference_id}/level_{k}.pgm"
            write_pgm(root / rel, im)
            files.append(rel)
            label_entries.append((rel, synthetic_mos(k, g.n, score_range), g.reference_id))
        group_entries.append({"kind": g.kind, "reference_id": g.reference_id, "files": files})
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "seed": corpus.seed,
        "kinds": {k: {"levels": list(s.levels)} for k, s in corpus.specs.items()},
        "references": corpus.reference_ids,
        "groups": group_entries,
    }
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2))
    tmp.replace(root / "manifest.json")
    write_labeled_manifest(root / "labels.txt", label_entries, score_range, split_seed)
    return root


def load_corpus(root) -> Corpus:
    root = Path(root)
    path = root / "manifest.json"
    if not path.is_file():
        raise CorpusError(f"no corpus manifest at {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{path}: invalid JSON ({exc})") from None
    if manifest.get("format") != MANIFEST_FORMAT or manifest.get("version") != MANIFEST_VERSION:
        raise CorpusError(f"{path}: unsupported corpus format/version")
    specs = {k: DistortionSpec(k, tuple(v["levels"]), manifest["seed"]) for k, v in manifest["kinds"].items()}
    missing = [f for g in manifest["groups"] for f in g["files"] if not (root / f).is_file()]
    if missing:
        raise CorpusError(f"{path}: missing files: {', '.join(missing[:10])}")
    groups = []
    for g in manifest["groups"]:
        ref_path = root / "references" / f"{g['reference_id']}.pgm"
        distorted = [read_pgm(root / f) for f in g["files"]]
        reference = read_pgm(ref_path) if ref_path.is_file() else None
        groups.append(RankedGroup(reference, distorted, g["kind"], g["reference_id"], specs[g["kind"]].levels))
    return Corpus(groups, manifest["seed"], specs)
