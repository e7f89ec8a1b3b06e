"""Command-line driver: generate, train-rank, finetune, eval, bench, gradcheck.

Every command writes ``run_manifest.json`` into its output directory
before doing any work. Settings come from an optional JSON ``--config``
file; explicit flags override it. Exit status: 0 success, 1 internal
error, 2 user or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .corpus import Corpus, CorpusError, build_corpus, load_corpus, synthetic_references, write_corpus
from .dataset import GroupSampler, ManifestError, load_labeled_dataset
from .distortion import KINDS, DistortionSpec, synthesize_ranked_group
from .metrics import evaluate_model, score_histograms
from .pgm import PGMError, read_pgm
from .ranking_loss import (
    ComparabilityMatrix,
    ConfigError,
    RankingObjective,
    efficient_gradient,
    max_relative_difference,
    naive_pairwise_gradient,
)
from .tensor_core import default_spec, gradient_check, init_params
from .trainer import (
    CheckpointError,
    RankingProbe,
    RegressionObjective,
    TrainConfig,
    TrainingError,
    finetune_regression,
    load_checkpoint,
    train_ranking,
)

USER_ERRORS = (CorpusError, ManifestError, CheckpointError, PGMError, ConfigError, TrainingError, FileNotFoundError, ValueError)


class UsageError(Exception):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None


def _train_config(cfg: dict, args, **defaults) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    values = dict(defaults)
    values.update({k: v for k, v in cfg.items() if k in known})
    if getattr(args, "seed", None) is not None:
        values["init_seed"] = values["data_seed"] = args.seed
    if getattr(args, "strategy", None):
        values["strategy"] = args.strategy
    if getattr(args, "iterations", None):
        values["iterations"] = args.iterations
    return TrainConfig(**values)


def _write_manifest(out: Path, args, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config_path": str(args.config) if args.config else None,
        "resolved": resolved,
        "output_dir": str(out),
        "tool_version": __version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, default=str))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    kinds = args.kinds.split(",") if args.kinds else cfg.get("kinds", ["gaussian_blur"])
    for k in kinds:
        if k not in KINDS:
            raise UsageError(f"unknown distortion kind {k!r}; choose from {', '.join(KINDS)}")
    levels = cfg.get("levels", {})
    out = Path(args.out)
    refs_dir = args.references or cfg.get("references")
    n_synth = args.synthetic if args.synthetic is not None else cfg.get("synthetic")
    size = args.size or cfg.get("size", 96)
    resolved = {"seed": seed, "kinds": kinds, "levels": levels, "references": refs_dir, "synthetic": n_synth, "size": size}
    _write_manifest(out, args, resolved)

    if refs_dir:
        refs_dir = Path(refs_dir)
        if not refs_dir.is_dir():
            raise UsageError(f"reference directory {refs_dir} does not exist")
        files = sorted(refs_dir.glob("*.pgm"))
        if not files:
            raise UsageError(f"no .pgm reference images in {refs_dir}")
        refs, bad = {}, []
        for f in files:
            try:
                refs[f.stem] = read_pgm(f)
            except PGMError as exc:
                bad.append(str(exc))
        if bad:
            for msg in bad:
                print(f"error: {msg}", file=sys.stderr)
            return 2
    elif n_synth:
        refs = synthetic_references(int(n_synth), int(size), seed)
    else:
        raise UsageError("give --references DIR or --synthetic N")

    corpus = build_corpus(refs, kinds, levels, seed, workers=args.workers)
    write_corpus(corpus, out, split_seed=seed)
    n_files = sum(g.n for g in corpus.groups)
    print(f"wrote {n_files} distorted images ({len(refs)} references x {len(kinds)} kinds) to {out}")
    return 0


def _training_groups(corpus: Corpus, corpus_dir: Path, all_refs: bool) -> Corpus:
    labels = corpus_dir / "labels.txt"
    if all_refs or not labels.is_file():
        return corpus
    split = load_labeled_dataset(labels)
    return corpus.subset(split.train_refs)


def cmd_train_rank(args) -> int:
    cfg = _load_config(args.config)
    config = _train_config(cfg, args)
    corpus_dir = Path(args.corpus or cfg.get("corpus", ""))
    if not (corpus_dir / "manifest.json").is_file():
        raise UsageError(f"no corpus at {corpus_dir} (missing manifest.json)")
    out = Path(args.out)
    _write_manifest(out, args, {"train_config": config.to_dict(), "corpus": str(corpus_dir), "resume": args.resume})
    corpus = _training_groups(load_corpus(corpus_dir), corpus_dir, args.all_references)
    resume = load_checkpoint(args.resume) if args.resume else None
    probe = RankingProbe(corpus.groups, config.patch_size, config.margin) if args.probe else None
    ckpt, report = train_ranking(config, corpus, resume=resume, probe=probe, checkpoint_path=out / "model.ckpt")
    report.write_csv(out / "report.csv")
    if probe is not None:
        report.write_probe_csv(out / "probe.csv")
    print(
        f"strategy={report.strategy} iterations={config.iterations} final_loss={report.final_loss():.6f} "
        f"forward_count={report.forward_count} wall_time={report.wall_time:.1f}s"
    )
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_config(args.config)
    config = _train_config(cfg, args, phase="finetune", lr=1e-4)
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    out = Path(args.out)
    labels = args.labels or cfg.get("labels")
    if not labels:
        raise UsageError("--labels is required")
    _write_manifest(out, args, {"train_config": config.to_dict(), "checkpoint": args.checkpoint, "labels": labels})
    ranking = load_checkpoint(args.checkpoint)
    data = load_labeled_dataset(labels)
    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt, report = finetune_regression(ranking, data.train, config, resume=resume, checkpoint_path=out / "model.ckpt")
    report.write_csv(out / "report.csv")
    print(
        f"finetune iterations={config.iterations} final_loss={report.final_loss():.6f} "
        f"forward_count={report.forward_count} train_images={len(data.train)}"
    )
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    if not args.checkpoint or not args.labels:
        raise UsageError("--checkpoint and --labels are required")
    out = Path(args.out)
    crops = args.crops or cfg.get("crops_per_image", 30)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    _write_manifest(out, args, {"checkpoint": args.checkpoint, "labels": args.labels, "crops": crops, "split": args.split, "seed": seed})
    ckpt = load_checkpoint(args.checkpoint)
    data = load_labeled_dataset(args.labels)
    samples = {"test": data.test, "train": data.train, "all": data.samples}[args.split]
    result = evaluate_model(ckpt.spec, ckpt.params, samples, crops, seed)
    result.write_csv(out / "eval.csv")
    lcc_txt = f"{result.lcc:.4f}" if result.lcc is not None else "undefined"
    print(f"N={result.N} LCC={lcc_txt} SROCC={result.srocc:.4f}")
    if result.lcc is None:
        print(f"warning: {result.lcc_error}", file=sys.stderr)
    if args.corpus:
        corpus = load_corpus(args.corpus)
        refs = {s.reference_id for s in samples}
        hist = score_histograms(ckpt.spec, ckpt.params, corpus.subset(refs), crops_per_image=min(crops, 5), seed=seed)
        hist.write_csv(out / "histograms.csv")
        if args.plot:
            hist.plot(out / "histograms.png")
        for kind in corpus.kinds:
            if any(k == kind for k, _ in hist.scores):
                means = ", ".join(f"{m:.3f}" for m in hist.level_means(kind))
                print(f"{kind}: level means [{means}]")
    return 0


def bench_rows(reference: np.ndarray, levels=(2, 4, 6, 8), patch: int = 48, seed: int = 0, repeats: int = 3):
    """Efficient vs per-pair gradient on one n-level blur group per ``n``."""
    spec = default_spec(patch)
    params = init_params(spec, seed, dtype=np.float64)
    h, w = reference.shape
    top, left = (h - patch) // 2, (w - patch) // 2
    rows = []
    for n in levels:
        sigmas = tuple(np.linspace(0.5, 4.0, n))
        group = synthesize_ranked_group(reference, DistortionSpec("gaussian_blur", sigmas), "bench")
        batch = np.stack([d[top:top + patch, left:left + patch] for d in group.distorted])[:, None]
        labels = ComparabilityMatrix.full_order(n)
        t_eff, t_naive = [], []
        for _ in range(repeats):
            t0 = time.perf_counter()
            eff = efficient_gradient(spec, params, batch, labels)
            t_eff.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            naive = naive_pairwise_gradient(spec, params, batch, labels)
            t_naive.append(time.perf_counter() - t0)
        rows.append(
            {
                "n": n,
                "efficient_forwards": eff.forward_count,
                "naive_forwards": naive.forward_count,
                "count_ratio": naive.forward_count / eff.forward_count,
                "efficient_seconds": min(t_eff),
                "naive_seconds": min(t_naive),
                "wall_ratio": min(t_naive) / min(t_eff),
                "max_rel_diff": max_relative_difference(eff.grads, naive.grads),
            }
        )
    return rows


def cmd_bench(args) -> int:
    cfg = _load_config(args.config)
    if not args.corpus:
        raise UsageError("--corpus is required")
    out = Path(args.out)
    levels = [int(x) for x in (args.levels or "2,4,6,8").split(",")]
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    _write_manifest(out, args, {"corpus": args.corpus, "levels": levels, "seed": seed})
    corpus = load_corpus(args.corpus)
    g = corpus.groups[0]
    reference = g.reference if g.reference is not None else g.distorted[0]
    rows = bench_rows(reference, levels, corpus_patch(cfg), seed)
    ok = True
    header = list(rows[0])
    lines = [",".join(header)] + [",".join(repr(r[k]) for k in header) for r in rows]
    (out / "bench.csv").write_text("\n".join(lines) + "\n")
    print(f"{'n':>3} {'eff':>5} {'naive':>6} {'ratio':>6} {'wall_ratio':>10} {'max_rel_diff':>12}")
    for r in rows:
        good = r["naive_forwards"] == r["n"] ** 2 - r["n"] and r["count_ratio"] == r["n"] - 1 and r["max_rel_diff"] <= 1e-6
        ok &= good
        print(
            f"{r['n']:>3} {r['efficient_forwards']:>5} {r['naive_forwards']:>6} {r['count_ratio']:>6.1f} "
            f"{r['wall_ratio']:>10.2f} {r['max_rel_diff']:>12.2e}{'' if good else '  MISMATCH'}"
        )
    return 0 if ok else 1


def corpus_patch(cfg: dict) -> int:
    return int(cfg.get("patch_size", 48))


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    patch = corpus_patch(cfg)
    out = Path(args.out)
    _write_manifest(out, args, {"seed": seed, "samples_per_param": args.samples, "patch_size": patch})
    rng = np.random.default_rng(seed)
    spec = default_spec(patch)
    # float64 so central differences resolve the tolerance
    params = init_params(spec, seed, dtype=np.float64)
    if args.corpus:
        mb = GroupSampler(load_corpus(args.corpus).groups, 2, seed).batch_for(0, patch)
        batch, labels = mb.images.astype(np.float64), mb.labels
    else:
        batch = rng.random((10, 1, patch, patch))
        labels = ComparabilityMatrix.from_groups([0] * 5 + [1] * 5, ["k"] * 10, list(range(5)) * 2)
    targets = rng.uniform(0, 100, size=batch.shape[0])
    ok = True
    text = []
    for name, objective in (("ranking", RankingObjective(labels)), ("regression", RegressionObjective(targets))):
        report = gradient_check(spec, params, batch, objective, args.tolerance, samples_per_param=args.samples, seed=seed)
        ok &= report.passed
        text.append(f"[{name}]\n{report}")
    (out / "gradcheck.txt").write_text("\n\n".join(text) + "\n")
    print("\n\n".join(text))
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="siamrank", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, help="overrides every seed in the config")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("generate", help="synthesize a ranked corpus")
    common(p)
    p.add_argument("--references", help="directory of reference .pgm images")
    p.add_argument("--synthetic", type=int, help="number of procedural references instead")
    p.add_argument("--size", type=int, help="procedural reference side length")
    p.add_argument("--kinds", help=f"comma list from {','.join(KINDS)}")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train-rank", help="phase 1: ranking training")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--strategy", choices=("efficient", "randompair"))
    p.add_argument("--iterations", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--probe", action="store_true", help="log probe-set loss (probe.csv)")
    p.add_argument("--all-references", action="store_true", help="ignore the labels.txt train/test split")
    p.set_defaults(func=cmd_train_rank)

    p = sub.add_parser("finetune", help="phase 2: regression fine-tuning")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--labels")
    p.add_argument("--iterations", type=int)
    p.add_argument("--resume")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="LCC / SROCC on a labeled split")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--labels")
    p.add_argument("--corpus", help="also write per-level histograms for this corpus")
    p.add_argument("--crops", type=int)
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="efficient vs per-pair gradient cost")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--levels", help="comma list of group sizes (default 2,4,6,8)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of both losses")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--samples", type=int, default=12, help="entries checked per parameter tensor")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {exc!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
