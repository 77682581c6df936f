"""Command-line entry points for the full pipeline.

Every command is deterministic given its flags and seed, and every error
exits nonzero with a one-line machine-parsable ``ERROR <CODE>: message``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import dataio
from .core import (
    DataFormatError,
    DimensionError,
    Hyperparams,
    SupervisionLabels,
    UnknownFactorError,
)
from .gibbs import SweepConfig, TrainingSet, dataset_vocabulary, train_auxiliary
from .heatmaps import accumulate_heatmaps, grid_descriptor
from .retrieval import cmc_curve, distance_matrix, parse_query, pr_curve, rank_images
from .synth import SyntheticSpec, synth_generate
from .transfer import adapt_target, uninformative_prior


class AppError(Exception):
    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(message)


def _weaken(labels: SupervisionLabels) -> SupervisionLabels:
    """Downgrade strong annotation to image-level presence labels."""
    if labels.mode != "strong":
        return labels
    weak = (labels.strong_labels.sum(axis=0) > 0).astype(np.int8)
    return SupervisionLabels(
        mode="weak",
        weak_labels=weak,
        foreground_mask=labels.foreground_mask,
        attribute_names=labels.attribute_names,
    )


def _load_aux(paths: list[str], modes: list[str]) -> list[TrainingSet]:
    if len(modes) == 1 and len(paths) > 1:
        modes = modes * len(paths)
    if len(modes) != len(paths):
        raise AppError("E_CONFIG", "--supervision needs one value, or one per --aux path")
    sets = []
    for path, mode in zip(paths, modes):
        items = dataio.load_feature_bags(path)
        if mode == "auto":
            pass
        elif mode == "weak":
            items = [(bag, _weaken(labels)) for bag, labels in items]
        elif mode == "strong":
            for bag, labels in items:
                if labels.mode != "strong":
                    raise AppError(
                        "E_FORMAT", f"{path}: image {bag.image_id} lacks strong labels"
                    )
        else:
            raise AppError("E_CONFIG", f"unknown supervision mode {mode!r}")
        sets.append(TrainingSet(items=items, name=os.path.basename(path)))
    return sets


def cmd_train(args) -> int:
    datasets = _load_aux(args.aux, args.supervision)
    names = dataset_vocabulary(datasets)
    k_supervised = len(names) + args.k_background
    k_max = args.k_max if args.k_max > 0 else k_supervised + 40
    hp = Hyperparams(
        alpha=args.alpha,
        beta=0.0 if args.no_mrf else args.beta,
        sigma_x=args.sigma_x,
        sigma_a=args.sigma_a,
        k_supervised=k_supervised,
        k_max=k_max,
        rng_seed=args.seed,
        k_background=args.k_background,
    )
    burn_in = args.burn_in if args.burn_in >= 0 else args.iters // 2
    cfg = SweepConfig(
        iterations=args.iters,
        appearance_resample_period=args.period,
        birth_enabled=not args.no_birth,
        birth_truncation=args.birth_truncation,
        sample_appearance=not args.no_sample,
        burn_in=burn_in,
        retain_samples=1,
    )

    def on_epoch(sweeps, lj, model):
        print(f"sweep {sweeps:6d}  factors {model.k_active:4d}  log_joint {lj:.6f}")

    result = train_auxiliary(datasets, hp, cfg, schedule=args.schedule, on_epoch=on_epoch)
    dataio.save_model(result.model, args.out)
    print(f"saved {args.out} ({result.model.k_active} factors)")
    return 0


def cmd_adapt(args) -> int:
    items = dataio.load_feature_bags(args.target)
    bags = [bag for bag, _ in items]
    d = bags[0].dim
    if args.no_transfer:
        hp = Hyperparams(
            alpha=args.alpha,
            beta=args.beta,
            sigma_x=args.sigma_x,
            sigma_a=args.sigma_a,
            k_supervised=0,
            k_max=max(args.k, args.k_max),
            rng_seed=args.seed,
        )
        source = uninformative_prior(args.k, d, hp)
    else:
        if not args.source:
            raise AppError("E_CONFIG", "--source is required unless --no-transfer is set")
        source = dataio.load_model(args.source)
        src_hp = source.hyperparams
        hp = Hyperparams(
            alpha=src_hp.alpha,
            beta=src_hp.beta,
            sigma_x=src_hp.sigma_x,
            sigma_a=src_hp.sigma_a,
            k_supervised=src_hp.k_supervised,
            k_max=max(src_hp.k_max, args.k),
            rng_seed=args.seed,
            k_background=src_hp.k_background,
        )
        if source.dim != d:
            raise DimensionError(
                f"target features are {d}-dimensional but the checkpoint expects {source.dim}"
            )
    period = args.iters + 1 if args.no_adapt else args.period
    cfg = SweepConfig(
        iterations=args.iters,
        appearance_resample_period=period,
        birth_enabled=args.births,
        birth_truncation=3,
        sample_appearance=False,
        burn_in=0,
        retain_samples=min(args.retain, args.iters),
    )
    result = adapt_target(
        bags, source, hp, cfg, k_target=args.k, schedule=args.schedule,
        on_epoch=lambda sweeps, lj, model: print(f"sweep {sweeps:6d}  log_joint {lj:.6f}"),
    )
    os.makedirs(args.out, exist_ok=True)
    dataio.save_model(result.model, os.path.join(args.out, "model.ckpt"))
    dataio.save_states(result.states, result.bags, os.path.join(args.out, "states.jsonl"))
    stacks = [
        accumulate_heatmaps(bag, result.trailing[i], result.factor_names)
        for i, bag in enumerate(result.bags)
    ]
    dataio.save_heatmaps(stacks, os.path.join(args.out, "heatmaps.jsonl"))
    print(f"saved model, states and heat maps for {len(bags)} images under {args.out}")
    return 0


def cmd_reid(args) -> int:
    probe_stacks = dataio.load_heatmaps(args.probe)
    gallery_stacks = dataio.load_heatmaps(args.gallery)
    with open(args.truth, "r", encoding="utf-8") as fh:
        truth_map = json.load(fh)
    probe_ids = sorted(probe_stacks)
    gallery_ids = sorted(gallery_stacks)
    gpos = {gid: i for i, gid in enumerate(gallery_ids)}
    truth = []
    for pid in probe_ids:
        if pid not in truth_map:
            raise AppError("E_TRUTH", f"no truth entry for probe {pid!r}")
        gid = truth_map[pid]
        if gid not in gpos:
            raise AppError("E_TRUTH", f"truth for {pid!r} references missing gallery id {gid!r}")
        truth.append(gpos[gid])
    probes = [grid_descriptor(probe_stacks[i]) for i in probe_ids]
    gallery = [grid_descriptor(gallery_stacks[i]) for i in gallery_ids]
    dist = distance_matrix(probes, gallery, row_band=args.row_band)
    cmc = cmc_curve(dist, np.array(truth))
    dataio.save_csv(
        [(r + 1, float(a)) for r, a in enumerate(cmc)], args.out, header=["rank", "accuracy"]
    )
    print(f"rank-1 accuracy {cmc[0]:.4f} over {len(probe_ids)} probes; wrote {args.out}")
    return 0


def cmd_search(args) -> int:
    stacks = dataio.load_heatmaps(args.index)
    names = None
    for stack in stacks.values():
        if names is None:
            names = stack.factor_names
        elif stack.factor_names != names:
            raise DataFormatError(f"inconsistent factor names at image {stack.image_id}")
    term = parse_query(args.query, names, colocated=not args.independent)
    ranked = rank_images(stacks, term)
    shown = ranked
    if args.min_score is not None:
        shown = [(i, s) for i, s in shown if s > args.min_score]
    if args.limit:
        shown = shown[: args.limit]
    dataio.save_csv(shown, args.out, header=["image_id", "score"])
    print(f"wrote {len(shown)} rows to {args.out}")
    if args.relevance:
        with open(args.relevance, "r", encoding="utf-8") as fh:
            rel_map = json.load(fh)
        ids = sorted(stacks)
        scores = np.array([dict(ranked).get(i, 0.0) for i in ids])
        relevance = np.array([bool(rel_map.get(i, False)) for i in ids])
        pr = pr_curve(scores, relevance)
        rows = [
            (float(t), float(p), float(r))
            for t, p, r in zip(pr.thresholds, pr.precision, pr.recall)
        ]
        rows.append(("AP", pr.average_precision, ""))
        out = args.pr_out or (args.out + ".pr.csv")
        dataio.save_csv(rows, out, header=["threshold", "precision", "recall"])
        print(f"average precision {pr.average_precision:.4f}; wrote {out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import build_search_index, create_app

    stacks = dataio.load_heatmaps(args.index)
    index = build_search_index(stacks)
    if args.ckpt:
        model = dataio.load_model(args.ckpt)
        if model.factor_names != index.factor_names:
            raise DataFormatError("checkpoint and index disagree on factor names")
    app = create_app(index)
    host, _, port = args.addr.rpartition(":")
    try:
        uvicorn.run(app, host=host or "127.0.0.1", port=int(port), log_level="warning")
    except OSError as exc:
        raise AppError("E_BIND", f"cannot bind {args.addr}: {exc}") from None
    return 0


def cmd_synth(args) -> int:
    with open(args.spec, "r", encoding="utf-8") as fh:
        spec = SyntheticSpec.from_dict(json.load(fh))
    result = synth_generate(spec)
    os.makedirs(args.out, exist_ok=True)
    dataio.save_feature_bags(result.source, os.path.join(args.out, "source.jsonl"))
    none_labels = SupervisionLabels(mode="none")
    dataio.save_feature_bags(
        [(bag, none_labels) for bag in result.target], os.path.join(args.out, "target.jsonl")
    )
    with open(os.path.join(args.out, "truth.json"), "w", encoding="utf-8") as fh:
        json.dump({k: v.tolist() for k, v in result.truth.items()}, fh)
    with open(os.path.join(args.out, "pairs.json"), "w", encoding="utf-8") as fh:
        json.dump({p: g for p, g in result.target_pairs}, fh)
    manifest = {
        "spec": spec.to_dict(),
        "files": ["source.jsonl", "target.jsonl", "truth.json", "pairs.json"],
        "factor_names": result.factor_names,
    }
    with open(os.path.join(args.out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    print(f"wrote synthetic benchmark under {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="semfactor", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train factor appearances on annotated data")
    t.add_argument("--aux", action="append", required=True, help="feature file (repeatable)")
    t.add_argument("--supervision", action="append", default=None,
                   help="auto|strong|weak, one value or one per --aux")
    t.add_argument("--out", required=True)
    t.add_argument("--iters", type=int, default=2000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--alpha", type=float, default=2.0)
    t.add_argument("--beta", type=float, default=1.0)
    t.add_argument("--sigma-x", type=float, default=0.5)
    t.add_argument("--sigma-a", type=float, default=1.0)
    t.add_argument("--k-max", type=int, default=0, help="0 = supervised count + 40")
    t.add_argument("--k-background", type=int, default=0)
    t.add_argument("--period", type=int, default=1)
    t.add_argument("--burn-in", type=int, default=-1, help="-1 = iters // 2")
    t.add_argument("--birth-truncation", type=int, default=3)
    t.add_argument("--no-mrf", action="store_true", help="disable spatial coupling (beta = 0)")
    t.add_argument("--no-birth", action="store_true")
    t.add_argument("--no-sample", action="store_true", help="always use posterior means")
    t.add_argument("--schedule", choices=["auto", "serial", "batched"], default="auto")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("adapt", help="adapt a trained model to unlabelled target data")
    a.add_argument("--target", required=True)
    a.add_argument("--source", default=None)
    a.add_argument("--out", required=True)
    a.add_argument("--iters", type=int, default=100)
    a.add_argument("--k", type=int, default=80)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--retain", type=int, default=20)
    a.add_argument("--period", type=int, default=1)
    a.add_argument("--no-adapt", action="store_true", help="keep the source appearance fixed")
    a.add_argument("--no-transfer", action="store_true", help="learn from scratch on the target")
    a.add_argument("--births", action="store_true")
    a.add_argument("--alpha", type=float, default=2.0)
    a.add_argument("--beta", type=float, default=1.0)
    a.add_argument("--sigma-x", type=float, default=0.5)
    a.add_argument("--sigma-a", type=float, default=1.0)
    a.add_argument("--k-max", type=int, default=0)
    a.add_argument("--schedule", choices=["auto", "serial", "batched"], default="auto")
    a.set_defaults(func=cmd_adapt)

    r = sub.add_parser("reid", help="match probe against gallery and emit a CMC table")
    r.add_argument("--probe", required=True, help="heat-map export for the probe view")
    r.add_argument("--gallery", required=True)
    r.add_argument("--truth", required=True, help="JSON {probe_id: gallery_id}")
    r.add_argument("--out", required=True)
    r.add_argument("--row-band", type=int, default=1)
    r.set_defaults(func=cmd_reid)

    s = sub.add_parser("search", help="rank images by an attribute query")
    s.add_argument("--index", required=True, help="heat-map export")
    s.add_argument("--query", required=True,
                   help="terms joined by '+', each a factor or a co-located pair like Red-Shirt")
    s.add_argument("--independent", action="store_true",
                   help="score multi-factor terms without co-location")
    s.add_argument("--out", required=True)
    s.add_argument("--limit", type=int, default=0)
    s.add_argument("--min-score", type=float, default=None,
                   help="drop results scoring at or below this threshold")
    s.add_argument("--relevance", default=None, help="JSON {image_id: 0/1} for a PR table")
    s.add_argument("--pr-out", default=None)
    s.set_defaults(func=cmd_search)

    v = sub.add_parser("serve", help="serve the search API over HTTP")
    v.add_argument("--index", required=True)
    v.add_argument("--ckpt", default=None, help="optional checkpoint (factor names cross-check)")
    v.add_argument("--addr", default="127.0.0.1:8763")
    v.set_defaults(func=cmd_serve)

    y = sub.add_parser("synth", help="generate a planted-factor benchmark")
    y.add_argument("--spec", required=True)
    y.add_argument("--out", required=True)
    y.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.command == "train" and not args.supervision:
        args.supervision = ["auto"]
    try:
        return args.func(args)
    except AppError as exc:
        print(f"ERROR {exc.code}: {exc}", file=sys.stderr)
    except DataFormatError as exc:
        print(f"ERROR E_FORMAT: {exc}", file=sys.stderr)
    except DimensionError as exc:
        print(f"ERROR E_DIM: {exc}", file=sys.stderr)
    except UnknownFactorError as exc:
        print(f"ERROR E_QUERY: {exc}", file=sys.stderr)
    except FileNotFoundError as exc:
        print(f"ERROR E_IO: {exc}", file=sys.stderr)
    except np.linalg.LinAlgError as exc:
        print(f"ERROR E_INTERNAL: linear solve failed: {exc}", file=sys.stderr)
    except ValueError as exc:
        print(f"ERROR E_CONFIG: {exc}", file=sys.stderr)
    except OSError as exc:
        print(f"ERROR E_IO: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
