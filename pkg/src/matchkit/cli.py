"""Command-line entry point: gen-data, train, match, eval, bench.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Machine-readable
JSON goes to --out paths; human-readable summaries go to stdout. Log level
comes from OG_LOG (error|info|debug).
"""

from __future__ import annotations

import argparse
import json
import logging
import multiprocessing
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import features as ft
from . import geomeval as ge
from . import matching as mt
from . import synthdata as sd
from . import training as tr
from .model import (MatcherModel, forward_pair, init_model, load_checkpoint,
                    match_pair)
from .propagation import EmptyKeypointsError, PropagationStats

log = logging.getLogger("matchkit")


class CliError(RuntimeError):
    pass


def _configure_logging() -> None:
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("OG_LOG", "info").lower(), logging.INFO)
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _pair_dirs(data_dir: Path) -> list[Path]:
    dirs = sorted(p for p in Path(data_dir).iterdir()
                  if p.is_dir() and (p / "a.ogff").exists())
    if not dirs:
        raise CliError(f"no pair directories under {data_dir}")
    return dirs


# ---------------------------------------------------------------------------
# gen-data


def _generate_one(args_tuple):
    index, out_root, kind, radius, crop, source_size, texture, seed, ext_doc = args_tuple
    extractor = sd.SurrogateExtractorConfig(**ext_doc)
    spec = sd.HomographyPairSpec(
        crop_size=(crop, crop), corner_perturbation_radius=radius)
    for attempt in range(50):
        rng = np.random.default_rng(np.random.SeedSequence((seed, index, attempt)))
        image = sd.procedural_texture(texture, source_size, rng)
        try:
            pair = sd.make_pair(image, spec, extractor, rng, f"{kind}_{index:05d}")
        except sd.InsufficientKeypointsError:
            continue
        pair_dir = Path(out_root) / f"pair_{index:05d}"
        ft.save_pair(pair, pair_dir)
        return {
            "dir": pair_dir.name,
            "max_corner_displacement": sd.max_corner_displacement(
                pair.gt_transform, spec.crop_size),
            "num_keypoints_a": pair.set_a.num_keypoints,
            "num_keypoints_b": pair.set_b.num_keypoints,
            "num_gt_matches": len(pair.gt_matches),
        }
    raise CliError(f"could not generate pair {index}: textures kept getting rejected")


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext_doc = {
        "max_keypoints": args.max_keypoints,
        "descriptor_dim": args.descriptor_dim,
        "guidance_dim": args.guidance_dim,
    }
    tasks = [(i, str(out), args.kind, args.radius, args.crop, args.source_size,
              args.texture, args.seed, ext_doc) for i in range(args.pairs)]
    if args.jobs > 1:
        with multiprocessing.Pool(args.jobs) as pool:
            infos = pool.map(_generate_one, tasks)
    else:
        infos = [_generate_one(t) for t in tasks]
    manifest = {
        "kind": args.kind,
        "radius": args.radius,
        "pairs": args.pairs,
        "seed": args.seed,
        "crop_size": [args.crop, args.crop],
        "source_size": args.source_size,
        "texture": args.texture,
        "extractor": ext_doc,
        "pairs_info": infos,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)
    displacements = [p["max_corner_displacement"] for p in infos]
    print(f"wrote {args.pairs} pairs to {out}")
    print(f"corner displacement max {max(displacements):.1f} px "
          f"(bound {args.radius}); keypoints/pair ~"
          f"{np.mean([p['num_keypoints_a'] for p in infos]):.0f}")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    config = tr.load_train_config(args.config)
    if args.steps is not None:
        config.steps = args.steps
    if args.seed is not None:
        config.seed = args.seed
    if args.data is not None:
        config.train_data = args.data
    if args.eval_data is not None:
        config.eval_data = args.eval_data
    config.validate()
    if not config.train_data:
        raise CliError("no training data: pass --data or set train_data in the config")
    train_dirs = _pair_dirs(Path(config.train_data))
    eval_dirs = _pair_dirs(Path(config.eval_data)) if config.eval_data else []

    optimizer_state = None
    if args.init_checkpoint:
        model, optimizer_state = load_checkpoint(args.init_checkpoint)
        if not args.resume:
            optimizer_state = None  # fresh optimizer, pretrained weights
        log.info("initialized from %s", args.init_checkpoint)
    else:
        model = init_model(config.model, seed=config.seed)

    def progress(step, loss):
        if step % 50 == 0 or step == config.steps:
            log.info("step %d/%d loss %.4f", step, config.steps, loss)

    try:
        result = tr.train(model, train_dirs, config, args.out, eval_pairs=eval_dirs,
                          optimizer_state=optimizer_state, progress=progress)
    except tr.TrainingAbortedError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1
    with open(Path(args.out) / "train_config.json", "w") as f:
        json.dump(tr.train_config_to_dict(config), f, indent=1)
    print(f"checkpoint: {result.checkpoint_path}")
    if result.final_loss is not None:
        print(f"steps {result.steps_run}, final loss {result.final_loss:.4f}")
    return 0


# ---------------------------------------------------------------------------
# match


_WORKER_MODEL: MatcherModel | None = None
_WORKER_ARGS: dict = {}


def _match_worker_init(ckpt, baseline, min_confidence, keep_ratio):
    global _WORKER_MODEL, _WORKER_ARGS
    _WORKER_MODEL = load_checkpoint(ckpt)[0] if ckpt else None
    _WORKER_ARGS = {"baseline": baseline, "min_confidence": min_confidence,
                    "keep_ratio": keep_ratio}


def _match_one(fs_a: ft.FeatureSet, fs_b: ft.FeatureSet, model, baseline,
               min_confidence, keep_ratio) -> list[dict]:
    if baseline == "mnn":
        matches = mt.mutual_nearest_matches(fs_a.descriptors, fs_b.descriptors)
    else:
        matches, _ = match_pair(model, fs_a, fs_b, min_confidence=min_confidence,
                                keep_ratio=keep_ratio)
    return mt.match_list_to_json(matches, fs_a.locations, fs_b.locations)


def _match_pair_dir(pair_dir: str) -> tuple[str, list[dict]]:
    fs_a = ft.read_features(Path(pair_dir) / "a.ogff")
    fs_b = ft.read_features(Path(pair_dir) / "b.ogff")
    doc = _match_one(fs_a, fs_b, _WORKER_MODEL, **_WORKER_ARGS)
    return Path(pair_dir).name, doc


def cmd_match(args) -> int:
    if bool(args.a) != bool(args.b):
        raise CliError("--a and --b must be given together")
    if not args.a and not args.data:
        raise CliError("give either --a/--b or --data")
    if args.baseline is None and not args.ckpt:
        raise CliError("--ckpt is required unless --baseline mnn is used")

    if args.a:
        _match_worker_init(args.ckpt, args.baseline, args.min_confidence, args.keep_ratio)
        fs_a = ft.read_features(args.a)
        fs_b = ft.read_features(args.b)
        doc = _match_one(fs_a, fs_b, _WORKER_MODEL, **_WORKER_ARGS)
        with open(args.out, "w") as f:
            json.dump(doc, f)
        print(f"{len(doc)} matches ({args.a} vs {args.b}) -> {args.out}")
        return 0

    pair_dirs = [str(p) for p in _pair_dirs(Path(args.data))]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    init_args = (args.ckpt, args.baseline, args.min_confidence, args.keep_ratio)
    if args.jobs > 1:
        with multiprocessing.Pool(args.jobs, initializer=_match_worker_init,
                                  initargs=init_args) as pool:
            results = pool.map(_match_pair_dir, pair_dirs)
    else:
        _match_worker_init(*init_args)
        results = [_match_pair_dir(p) for p in pair_dirs]
    total = 0
    for name, doc in sorted(results):
        with open(out / f"{name}.json", "w") as f:
            json.dump(doc, f)
        total += len(doc)
    print(f"matched {len(results)} pairs, {total} matches -> {out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _load_matches(pred_dir: Path, pair_name: str) -> mt.MatchList:
    path = pred_dir / f"{pair_name}.json"
    if not path.exists():
        raise CliError(f"missing prediction file {path}")
    with open(path) as f:
        doc = json.load(f)
    return mt.MatchList(pairs=[(row["i"], row["j"], row.get("conf", 1.0)) for row in doc],
                        threshold=0.0)


def _matched_points(matches: mt.MatchList, pair: ft.PairRecord):
    idx = matches.indices()
    return (np.asarray(pair.set_a.locations, dtype=np.float64)[idx[:, 0]],
            np.asarray(pair.set_b.locations, dtype=np.float64)[idx[:, 1]])


def cmd_eval(args) -> int:
    cfg = ge.EvalConfig(ransac_iters=args.ransac_iters, seed=args.seed)
    pred_dir = Path(args.pred)
    per_pair = []
    task = args.task
    pose_errors = []
    agg = {"correct": 0, "incorrect": 0, "matchable": 0}
    pck_rows = []
    for pair_dir in _pair_dirs(Path(args.data)):
        pair = ft.load_pair(pair_dir)
        matches = _load_matches(pred_dir, pair_dir.name)
        if task == "corr":
            res = ge.correspondence_pr(matches, pair, cfg)
            per_pair.append({"pair": pair_dir.name, "precision": res.precision,
                             "recall": res.recall, "n_correct": res.n_correct,
                             "n_incorrect": res.n_incorrect, "n_band": res.n_band,
                             "n_matchable": res.n_matchable,
                             "n_matches": len(matches)})
            agg["correct"] += res.n_correct
            agg["incorrect"] += res.n_incorrect
            agg["matchable"] += res.n_matchable
        elif task == "pose":
            if pair.kind != "pose":
                raise CliError(f"pose evaluation needs pose ground truth, "
                               f"{pair_dir.name} has {pair.kind}")
            gt = pair.gt_transform
            pts_a, pts_b = _matched_points(matches, pair)
            res = ge.estimate_pose(pts_a, pts_b, gt.intrinsics_a, gt.intrinsics_b, cfg,
                                   gt_rotation=gt.rotation)
            err = res.rotation_error_deg if res.ok else ge.PoseResult.FAILURE_ERROR_DEG
            pose_errors.append(err)
            per_pair.append({"pair": pair_dir.name, "ok": res.ok,
                             "rotation_error_deg": err, "num_inliers": res.num_inliers})
        elif task == "pck":
            if pair.kind != "affine":
                raise CliError(f"pck evaluation needs affine ground truth, "
                               f"{pair_dir.name} has {pair.kind}")
            pts_a, pts_b = _matched_points(matches, pair)
            res = ge.estimate_affine_pck(pts_a, pts_b, pair.gt_transform,
                                         pair.set_a.image_size, cfg)
            pck_rows.append(res.pck)
            per_pair.append({"pair": pair_dir.name, "ok": res.ok,
                             "pck": {str(k): v for k, v in res.pck.items()}})

    if task == "corr":
        classified = agg["correct"] + agg["incorrect"]
        aggregate = {
            "precision": agg["correct"] / classified if classified else None,
            "recall": agg["correct"] / agg["matchable"] if agg["matchable"] else 0.0,
            **agg,
        }
        print(f"corr: precision {aggregate['precision']} recall {aggregate['recall']:.4f} "
              f"({len(per_pair)} pairs)")
    elif task == "pose":
        acc, auc = ge.pose_accuracy_and_auc(pose_errors, cfg.pose_thresholds_deg)
        aggregate = {"accuracy": {str(k): v for k, v in acc.items()},
                     "auc": {str(k): v for k, v in auc.items()},
                     "failures": sum(e >= ge.PoseResult.FAILURE_ERROR_DEG
                                     for e in pose_errors)}
        print("pose: " + "  ".join(f"acc@{t:g} {v:.3f}" for t, v in acc.items()))
        print("      " + "  ".join(f"auc@{t:g} {v:.3f}" for t, v in auc.items()))
    else:
        taus = cfg.pck_taus
        aggregate = {f"pck@{tau}": float(np.mean([row[tau] for row in pck_rows]))
                     for tau in taus}
        print("pck:  " + "  ".join(f"{k} {v:.3f}" for k, v in aggregate.items()))

    report = {"task": task, "per_pair": per_pair, "aggregate": aggregate}
    with open(args.out, "w") as f:
        json.dump(report, f, indent=1)
    if args.csv:
        import csv

        with open(args.csv, "w", newline="") as f:
            if per_pair:
                writer = csv.DictWriter(f, fieldnames=list(per_pair[0]))
                writer.writeheader()
                for row in per_pair:
                    writer.writerow(row)
    return 0


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    pair_dirs = _pair_dirs(Path(args.data))[: args.limit or None]
    loaded = [(ft.read_features(p / "a.ogff"), ft.read_features(p / "b.ogff"))
              for p in pair_dirs]
    report = {}
    for ratio in (0.5, 1.0):
        stats = PropagationStats()
        forward_pair(model, *loaded[0], keep_ratio=ratio)  # warmup
        t0 = time.perf_counter()
        for fs_a, fs_b in loaded:
            forward_pair(model, fs_a, fs_b, keep_ratio=ratio, stats=stats)
        elapsed = time.perf_counter() - t0
        report[f"keep_{ratio}"] = {
            "mean_ms_per_pair": 1000.0 * elapsed / len(loaded),
            "cross_scored_pairs": stats.cross_scored_pairs,
            "self_scored_pairs": stats.self_scored_pairs,
        }
    report["time_ratio_pruned_vs_dense"] = (
        report["keep_0.5"]["mean_ms_per_pair"] / report["keep_1.0"]["mean_ms_per_pair"])
    report["cross_pair_ratio"] = (
        report["keep_0.5"]["cross_scored_pairs"] / report["keep_1.0"]["cross_scored_pairs"])
    if args.out:
        with open(args.out, "w") as f:
            json.dump(report, f, indent=1)
    print(f"keep 0.5: {report['keep_0.5']['mean_ms_per_pair']:.1f} ms/pair, "
          f"{report['keep_0.5']['cross_scored_pairs']} cross score-pairs")
    print(f"keep 1.0: {report['keep_1.0']['mean_ms_per_pair']:.1f} ms/pair, "
          f"{report['keep_1.0']['cross_scored_pairs']} cross score-pairs")
    print(f"time ratio (0.5 / 1.0): {report['time_ratio_pruned_vs_dense']:.3f}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="matchkit",
                                     description="sparse image matching toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic homography pairs")
    g.add_argument("--kind", choices=["sh"], default="sh")
    g.add_argument("--radius", type=float, required=True,
                   help="corner perturbation bound in px")
    g.add_argument("--pairs", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--crop", type=int, default=240)
    g.add_argument("--source-size", type=int, default=480)
    g.add_argument("--texture", choices=["blobs", "noise", "checker"], default="blobs")
    g.add_argument("--max-keypoints", type=int, default=256)
    g.add_argument("--descriptor-dim", type=int, default=64)
    g.add_argument("--guidance-dim", type=int, default=32)
    g.add_argument("--jobs", type=int, default=1)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a matcher")
    t.add_argument("--config", required=True)
    t.add_argument("--data", help="training pair directory (overrides config)")
    t.add_argument("--out", required=True)
    t.add_argument("--eval-data")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--init-checkpoint")
    t.add_argument("--resume", action="store_true",
                   help="also restore optimizer state from --init-checkpoint")
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("match", help="match one pair or a dataset")
    m.add_argument("--ckpt")
    m.add_argument("--a")
    m.add_argument("--b")
    m.add_argument("--data")
    m.add_argument("--out", required=True)
    m.add_argument("--baseline", choices=["mnn"])
    m.add_argument("--min-confidence", type=float)
    m.add_argument("--keep-ratio", type=float)
    m.add_argument("--jobs", type=int, default=1)
    m.set_defaults(func=cmd_match)

    e = sub.add_parser("eval", help="evaluate predictions against ground truth")
    e.add_argument("--task", choices=["corr", "pose", "pck"], required=True)
    e.add_argument("--pred", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--csv")
    e.add_argument("--ransac-iters", type=int, default=1000)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time matching at keep_ratio 0.5 vs 1.0")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--out")
    b.add_argument("--limit", type=int, default=0)
    b.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, tr.ConfigError, ft.FormatError, EmptyKeypointsError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
