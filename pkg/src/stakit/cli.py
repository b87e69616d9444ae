"""Command-line interface.

Subcommands: synth, curate-epic, train, eval, aff-build, aff-query,
reweight, dump-attn. The environment variable ``STA_OUTPUT_DIR``, when
set, overrides the directory of every output path given as a bare file
name.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation, harness
from .affordance import knn_affordance, load_db, save_db
from .epic import curate_epic, source_from_json
from .hotspot import load_hotspot, save_pgm
from .records import (
    Taxonomy,
    read_manifest,
    read_predictions,
    write_manifest,
    write_predictions,
)
from .synthetic import SynthConfig, clip_signature, synth_dataset, write_synth_dataset


def _out_path(path: str) -> Path:
    base = os.environ.get("STA_OUTPUT_DIR")
    p = Path(path)
    if base and p.parent == Path("."):
        return Path(base) / p
    return p


def _cmd_synth(args: argparse.Namespace) -> int:
    cfg = SynthConfig(
        image_size=args.image_size,
        clip_len=args.clip_len,
        fps=args.fps,
        n_nouns=args.nouns,
        n_verbs=args.verbs,
        n_environments=args.environments,
        n_samples=args.samples,
    )
    pairs = synth_dataset(cfg, args.seed)
    taxonomy = Taxonomy.generic(cfg.n_nouns, cfg.n_verbs)
    manifest = write_synth_dataset(_out_path(args.out), pairs, taxonomy)
    print(f"wrote {len(pairs)} records to {manifest}")
    return 0


def _cmd_curate_epic(args: argparse.Namespace) -> int:
    src = source_from_json(args.src)
    result = curate_epic(src, gap_frames=args.gap_frames, fps=args.fps)
    taxonomy = Taxonomy.epic_curated()
    write_manifest(_out_path(args.out), result.records, taxonomy)
    report = result.report
    print(
        f"curated {report.n_records} records from {report.n_tracks} tracks "
        f"({report.n_tracks_dropped_ambiguous} ambiguous, "
        f"{report.n_tracks_dropped_unmatched} unmatched, "
        f"{report.n_frames_dropped_overlap} overlapping frames dropped)"
    )
    return 0


def _load_dataset(manifest_path: Path):
    records, _header = read_manifest(manifest_path)
    dataset = []
    for record in records:
        if record.clip_path is None:
            raise SystemExit(f"record {record.record_id} has no clip_path")
        clip = np.load(manifest_path.parent / record.clip_path)
        dataset.append((clip, record))
    return dataset


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = harness.RunConfig.from_json(Path(args.config).read_text()) if args.config else harness.RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    cfg.validate()
    dataset = _load_dataset(Path(args.data))
    db = load_db(cfg.affordance_db) if cfg.affordance != "off" and cfg.affordance_db else None
    result = harness.train(dataset, cfg, affordance_db=db)
    out = _out_path(args.out)
    harness.save_checkpoint(result.model, cfg, out)
    print(f"trained {cfg.steps} steps: loss {result.loss_curve[0]:.4f} -> {result.loss_curve[-1]:.4f}")
    print(f"checkpoint written to {out}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    report = evaluation.evaluate_run(
        args.pred,
        args.gt,
        iou_threshold=args.iou,
        ttc_tolerance=args.ttc_tol,
        top_k=args.topk,
    )
    if args.report:
        _out_path(args.report).write_text(report.to_json())
    for name in ("noun", "noun_verb", "noun_ttc", "all"):
        value = report.map_scores[name]
        print(f"map/{name}: {'n/a' if value is None else f'{value:.4f}'}")
    for name, value in report.ap_scores.items():
        print(f"ap/{name}: {'n/a' if value is None else f'{value:.4f}'}")
    return 0


def _cmd_aff_build(args: argparse.Namespace) -> int:
    manifest_path = Path(args.data)
    dataset = _load_dataset(manifest_path)
    _records, header = read_manifest(manifest_path)
    taxonomy = Taxonomy.generic(header["n_nouns"], header["n_verbs"])
    db = harness.build_affordance_db(
        dataset,
        taxonomy,
        p_link=args.p_link,
        temporal_gap=args.temporal_gap,
        inlier_threshold=args.inlier_thresh,
    )
    save_db(db, _out_path(args.out))
    print(f"built {db.n_zones} zones from {len(dataset)} clips -> {args.out}")
    return 0


def _cmd_aff_query(args: argparse.Namespace) -> int:
    db = load_db(args.db)
    clip = np.load(args.clip)
    dist = knn_affordance(clip_signature(clip), db, args.k)
    noun_order = np.argsort(-dist.noun_probs)[: args.top]
    verb_order = np.argsort(-dist.verb_probs)[: args.top]
    print("neighbors:", ", ".join(f"zone {zid} (sim {sim:.3f})" for zid, sim in dist.neighbors))
    for idx in noun_order:
        print(f"noun {db.taxonomy.noun_names[idx]}: {dist.noun_probs[idx]:.4f}")
    for idx in verb_order:
        print(f"verb {db.taxonomy.verb_names[idx]}: {dist.verb_probs[idx]:.4f}")
    return 0


def _cmd_reweight(args: argparse.Namespace) -> int:
    from .hotspot import reweight

    preds, header = read_predictions(args.pred)
    hotspot = load_hotspot(args.map, mode=args.mode)
    taxonomy = Taxonomy.generic(header["n_nouns"], header["n_verbs"])
    out = {record_id: reweight(plist, hotspot) for record_id, plist in preds.items()}
    write_predictions(_out_path(args.out), out, taxonomy)
    print(f"re-weighted {sum(len(v) for v in out.values())} predictions -> {args.out}")
    return 0


def _cmd_dump_attn(args: argparse.Namespace) -> int:
    import torch

    model, cfg = harness.load_checkpoint(args.ckpt)
    clip = torch.as_tensor(np.load(args.clip), dtype=torch.float32)
    video = model.video_encoder(clip)
    pooler = model.pooling.poolers[0] if len(model.pooling.poolers) else None
    if pooler is None:
        raise SystemExit("checkpoint uses mean pooling; no attention maps to dump")
    _, weights = pooler(video, return_attn=True)
    out_dir = _out_path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights_np = weights.detach().numpy()  # [heads, Nq, Nk]
    head_mean = weights_np.mean(axis=0)
    query = args.query if args.query is not None else head_mean.shape[0] // 2
    row = head_mean[query]  # [t * N]
    t = video.t
    for frame in range(t):
        frame_map = row[frame * video.h_tok * video.w_tok : (frame + 1) * video.h_tok * video.w_tok]
        save_pgm(out_dir / f"pool_q{query:03d}_frame{frame}.pgm", frame_map.reshape(video.h_tok, video.w_tok))
    sidecar = {
        "query_index": int(query),
        "n_heads": int(weights_np.shape[0]),
        "keys_per_frame": video.h_tok * video.w_tok,
        "frames": t,
        "weights": {str(query): row.tolist()},
    }
    n_maps = t
    if model.dual is not None:
        image_scales = model.image_encoder(clip[-1])
        p3d = model.pooling(video, image_scales)
        _, _, dual_attn = model.dual(image_scales.scales[0], p3d.scales[0], return_attn=True)
        grid = image_scales.scales[0]
        for name, table in dual_attn.items():
            mean_row = table.detach().numpy().mean(axis=0)[query][:-1]  # drop the class slot
            save_pgm(out_dir / f"dual_{name}_q{query:03d}.pgm", mean_row.reshape(grid.h_tok, grid.w_tok))
            sidecar.setdefault("dual", {})[name] = mean_row.tolist()
            n_maps += 1
    (out_dir / "attention.json").write_text(json.dumps(sidecar, indent=2))
    print(f"wrote {n_maps} attention maps for query {query} to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stakit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--nouns", type=int, default=4)
    p.add_argument("--verbs", type=int, default=3)
    p.add_argument("--environments", type=int, default=2)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--clip-len", type=int, default=4)
    p.add_argument("--fps", type=float, default=2.0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("curate-epic", help="curate anticipation labels from source annotations")
    p.add_argument("--src", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--gap-frames", type=int, default=30)
    p.set_defaults(func=_cmd_curate_epic)

    p = sub.add_parser("train", help="train a model on a manifest dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a prediction dump against a manifest")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--ttc-tol", type=float, default=0.25)
    p.add_argument("--topk", type=int, default=5)
    p.add_argument("--report", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("aff-build", help="build an affordance zone database")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--p-link", type=float, default=0.98)
    p.add_argument("--temporal-gap", type=int, default=1)
    p.add_argument("--inlier-thresh", type=int, default=10)
    p.set_defaults(func=_cmd_aff_build)

    p = sub.add_parser("aff-query", help="query a zone database with a clip")
    p.add_argument("--db", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--top", type=int, default=5)
    p.set_defaults(func=_cmd_aff_query)

    p = sub.add_parser("reweight", help="re-weight prediction scores with a hotspot map")
    p.add_argument("--pred", required=True)
    p.add_argument("--map", required=True)
    p.add_argument("--mode", default="per_pixel", choices=["per_pixel", "probability"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_reweight)

    p = sub.add_parser("dump-attn", help="dump temporal-pooling attention maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--query", type=int, default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_dump_attn)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
