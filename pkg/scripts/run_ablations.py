"""Ablation study on the synthetic task: pooling mode and affordance integration.

Trains each configuration over several seeds and prints the per-seed and
mean Top-5 mAP table (noun and All modes). Mirrors the directional checks
in the acceptance suite.

Usage: python scripts/run_ablations.py [--seeds 3] [--steps 300] [--jobs 2]
"""

import argparse
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from stakit.harness import RunConfig, build_affordance_db, evaluate_model, train
from stakit.records import Taxonomy
from stakit.synthetic import SynthConfig, synth_dataset

CONFIGS = (
    ("mean pooling", {"temporal_pooling": "mean"}),
    ("attention pooling", {"temporal_pooling": "attention"}),
    ("single-head pooling", {"temporal_pooling": "attention", "pooling_heads": 1, "per_scale_pooling": False}),
    ("dual attention", {"temporal_pooling": "attention", "dual_attention": True}),
    ("learned affordance", {"temporal_pooling": "attention", "affordance": "learned"}),
)


def run_one(args):
    name, overrides, seed, steps = args
    train_pairs = synth_dataset(SynthConfig(), 0)
    heldout = synth_dataset(SynthConfig(n_samples=48), 1)
    cfg = RunConfig(seed=seed, steps=steps, **overrides)
    db = None
    if cfg.affordance == "learned":
        db = build_affordance_db(train_pairs, Taxonomy.generic(cfg.n_nouns, cfg.n_verbs), p_link=0.98)
    result = train(train_pairs, cfg, affordance_db=db)
    scores = evaluate_model(result.model, heldout, cfg)
    return name, seed, scores


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=3)
    parser.add_argument("--steps", type=int, default=300)
    parser.add_argument("--jobs", type=int, default=2)
    parser.add_argument("--configs", nargs="*", default=None, help="subset of config names to run")
    args = parser.parse_args()

    selected = [
        (name, overrides)
        for name, overrides in CONFIGS
        if args.configs is None or name in args.configs
    ]
    jobs = [
        (name, overrides, seed, args.steps)
        for name, overrides in selected
        for seed in range(args.seeds)
    ]
    with ProcessPoolExecutor(max_workers=args.jobs) as pool:
        rows = list(pool.map(run_one, jobs))

    by_config: dict[str, list[dict]] = {}
    for name, seed, scores in rows:
        print(f"{name:22s} seed {seed}: noun {scores['noun']:.4f}  all {scores['all']:.4f}")
        by_config.setdefault(name, []).append(scores)
    print()
    print(f"{'config':22s} {'noun mAP':>10s} {'All mAP':>10s}  (mean over {args.seeds} seeds)")
    for name, scores in by_config.items():
        noun = float(np.mean([s["noun"] for s in scores]))
        alls = float(np.mean([s["all"] for s in scores]))
        print(f"{name:22s} {noun:10.4f} {alls:10.4f}")


if __name__ == "__main__":
    main()
