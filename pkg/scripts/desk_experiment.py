"""Desk-scale experiment: generate data, train Cerberus and Free Cerberus, evaluate both.

    python scripts/desk_experiment.py --root runs/desk

The output layout (data/, cerberus/, free/, each run with timing.json) is the
one the acceptance tests reuse when CERBERUS_ACCEPTANCE_DIR points at --root.
"""

import argparse
import json
import time
from dataclasses import replace
from pathlib import Path

from cerberus.dataset import DatasetConfig, Manifest, generate_dataset
from cerberus.evaluation import GroundTruthOracle, eval_hard, eval_standard
from cerberus.model import Cerberus, EncoderConfig
from cerberus.training import TrainConfig, Trainer, load_model, write_json


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", default="runs/desk")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--centered-parts", action="store_true",
                    help="tie each part's vertex mean to its translation")
    ap.add_argument("--variants", nargs="+", default=["cerberus", "free"], choices=["cerberus", "free"])
    args = ap.parse_args()

    root = Path(args.root)
    manifest = root / "data" / "manifest.json"
    if not manifest.exists():
        generate_dataset(root / "data", DatasetConfig())
    man = Manifest.load(manifest)

    results = {
        "floor_unit_sphere": eval_standard(Cerberus(EncoderConfig(init_radius=1.0), zero=True), man).mean,
        "floor_init_radius": eval_standard(Cerberus(TrainConfig.desk().model, zero=True), man).mean,
        "oracle": eval_standard(GroundTruthOracle(), man).mean,
    }
    for tag in args.variants:
        out = root / tag
        model_cfg = replace(TrainConfig.desk().model, centered_parts=args.centered_parts)
        cfg = TrainConfig.desk(steps=args.steps, seed=args.seed, pose_consistency=tag == "cerberus", model=model_cfg)
        t0 = time.perf_counter()
        Trainer(man, cfg, out).run(verbose=True, log_every=100)
        write_json(out / "timing.json", {"seconds": time.perf_counter() - t0})
        model, _ = load_model(out / "final.ckpt")
        std, hard = eval_standard(model, man, tag=tag), eval_hard(model, man, tag=tag)
        std.write(out, f"eval_standard_{tag}")
        hard.write(out, f"eval_hard_{tag}")
        results[tag] = {"standard": std.mean, "hard": hard.mean, "gap": hard.mean - std.mean,
                        "minutes": (time.perf_counter() - t0) / 60}
        print(std.table())
        print(hard.table())
    write_json(root / "results.json", results)
    print(json.dumps(results, indent=1))


if __name__ == "__main__":
    main()
