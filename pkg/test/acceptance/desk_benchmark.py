# test/acceptance/desk_benchmark.py
"""
Desk-scale benchmark on the synthetic corpus, desk preset:

  latent   flow-tsvad on Label-AE latents (k=32) vs the same model on raw binary labels
  steps    DER for 1 / 2 / 32 Euler steps
  seeds    15 sampling runs at 2 steps
  ensemble 10 trials of 3-run votes vs their single runs
  baseline discriminative TS-VAD with the same training budget

    python -m test.acceptance.desk_benchmark [--out runs/bench] [--num-segments 2000]
"""
import argparse
import os
import sys
from typing import Dict, List

import numpy as np
import pandas as pd

from src.flowtsvad import pipeline
from src.flowtsvad.config import RunConfig, load_config
from src.flowtsvad.ensemble import vote_files
from src.flowtsvad.scoring import read_rttm
from src.flowtsvad.simulator import derive_rng

SEED = 0
ENSEMBLE_KEY = 0xE45
NUM_RUNS = 15
ENSEMBLE_TRIALS = 10
ENSEMBLE_SIZE = 3
STEP_SWEEP = [1, 2, 32]

LATENT_FACTOR = 3.0
STEP_GAP = 1.0
STEP_SLACK = 0.5
MAX_STD = 1.0
MAX_FROM_MEDIAN = 2.0
BASELINE_SLACK = 2.0


def _config(base: Dict, **overrides) -> RunConfig:
    return load_config(preset="desk", overrides={**base, **overrides})


def train_all(base: Dict, out: str) -> Dict[str, RunConfig]:
    latent = _config(base)
    binary = _config(base, binary_space=True, latent_dim=200, checkpoint=os.path.join(out, "flow_binary.ckpt"))
    pipeline.simulate_dataset(latent)
    pipeline.train_label_ae_from_dataset(latent)
    pipeline.train_tsvad_from_dataset(latent, "flow-tsvad")
    pipeline.train_tsvad_from_dataset(binary, "flow-tsvad")
    pipeline.train_tsvad_from_dataset(latent, "baseline")
    return {"latent": latent, "binary": binary}


def ensemble_trials(config: RunConfig, infer_dir: str, summary: pd.DataFrame) -> List[dict]:
    references = read_rttm(os.path.join(infer_dir, "reference.rttm"))
    seeds = summary["seed"].tolist()
    runs = {s: read_rttm(os.path.join(infer_dir, f"steps2_seed{s}.rttm")) for s in seeds}
    der = dict(zip(summary["seed"], summary["der"]))
    rows = []
    for trial in range(ENSEMBLE_TRIALS):
        pick = sorted(derive_rng(SEED, ENSEMBLE_KEY, trial).choice(seeds, ENSEMBLE_SIZE, replace=False).tolist())
        combined = vote_files([runs[s] for s in pick], config.frame_resolution, config.workers)
        rows.append({
            "trial": trial,
            "seeds": ",".join(str(s) for s in pick),
            "single_der": float(np.mean([der[s] for s in pick])),
            "ensemble_der": pipeline.evaluate(references, combined, config).der,
        })
    return rows


def main(argv=None) -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="runs/bench")
    parser.add_argument("--num-segments", type=int, default=None)
    parser.add_argument("--workers", type=int, default=4)
    parser.add_argument("--skip-train", action="store_true", help="reuse checkpoints already in --out")
    args = parser.parse_args(argv)

    base = {"output_dir": args.out, "force": True, "workers": args.workers, "seed": SEED}
    if args.num_segments is not None:
        base["num_segments"] = args.num_segments
    if args.skip_train:
        configs = {
            "latent": _config(base),
            "binary": _config(base, binary_space=True, latent_dim=200,
                              checkpoint=os.path.join(args.out, "flow_binary.ckpt")),
        }
    else:
        configs = train_all(base, args.out)
    latent = configs["latent"]

    def d(name: str) -> str:
        return os.path.join(args.out, "bench", name)

    steps = pipeline.infer_dataset(_config(base, infer_steps=STEP_SWEEP, infer_seeds=[SEED]), d("steps"))
    seeds = pipeline.infer_dataset(_config(base, infer_steps=[2], infer_runs=NUM_RUNS), d("seeds"))
    binary = pipeline.infer_dataset(
        _config(base, binary_space=True, latent_dim=200, infer_steps=[2], infer_seeds=[SEED],
                checkpoint=configs["binary"].checkpoint),
        d("binary"),
    )
    baseline = pipeline.infer_dataset(latent, d("baseline"), checkpoint_path=latent.path("baseline"))
    trials = pd.DataFrame(ensemble_trials(latent, d("seeds"), seeds))
    pipeline.write_table(trials.to_dict("records"), d("ensemble.tsv"))

    by_steps = dict(zip(steps["steps"], steps["der"]))
    der_latent = by_steps[2]
    der_binary = float(binary["der"].iloc[0])
    der_baseline = float(baseline["der"].iloc[0])
    runs = seeds["der"].to_numpy()
    median = float(np.median(runs))

    results = pd.DataFrame([
        {"check": "latent vs binary", "value": der_binary / max(der_latent, 1e-9), "bar": f">= {LATENT_FACTOR}"},
        {"check": "|DER(2) - DER(32)|", "value": abs(by_steps[2] - by_steps[32]), "bar": f"<= {STEP_GAP}"},
        {"check": "DER(1) - DER(2)", "value": by_steps[1] - by_steps[2], "bar": f">= -{STEP_SLACK}"},
        {"check": "seed std", "value": float(runs.std()), "bar": f"<= {MAX_STD}"},
        {"check": "max |run - median|", "value": float(np.abs(runs - median).max()), "bar": f"<= {MAX_FROM_MEDIAN}"},
        {"check": "ensemble - single", "value": trials["ensemble_der"].mean() - trials["single_der"].mean(),
         "bar": "<= 0"},
        {"check": "flow - baseline", "value": der_latent - der_baseline, "bar": f"<= {BASELINE_SLACK}"},
    ])
    passed = [
        der_binary >= LATENT_FACTOR * der_latent,
        abs(by_steps[2] - by_steps[32]) <= STEP_GAP,
        by_steps[1] >= by_steps[2] - STEP_SLACK,
        runs.std() <= MAX_STD,
        np.abs(runs - median).max() <= MAX_FROM_MEDIAN,
        trials["ensemble_der"].mean() <= trials["single_der"].mean(),
        der_latent <= der_baseline + BASELINE_SLACK,
    ]
    results["pass"] = passed
    print(f"[bench] DER latent {der_latent:.2f}% binary {der_binary:.2f}% baseline {der_baseline:.2f}%")
    print(results.to_string(index=False, float_format="%.3f"))
    pipeline.write_table(results.to_dict("records"), d("results.tsv"))
    return 0 if all(passed) else 1


if __name__ == "__main__":
    sys.exit(main())
