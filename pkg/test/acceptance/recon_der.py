# test/acceptance/recon_der.py
"""
Label-AE reconstruction DER on a held-out synthetic label set, for every
latent size; k=32 must reach <= 0.5% and k=16 must not beat k=32.

    python -m test.acceptance.recon_der [--train 20000] [--held-out 10000]
"""
import argparse
import sys

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.flowtsvad.label_codec import LATENT_DIMS, BinaryLabelCodec, LabelAEConfig, reconstruction_der, train_label_ae
from src.flowtsvad.simulator import ConversationSpec, derive_rng, simulate_labels

SEED = 0
TRAIN_KEY = 0x7A1
HELD_OUT_KEY = 0x7A2
MAX_DER_32 = 0.5


def label_set(spec: ConversationSpec, segments: int, key: int) -> np.ndarray:
    tracks = [
        simulate_labels(spec, derive_rng(SEED, key, i))[0]
        for i in tqdm(range(segments), desc=f"[recon] labels {key:#x}", dynamic_ncols=True)
    ]
    return np.concatenate(tracks).astype(np.uint8)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--train", type=int, default=20000, help="training segments")
    parser.add_argument("--held-out", type=int, default=10000, help="held-out segments")
    parser.add_argument("--epochs", type=int, default=20)
    parser.add_argument("--out", default=None, help="optional TSV of the results")
    args = parser.parse_args(argv)

    spec = ConversationSpec(seed=SEED)
    train = label_set(spec, args.train, TRAIN_KEY)
    held_out = label_set(spec, args.held_out, HELD_OUT_KEY)

    rows = [{"latent_dim": 200, "codec": "binary", "recon_der": reconstruction_der(BinaryLabelCodec(), held_out)}]
    for k in LATENT_DIMS:
        model, _ = train_label_ae(train, LabelAEConfig(latent_dim=k, epochs=args.epochs, seed=SEED))
        rows.append({"latent_dim": k, "codec": "label-ae", "recon_der": reconstruction_der(model, held_out)})
    table = pd.DataFrame(rows)
    print(table.to_string(index=False, float_format="%.3f"))
    if args.out:
        table.to_csv(args.out, sep="\t", index=False, float_format="%.6f")

    der = {r["latent_dim"]: r["recon_der"] for r in rows if r["codec"] == "label-ae"}
    failures = []
    if der[32] > MAX_DER_32:
        failures.append(f"k=32 reconstruction DER {der[32]:.3f}% > {MAX_DER_32}%")
    if der[16] < der[32]:
        failures.append(f"k=16 ({der[16]:.3f}%) beats k=32 ({der[32]:.3f}%)")
    for f in failures:
        print(f"[recon] FAIL {f}")
    print("[recon] PASS" if not failures else "[recon] FAILED")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
