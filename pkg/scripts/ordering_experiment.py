"""Train variants on a synthetic preset over several seeds and report test EER.

    python scripts/ordering_experiment.py --preset hard --seeds 0 1 2
"""

import argparse
import tempfile
from pathlib import Path

from sysdirect.experiments import attention_localization, make_corpus, ordering, run_variant
from sysdirect.models import VARIANTS, has_attention


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--preset", default="hard", choices=("easy", "hard"))
    ap.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=VARIANTS)
    ap.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--localize", action="store_true", help="also report attention localization (burst presets)")
    ap.add_argument("--workdir", type=Path, default=None, help="keep generated corpora here")
    args = ap.parse_args()

    results = []
    with tempfile.TemporaryDirectory() as tmp:
        root = args.workdir or Path(tmp)
        for seed in args.seeds:
            corpus = make_corpus(args.preset, root / f"{args.preset}-{seed}", seed=seed)
            for variant in args.variants:
                r = run_variant(corpus, variant, seed, args.epochs)
                results.append(r)
                line = (f"seed={seed} {variant:<17} epochs={r.epochs:2d} train_acc={r.best_train_acc:.3f} "
                        f"eer={100 * r.eer:6.2f}% ({r.seconds:.0f}s)")
                if args.localize and has_attention(variant):
                    line += f" localization={attention_localization(r.model, corpus):.3f}"
                print(line, flush=True)
    print("\nseed-averaged EER")
    for variant, mean in ordering(results).items():
        print(f"  {variant:<17} {100 * mean:6.2f}%")


if __name__ == "__main__":
    main()
