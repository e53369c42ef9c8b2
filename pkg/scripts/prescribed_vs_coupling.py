"""Tree data: graphical conditioner with the true DAG vs a coupling conditioner.

Both use the monotonic normalizer at reduced network sizes. Prints the test
log-likelihood per seed in standardized and in original data units.

    python scripts/prescribed_vs_coupling.py --seeds 0,1,2 --max-epochs 60
"""

import argparse
import json
import sys

import numpy as np

from graphflow import data, flow, trainer


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--n", type=int, default=10_000)
    ap.add_argument("--max-epochs", type=int, default=60)
    ap.add_argument("--embed-size", type=int, default=10)
    ap.add_argument("--hidden", type=lambda s: [int(t) for t in s.split(",")], default=[50, 50])
    ap.add_argument("--integrand-hidden", type=lambda s: [int(t) for t in s.split(",")], default=[25, 25])
    ap.add_argument("--n-nodes", type=int, default=30)
    args = ap.parse_args(argv)

    means = {}
    for kind in ("graphical", "coupling"):
        lls = []
        for seed in (int(t) for t in args.seeds.split(",")):
            b = data.make_dataset("tree", n=args.n, seed=seed)
            model = flow.build_flow(
                7, kind, "monotonic", topology=b.adjacency if kind == "graphical" else None, rng=seed,
                embed_size=args.embed_size, hidden=args.hidden, integrand_hidden=args.integrand_hidden,
                n_nodes=args.n_nodes,
            )
            model, hist, _ = trainer.train(model, b.train, b.val, trainer.TrainConfig(max_epochs=args.max_epochs, seed=seed))
            ll = trainer.mean_loglik(model, b.test)
            lls.append(ll)
            print(json.dumps({"conditioner": kind, "seed": seed, "epochs": len(hist), "test_loglik": ll,
                              "test_loglik_data_units": ll - float(np.log(b.std).sum())}), flush=True)
        means[kind] = float(np.mean(lls))
    print(json.dumps({"mean_test_loglik": means, "graphical_better": means["graphical"] > means["coupling"]}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
