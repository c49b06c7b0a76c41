"""Offline agents trained on imagined rollouts of increasing horizon.

Trains one agent per (world model, H, seed) and reports the final normalised
return. Cells are persisted under --out/cells and reused on rerun; set
DWMLAB_THREADS to run cells in parallel.
"""

import numpy as np

from _common import base_parser, dataset, dwm, onestep, setup
from dwmlab.agents import AgentConfig
from dwmlab.evalharness import horizon_sweep, write_table


def main():
    p = base_parser(__doc__.splitlines()[0], "runs/horizon_sweep")
    p.add_argument("--algo", default="td3bc", choices=("td3bc", "iql", "pql"))
    p.add_argument("--H", type=int, nargs="+", default=[1, 3, 5, 7])
    p.add_argument("--models", nargs="+", default=["onestep", "dwm"], choices=("onestep", "dwm"))
    p.add_argument("--agent-iters", type=int, default=5_000)
    p.add_argument("--g-eval", type=float, default=1.0)
    p.add_argument("--eval-episodes", type=int, default=20)
    args = p.parse_args()
    out = setup(args)
    ds = dataset(args, out)
    cfg = AgentConfig(algo=args.algo, iters=args.agent_iters, eval_every=args.agent_iters,
                      eval_episodes=args.eval_episodes, g_eval=[args.g_eval])
    rows = []
    for seed in args.seeds:
        models = {}
        if "onestep" in args.models:
            models["onestep"] = onestep(ds, args, out, seed)
        if "dwm" in args.models:
            models["dwm"] = dwm(ds, args, out, seed)
        rows += horizon_sweep(ds, cfg, args.H, models, [seed], cell_root=out / "cells")
    write_table(out / f"horizon_{args.algo}.csv", rows, {"args": vars(args)})
    for tag in args.models:
        line = "  ".join(f"H={H}: {np.median([r['eval_norm_mean'] for r in rows if r['model'] == tag and r['H'] == H]):.3f}"
                         for H in args.H)
        print(f"{tag:8s} {args.algo} median normalised return  {line}")


if __name__ == "__main__":
    main()
