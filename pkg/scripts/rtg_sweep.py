"""Diffusion-model error and agent return across evaluation RTG values, including out-of-distribution ones."""

import json

import numpy as np

from _common import base_parser, dataset, dwm, setup
from dwmlab.agents import AgentConfig
from dwmlab.evalharness import rtg_deciles, rtg_sweep, write_table


def main():
    p = base_parser(__doc__, "runs/rtg_sweep")
    p.add_argument("--g-eval", type=float, nargs="+", default=[0.4, 0.6, 0.8, 1.0, 1.1, 1.3])
    p.add_argument("--algo", default="td3bc", choices=("td3bc", "iql", "pql"))
    p.add_argument("--H", type=int, default=5)
    p.add_argument("--agent-iters", type=int, default=5_000)
    p.add_argument("--no-agents", action="store_true", help="only measure prediction error")
    p.add_argument("--n-windows", type=int, default=200)
    args = p.parse_args()
    out = setup(args)
    ds = dataset(args, out)
    print("dataset RTG deciles:", json.dumps(rtg_deciles(ds)))
    cfg = AgentConfig(algo=args.algo, H=args.H, iters=args.agent_iters, eval_every=args.agent_iters, eval_episodes=20)
    rows = []
    for seed in args.seeds:
        rows += rtg_sweep(ds, cfg, args.g_eval, dwm(ds, args, out, seed), [seed], cell_root=out / "cells",
                          n_windows=args.n_windows, train_agents=not args.no_agents)
    write_table(out / "rtg_sweep.csv", rows, {"args": vars(args), "dataset_rtg_deciles": rtg_deciles(ds)})
    for g in args.g_eval:
        sel = [r for r in rows if r["g_eval"] == g]
        ret = [r["eval_norm_mean"] for r in sel if "eval_norm_mean" in r]
        ret_s = f"  return {np.mean(ret):.3f}" if ret else ""
        print(f"g_eval={g:<4}  eps_s={np.mean([r['eps_s'] for r in sel]):.4f}{ret_s}")


if __name__ == "__main__":
    main()
