"""Prediction error of the diffusion model as a function of the inference-step ratio."""

import numpy as np

from _common import base_parser, dataset, dwm, setup
from dwmlab.dwm import stride_steps
from dwmlab.evalharness import wm_prediction_error, write_table


def main():
    p = base_parser(__doc__, "runs/inference_ratio")
    p.add_argument("--K", type=int, default=5)
    p.add_argument("--ratios", type=float, nargs="+", default=[0.2, 0.4, 0.5, 0.6, 0.8, 1.0])
    p.add_argument("--n-windows", type=int, default=200)
    p.add_argument("--g-eval", type=float, default=0.8)
    args = p.parse_args()
    out = setup(args)
    ds = dataset(args, out)
    rows = []
    for seed in args.seeds:
        model = dwm(ds, args, out, seed, K=args.K)
        for r in args.ratios:
            rep = wm_prediction_error(model, ds, args.g_eval, model.config.T, args.n_windows, seed, r_infer=r)
            rows.append({"r_infer": r, "N": len(stride_steps(args.K, r)), "seed": seed, "eps_s": rep.eps_s,
                         "eps_r": rep.eps_r})
    write_table(out / "inference_ratio.csv", rows, {"args": vars(args)})
    for r in args.ratios:
        sel = [row for row in rows if row["r_infer"] == r]
        print(f"r_infer={r:<4} N={sel[0]['N']}  eps_s={np.mean([x['eps_s'] for x in sel]):.4f}  "
              f"eps_r={np.mean([x['eps_r'] for x in sel]):.5f}")


if __name__ == "__main__":
    main()
