"""Per-step prediction error of the diffusion and recursive one-step models.

Both models are conditioned on the true (s_t, a_t) of held windows; the one-step
model is rolled forward with the logged actions. Writes per-step medians and
means for every seed, and prints the step-7 / step-1 ratio.
"""

import numpy as np

from _common import base_parser, dataset, dwm, onestep, setup
from dwmlab.evalharness import wm_prediction_error, write_table


def main():
    p = base_parser(__doc__.splitlines()[0], "runs/compounding_error")
    p.add_argument("--T", type=int, default=8)
    p.add_argument("--n-windows", type=int, default=200)
    p.add_argument("--g-eval", type=float, default=0.8)
    p.add_argument("--r-infer", type=float, default=0.5)
    args = p.parse_args()
    out = setup(args)
    ds = dataset(args, out)
    rows, med = [], {"onestep": [], "dwm": []}
    for seed in args.seeds:
        models = {"onestep": (onestep(ds, args, out, seed), None, None),
                  "dwm": (dwm(ds, args, out, seed, T=args.T), args.g_eval, args.r_infer)}
        for tag, (model, g, r) in models.items():
            rep = wm_prediction_error(model, ds, g, args.T, args.n_windows, seed, r_infer=r, tag=tag)
            med[tag].append(rep.state_median)
            for h in range(args.T - 1):
                rows.append({"model": tag, "seed": seed, "step": h + 1, "state_median": rep.state_median[h],
                             "state_mean": rep.state_mse[h]})
    write_table(out / "compounding_error.csv", rows, {"args": vars(args)})
    for tag, runs in med.items():
        m = np.median(runs, axis=0)
        print(f"{tag:8s} median state error by step: {np.array2string(m, precision=5)}  "
              f"step{args.T - 1}/step1 = {m[-1] / m[0]:.1f}x")


if __name__ == "__main__":
    main()
