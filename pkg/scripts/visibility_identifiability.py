"""How well can visibility be recovered from data at all, for a two-plane layout?

With the true albedo fixed, V enters the data linearly. For each sample,
voxels at the same distance land in the same time bins, so only their
flux-weighted sum is observed. Replacing every such group by its mean is
therefore as good as any data-driven estimate can hope to do on average; this
script prints that bound next to the projected-gradient estimate.

    python3 scripts/visibility_identifiability.py --front -0.1 -0.1 0.35 0.1 --rear 0.6 0.8
"""
import argparse

import numpy as np

from nlosfact.core import ScanGeometry, VisibilityField
from nlosfact.eval import _patch
from nlosfact.forward import FactoredModel, Scene, forward_transient, ground_truth_visibility, path_table
from nlosfact.forward import rasterize_scene
from nlosfact.recon_factored import update_visibility


def group_average_bound(geometry, rho, vis, rear):
    d = path_table(geometry).distance
    occ = np.flatnonzero(rho.flat)
    err = []
    for i in range(geometry.n_samples):
        key = np.round(d[i, occ], 12)
        est = vis.data[i].copy()
        sub = est[occ]
        for k in np.unique(key):
            m = key == k
            sub[m] = sub[m].mean()
        est[occ] = sub
        err.append(np.abs(est[rear] - vis.data[i, rear]))
    return float(np.concatenate(err).mean())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=8)
    ap.add_argument("--front", type=float, nargs=4, default=[-0.1, -0.1, 0.35, 0.1],
                    metavar=("CX", "CY", "SIZE", "DEPTH"), help="fractions of wall extent / volume depth")
    ap.add_argument("--rear", type=float, nargs=2, default=[0.6, 0.8], metavar=("SIZE", "DEPTH"))
    ap.add_argument("--steps", type=int, nargs="+", default=[10, 50, 200])
    args = ap.parse_args()

    g = ScanGeometry.desk(args.n)
    cx, cy, fs, fd = args.front
    rs, rd = args.rear
    rho, _ = rasterize_scene(Scene([_patch(g, (cx, cy), (fs, fs), fd), _patch(g, (0, 0), (rs, rs), rd)]), g)
    vis = ground_truth_visibility(rho, g)
    tau = forward_transient(FactoredModel(g, vis), rho)
    zs = np.unique(np.nonzero(rho.data)[2])
    rear = np.zeros(g.voxel_grid, bool)
    rear[:, :, zs.max()] = rho.data[:, :, zs.max()] > 0
    rear = rear.ravel()

    print(f"rear-plane MAE at V=1:        {np.abs(1 - vis.data[:, rear]).mean():.3f}")
    print(f"group-average bound:          {group_average_bound(g, rho, vis, rear):.3f}")
    for k in args.steps:
        est = update_visibility(tau, rho, None, VisibilityField.ones(g), steps=k)
        print(f"projected gradient, {k:4d} steps: {np.abs(est.data[:, rear] - vis.data[:, rear]).mean():.3f}")


if __name__ == "__main__":
    main()
