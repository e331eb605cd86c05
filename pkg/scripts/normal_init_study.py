"""Lambertian factored PSNR as a function of the normal start and smoothness weight.

    python3 scripts/normal_init_study.py --scene two_planes --spreads 0 0.26 0.52 0.79 1.57 --weights 0 10
"""
import argparse

from nlosfact.eval import BenchmarkCase, psnr, simulate_case
from nlosfact.recon_factored import FactoredSolverConfig, als_factorize
from nlosfact.recon_linear import admm_linear_solve
from nlosfact.forward import FactoredModel


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scene", default="two_planes")
    ap.add_argument("--n", type=int, default=16)
    ap.add_argument("--spreads", type=float, nargs="+", default=[0.0, 0.26, 0.52, 0.79, 1.5707963267948966])
    ap.add_argument("--weights", type=float, nargs="+", default=[0.0, 10.0])
    args = ap.parse_args()

    truth = simulate_case(BenchmarkCase(args.scene, args.n, lambertian=True))
    g, tau, rho = truth["geometry"], truth["tau"], truth["albedo"]
    print(f"linear baseline: {psnr(admm_linear_solve(FactoredModel.unoccluded(g), tau), rho):.2f} dB")
    print("spread(rad)  weight  factored(dB)")
    for spread in args.spreads:
        for w in args.weights:
            cfg = FactoredSolverConfig(normal_init_spread=spread, normal_smoothness=w)
            est = als_factorize(tau, g, cfg)
            print(f"{spread:11.2f}  {w:6.1f}  {psnr(est.albedo, rho):12.2f}")


if __name__ == "__main__":
    main()
