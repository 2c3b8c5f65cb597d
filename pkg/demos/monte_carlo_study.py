"""Small Monte Carlo study of naive and adjusted replicate variances.

Runs a reduced version of the unbiasedness and domain studies so it
finishes in about a minute; pass a replication count to go larger.
"""

import sys

from fracnn.mclab import ScenarioConfig, run_monte_carlo


def summarize(label, s):
    rb, se = s.relative_bias("adjusted")
    rbn, sen = s.relative_bias("naive")
    print(f"{label:<22} MC var {s.mc_variance:.4g}  adjusted bias {rb:+.1%} ({se:.1%})  "
          f"naive bias {rbn:+.1%} ({sen:.1%})  std SE {s.std_se:.1f}  coverage {s.coverage:.3f}")


def main(R=200):
    rep = run_monte_carlo(ScenarioConfig(seed=7), R, estimators=("total", "median"))
    summarize("total, MCAR 30%", rep["total"])
    summarize("median, MCAR 30%", rep["median"])

    print("\nout-of-domain donors and the domain-total variance inflation")
    for share in (0.1, 0.4, 0.7):
        rep = run_monte_carlo(ScenarioConfig(county_probs=(1 - share, share), seed=7), R // 2, estimators=("domain_total",))
        print(f"  second-county share {share:.1f}: out-of-domain donors "
              f"{rep.diagnostics['out_of_domain']:.2f}, std SE {rep['domain_total'].std_se:.1f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 200)
