"""Six sampled units, two recipients: donors, fractions, replicate adjustment.

Prints the donor assignment, the adjusted replicate fractions under a
delete-one jackknife, and both sides of the donor-set sum-of-squares
condition, then the naive and adjusted variance of the imputed total.
"""

import numpy as np

from fracnn.estimators import format_report, linear_total, replicate_imputation
from fracnn.impute import impute_item
from fracnn.mclab import SIX_UNIT_METRIC, oracle_condition_check, six_unit_scenario, small_frame_replication


def main():
    f = six_unit_scenario()
    a = impute_item(f, 0, SIX_UNIT_METRIC, m1=2, m2=2)
    print("recipient -> donors (fractions)")
    for r, j in enumerate(a.recipients):
        donors = f.person_id[a.donors[r]].tolist()
        print(f"  {f.person_id[j]} -> {donors} {a.w1[r].tolist()}")

    _, reps, rf = small_frame_replication(f, SIX_UNIT_METRIC, 2, 2, "delete1")
    print("\nadjusted replicate fractions (rows: replicate, recipient)")
    for k in range(reps.n_replicates):
        fr = rf.fractions(k)
        print(f"  delete {k + 1}: " + "  ".join(np.array2string(row, precision=4) for row in fr))

    o = oracle_condition_check(f, rf, reps)
    print("\ndonor  sum of squares  target")
    for i in np.flatnonzero(f.response[:, 0]):
        print(f"  {f.person_id[i]}    {o.S[i]:12.4f}  {o.target[i]:8.4f}")
    print(f"largest relative donor-set residual: {o.max_relative:.1e}")

    res = replicate_imputation(f, [a], reps, mode="single")
    print()
    print(format_report([linear_total(res)], "text"))


if __name__ == "__main__":
    main()
