"""Grouped-jackknife replicates and bias-correcting replicate fractional weights.

Replicate ``k`` deletes (down-weights) PSU ``k``. Under nearest-neighbor
fractional imputation the naive replicates, which keep the point fractions
fixed, understate the imputation variance of every donor. The deficit of a
donor ``i``,

    T_i = alpha_i1**2 - alpha_i1 - phi_i1,

is made up in the replicate that deletes the donor's PSU by moving a share
``b`` of the donor's point fraction to the recipient's other variance donors
outside that PSU. ``b`` solves a quadratic so that the change in the sum of
squares of all affected donor weights equals the deficit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .core import Frame, SampleDesign
from .impute import DonorAssignment

MODES = ("single", "grouped", "individual")

FLAG_NONE, FLAG_NEGATIVE_DISCRIMINANT, FLAG_UNADJUSTABLE = 0, 1, 2
FLAG_NAMES = {FLAG_NONE: "", FLAG_NEGATIVE_DISCRIMINANT: "negative_discriminant", FLAG_UNADJUSTABLE: "unadjustable"}


# -- groups and replicate factors ------------------------------------------


@dataclass
class VarianceGroups:
    """Variance stratum and jackknife group of every person.

    PSU ``h * G + g`` is deleted by replicate ``h * G + g``.
    """

    var_stratum: np.ndarray
    group: np.ndarray
    n_strata: int
    n_groups: int

    @property
    def psu(self) -> np.ndarray:
        return self.var_stratum * self.n_groups + self.group

    @property
    def n_replicates(self) -> int:
        return self.n_strata * self.n_groups


def _serpentine_groups(m: int, g: int) -> np.ndarray:
    """Group labels for m households in id order.

    The first ceil(m/2) households keep ascending order, the rest are
    appended in descending order, and groups are dealt out systematically
    along that arrangement.
    """
    half = (m + 1) // 2
    arranged = np.concatenate([np.arange(half), np.arange(m - 1, half - 1, -1)])
    labels = np.empty(m, dtype=np.int64)
    labels[arranged] = np.arange(m) % g
    return labels


def build_variance_groups(frame: Frame, design: SampleDesign) -> VarianceGroups:
    """Form H variance strata and G groups per stratum within each weighting area.

    Households are sorted by ``household_id``; consecutive blocks of nearly
    equal size form the variance strata (larger blocks first). All persons
    of a household share its stratum and group.
    """
    H, G = design.variance_strata, design.groups_per_stratum
    hh_ids, hh_idx = np.unique(np.stack([frame.area_id, frame.household_id], axis=1), axis=0, return_inverse=True)
    hh_idx = hh_idx.ravel()
    hh_stratum = np.empty(hh_ids.shape[0], dtype=np.int64)
    hh_group = np.empty(hh_ids.shape[0], dtype=np.int64)
    for area in np.unique(hh_ids[:, 0]):
        rows = np.flatnonzero(hh_ids[:, 0] == area)  # already in household_id order
        if rows.size < H * G:
            raise ValueError(
                f"weighting area {area} has {rows.size} households, fewer than H*G = {H * G}; use fewer variance strata"
            )
        for h, block in enumerate(np.array_split(rows, H)):
            hh_stratum[block] = h
            hh_group[block] = _serpentine_groups(block.size, G)
    return VarianceGroups(hh_stratum[hh_idx], hh_group[hh_idx], H, G)


def delta_factor(w0: np.ndarray, n_groups: int = 2) -> np.ndarray:
    """Deleted-group replication factor; G = 2 gives 1 - sqrt((1 - 1/w0) / 2)."""
    w0 = np.asarray(w0, dtype=np.float64)
    if np.any(w0 < 1):
        raise ValueError("initial weights below 1 leave the replication factor undefined")
    return 1.0 - np.sqrt((1.0 - 1.0 / w0) * (n_groups - 1) / n_groups)


@dataclass
class ReplicateWeightSet:
    """Replicate weights ``weights[:, k]`` with variance factors ``c[k]``.

    ``psu[i]`` is the PSU of person i; replicate k deletes PSU k.
    ``groups``/``delta`` are kept for the grouped scheme so factor columns
    can be regenerated without storing the dense factor matrix.
    """

    c: np.ndarray
    psu: np.ndarray
    weights: np.ndarray | None = None
    groups: VarianceGroups | None = None
    delta: np.ndarray | None = None
    raked: bool = False

    @property
    def n_replicates(self) -> int:
        return self.c.shape[0]

    def factor_columns(self, cols=None) -> np.ndarray:
        """Dense F[:, cols] for the grouped scheme."""
        if self.groups is None:
            raise ValueError("no grouped factors on this replicate set")
        g = self.groups
        cols = np.arange(self.n_replicates) if cols is None else np.asarray(cols)
        h_k, g_k = np.divmod(cols, g.n_groups)
        same = g.var_stratum[:, None] == h_k[None, :]
        deleted = same & (g.group[:, None] == g_k[None, :])
        keep = 1.0 + (1.0 - self.delta) / (g.n_groups - 1)
        F = np.ones((g.var_stratum.shape[0], cols.shape[0]))
        F = np.where(same, keep[:, None], F)
        return np.where(deleted, self.delta[:, None], F)

    def factors(self) -> np.ndarray:
        return self.factor_columns()

    def apply(self, w: np.ndarray, chunk: int = 20) -> "ReplicateWeightSet":
        """Replicate weights F_i^(k) * w_i (before any raking)."""
        w = np.asarray(w, dtype=np.float64)
        L = self.n_replicates
        W = np.empty((w.shape[0], L))
        for s in range(0, L, chunk):
            cols = np.arange(s, min(s + chunk, L))
            W[:, cols] = self.factor_columns(cols) * w[:, None]
        return ReplicateWeightSet(self.c, self.psu, W, self.groups, self.delta, False)


def replicate_factors(groups: VarianceGroups, w0: np.ndarray) -> ReplicateWeightSet:
    """Grouped-jackknife factors: 1 off-stratum, delta_i deleted, 2 - delta_i retained.

    With these factors c_k = 1.
    """
    delta = delta_factor(w0, groups.n_groups)
    return ReplicateWeightSet(
        c=np.ones(groups.n_replicates), psu=groups.psu, groups=groups, delta=delta
    )


def delete_one_replicates(w: np.ndarray) -> ReplicateWeightSet:
    """Delete-one jackknife: unit k removed, others scaled by n/(n-1), c_k = (n-1)/n."""
    w = np.asarray(w, dtype=np.float64)
    n = w.shape[0]
    W = np.repeat(w[:, None] * n / (n - 1), n, axis=1)
    W[np.arange(n), np.arange(n)] = 0.0
    return ReplicateWeightSet(c=np.full(n, (n - 1) / n), psu=np.arange(n), weights=W)


def jackknife_variance(estimates, reference=None, c=None, center: str = "reference") -> float:
    """Replication variance sum_k c_k (theta_k - center)^2.

    ``center="reference"`` centers at the full-sample estimate ``reference``;
    ``center="mean"`` centers at the mean of the replicate estimates.
    """
    est = np.asarray(estimates, dtype=np.float64)
    if est.size < 1:
        raise ValueError("need at least one replicate")
    c = np.ones_like(est) if c is None else np.broadcast_to(np.asarray(c, dtype=np.float64), est.shape)
    if center == "mean":
        ref = est.mean()
    elif reference is None:
        raise ValueError("reference estimate required")
    else:
        ref = reference
    return float(np.sum(c * (est - ref) ** 2))


# -- naive donor replicate weights -------------------------------------------


def _chunks(n, size):
    for s in range(0, n, size):
        yield slice(s, min(s + size, n))


def naive_donor_replicate_weights(
    assignment: DonorAssignment,
    respondent: np.ndarray,
    w: np.ndarray,
    reps: ReplicateWeightSet,
    rows: np.ndarray | None = None,
):
    """Naive replicate donor weights and their sum of squares.

    Returns
    -------
    alpha : ndarray (n,)
        Point-estimation donor total weights (0 for nonrespondents).
    alpha_rep : ndarray (len(rows), L)
        alpha_i1^(k) = sum_j w_j^(k) w*_1ij for the requested rows.
    phi : ndarray (len(rows),)
        sum_k c_k (alpha_i1^(k) - alpha_i1)^2.
    """
    n = w.shape[0]
    P = assignment.point_matrix(n, respondent)
    alpha = P @ w
    rows = np.flatnonzero(respondent) if rows is None else np.asarray(rows)
    arep = np.asarray(P[rows] @ reps.weights)
    phi = ((arep - alpha[rows, None]) ** 2) @ reps.c
    return alpha, arep, phi


def _phi_all(P: sparse.csr_matrix, alpha, respondent, reps, point_donors, chunk=50_000):
    """phi for every respondent; point donors need the sparse product."""
    W, c = reps.weights, reps.c
    phi = np.zeros(alpha.shape[0])
    resp = np.flatnonzero(respondent)
    for sl in _chunks(resp.shape[0], chunk):
        r = resp[sl]
        phi[r] = ((W[r] - alpha[r, None]) ** 2) @ c
    for sl in _chunks(point_donors.shape[0], chunk):
        r = point_donors[sl]
        arep = np.asarray(P[r] @ W)
        phi[r] = ((arep - alpha[r, None]) ** 2) @ c
    return phi


def _rowdot_pairs(P: sparse.csr_matrix, W: np.ndarray, xs: np.ndarray, ks: np.ndarray) -> np.ndarray:
    """sum_j P[x, j] W[j, k] for each pair (x, k)."""
    start, stop = P.indptr[xs], P.indptr[xs + 1]
    counts = stop - start
    pair = np.repeat(np.arange(xs.shape[0]), counts)
    offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    nz = start[pair] + offs
    vals = P.data[nz] * W[P.indices[nz], ks[pair]]
    return np.bincount(pair, weights=vals, minlength=xs.shape[0])


# -- the quadratic ------------------------------------------------------------


@dataclass
class AdjustmentSolution:
    """Solution of one determining equation A b^2 + B b = T."""

    unit: int
    replicate: int
    b: float
    a: float
    b_coef: float
    target: float
    discriminant: float
    root: str
    residual: float
    flag: str = ""
    donors: tuple = ()

    @property
    def flagged(self) -> bool:
        return bool(self.flag)

    @property
    def relative_residual(self) -> float:
        return abs(self.residual) / max(abs(self.target), 1e-300) if self.target else abs(self.residual)


def _solve_quadratics(A, B, T, tol=1e-12):
    """Vectorized root selection; see :func:`solve_adjustment`."""
    A, B, T = (np.asarray(x, dtype=np.float64) for x in (A, B, T))
    b = np.zeros(A.shape)
    flag = np.zeros(A.shape, dtype=np.int8)
    disc = B * B + 4.0 * A * T
    scale = np.maximum(np.abs(T), 1.0)
    flat = A <= tol * scale
    linear = flat & (np.abs(B) > tol * scale)
    b[linear] = T[linear] / B[linear]
    dead = flat & ~linear & (np.abs(T) > tol * scale)
    flag[dead] = FLAG_UNADJUSTABLE
    quad = ~flat
    real = quad & (disc >= 0)
    sq = np.sqrt(np.where(real, disc, 0.0))
    sgn = np.where(B >= 0, 1.0, -1.0)
    q = -0.5 * (B + sgn * sq)
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = np.where(real, q / np.where(A == 0, 1, A), 0.0)
        r2 = np.where(real & (q != 0), -T / np.where(q == 0, 1, q), r1)
    pick = np.where(np.abs(r2) < np.abs(r1), r2, r1)
    b[real] = pick[real]
    neg = quad & (disc < 0)
    b[neg] = -B[neg] / (2.0 * A[neg])
    flag[neg] = FLAG_NEGATIVE_DISCRIMINANT
    residual = A * b * b + B * b - T
    return b, disc, flag, residual


def solve_adjustment(deviation, gradient, c_k: float, target: float, unit: int = -1, replicate: int = -1, donors=()):
    """Solve sum_x c_k[(d_x + b g_x)^2 - d_x^2] = target for b.

    ``deviation`` holds the naive deviations alpha_x1^(k) - alpha_x1 and
    ``gradient`` the change of alpha_x^(k) per unit b for every donor whose
    replicate weight moves. Of two real roots the one of smaller magnitude
    is returned; with a negative discriminant the minimizer of the quadratic
    is returned and flagged; with no leverage on any donor (A = B = 0) and a
    nonzero target the solution is flagged unadjustable with b = 0.
    """
    d = np.asarray(deviation, dtype=np.float64)
    g = np.asarray(gradient, dtype=np.float64)
    A = c_k * float(g @ g)
    B = 2.0 * c_k * float(d @ g)
    b, disc, flag, res = _solve_quadratics(np.array([A]), np.array([B]), np.array([float(target)]))
    return _solution(unit, replicate, b[0], A, B, float(target), disc[0], flag[0], res[0], donors)


def _solution(unit, replicate, b, A, B, T, disc, flag, res, donors=()):
    root = {FLAG_NONE: "smaller", FLAG_NEGATIVE_DISCRIMINANT: "minimizer", FLAG_UNADJUSTABLE: "none"}[int(flag)]
    if flag == FLAG_NONE and A == 0:
        root = "linear" if B != 0 else "zero"
    return AdjustmentSolution(
        unit=int(unit), replicate=int(replicate), b=float(b), a=float(A), b_coef=float(B),
        target=float(T), discriminant=float(disc), root=root, residual=float(res),
        flag=FLAG_NAMES[int(flag)], donors=tuple(int(x) for x in donors),
    )


# -- adjusted replicate fractions ----------------------------------------------


@dataclass
class ReplicateFractionalWeights:
    """Replicate fractions for one item, stored as overrides of the point fractions.

    In replicate k recipient ``recipients[r]`` uses ``assignment.w1[r]``
    unless an event (r, k) exists, in which case it uses
    ``w1[r] + b[unit] * gradient[event]``. The gradient rows sum to zero, so
    every replicate fraction vector sums to one.
    """

    assignment: DonorAssignment
    mode: str
    c: np.ndarray
    alpha: np.ndarray
    phi: np.ndarray
    event_recipient: np.ndarray
    event_replicate: np.ndarray
    event_unit: np.ndarray
    event_gradient: np.ndarray
    unit_ids: np.ndarray
    unit_replicate: np.ndarray
    b: np.ndarray
    coef_a: np.ndarray
    coef_b: np.ndarray
    target: np.ndarray
    discriminant: np.ndarray
    flag: np.ndarray
    residual: np.ndarray
    unit_donors: list
    excluded_recipient: np.ndarray
    excluded_replicate: np.ndarray
    n_replicates: int
    event_fractions: np.ndarray = field(init=False)

    def __post_init__(self):
        self.refresh()

    def refresh(self):
        """Recompute event fractions from the current ``b`` values."""
        pos = np.searchsorted(self.unit_ids, self.event_unit)
        bb = self.b[pos] if self.b.size else np.zeros(0)
        self.event_fractions = self.assignment.w1[self.event_recipient] + bb[:, None] * self.event_gradient
        self._event_b = bb

    @property
    def item(self) -> int:
        return self.assignment.item

    @property
    def n_events(self) -> int:
        return self.event_recipient.shape[0]

    def solutions(self) -> list[AdjustmentSolution]:
        return [
            _solution(
                self.unit_ids[u], self.unit_replicate[u], self.b[u], self.coef_a[u], self.coef_b[u],
                self.target[u], self.discriminant[u], self.flag[u], self.residual[u], self.unit_donors[u],
            )
            for u in range(self.unit_ids.shape[0])
        ]

    def flagged_units(self) -> np.ndarray:
        return self.unit_ids[self.flag != FLAG_NONE]

    def fractions(self, k: int) -> np.ndarray:
        """Replicate-k fraction table, shape (n_recipients, M2)."""
        out = self.assignment.w1.copy()
        ev = self.event_replicate == k
        out[self.event_recipient[ev]] = self.event_fractions[ev]
        return out

    def fraction_table(self) -> np.ndarray:
        """Dense (n_recipients, M2, L) table; small frames only."""
        out = np.repeat(self.assignment.w1[:, :, None], self.n_replicates, axis=2)
        out[self.event_recipient, :, self.event_replicate] = self.event_fractions
        return out

    def value_changes(self, y: np.ndarray):
        """Per event: recipient row, replicate and change of the imputed value."""
        d = self.assignment.donors[self.event_recipient]
        delta = self._event_b * (self.event_gradient * y[d]).sum(axis=1)
        return self.assignment.recipients[self.event_recipient], self.event_replicate, delta

    def replicate_totals(self, y: np.ndarray, weights: np.ndarray, rep_weights: np.ndarray, z=None):
        """Full-sample, naive-replicate and adjusted-replicate linear totals.

        ``y`` is the item for all persons (values of nonrespondents unused);
        ``z`` an optional person-level multiplier such as a domain indicator.
        """
        a = self.assignment
        y_imp = np.where(np.isnan(y), 0.0, y)
        y_imp[a.recipients] = (a.w1 * y[a.donors]).sum(axis=1)
        if z is not None:
            y_imp = y_imp * z
        theta = float(weights @ y_imp)
        naive = rep_weights.T @ y_imp
        rows, k, delta = self.value_changes(y)
        if z is not None:
            delta = delta * z[rows]
        adj = naive + np.bincount(k, weights=rep_weights[rows, k] * delta, minlength=naive.shape[0])
        return theta, naive, adj


def adjust_item(
    frame: Frame,
    assignment: DonorAssignment,
    reps: ReplicateWeightSet,
    mode: str = "individual",
    weights: np.ndarray | None = None,
) -> ReplicateFractionalWeights:
    """Naive replicates, donor deficits, determining equations and adjusted fractions.

    ``mode`` is ``"grouped"`` (one b per replicate, targets pooled over the
    deleted PSU's donors), ``"individual"`` (one b per point donor, M1 = 1
    only) or ``"single"`` (delete-one jackknife; every PSU is one person).
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "individual" and assignment.m1 != 1:
        raise ValueError("individual-level adjustment requires M1 = 1")
    if reps.weights is None:
        raise ValueError("replicate set carries no weights")
    if mode == "single" and np.unique(reps.psu).shape[0] != reps.psu.shape[0]:
        raise ValueError("single mode needs one person per PSU")
    a = assignment
    n = frame.n
    w = frame.w if weights is None else np.asarray(weights, dtype=np.float64)
    W, c, psu = reps.weights, reps.c, reps.psu
    L = reps.n_replicates
    resp = frame.response[:, a.item]
    P = a.point_matrix(n, resp)
    alpha = P @ w

    J, D = a.recipients, a.donors
    m, M2 = D.shape
    psu_rec = psu[J]
    psu_don = psu[D]

    # candidate events: (recipient, deleted PSU of one of its point donors)
    rr = np.repeat(np.arange(m), a.m1)
    kk = psu_don[:, : a.m1].ravel()
    cross = psu_rec[rr] != kk
    pairs = np.unique(np.stack([rr[cross], kk[cross]], axis=1), axis=0) if cross.any() else np.zeros((0, 2), np.int64)
    pr, pk = pairs[:, 0], pairs[:, 1]
    in_k = psu_don[pr] == pk[:, None]
    point_in = in_k & (a.w1[pr] > 0)

    # P_k: point donors in PSU k that donate across PSUs (before exclusions)
    tgt_rows = D[pr][point_in]
    tgt_k = np.repeat(pk, point_in.sum(axis=1))
    point_donors = np.unique(D[:, : a.m1])
    phi = _phi_all(P, alpha, resp, reps, point_donors)
    deficit = alpha**2 - alpha - phi

    excluded = in_k.sum(axis=1) == M2
    ex_r, ex_k = pr[excluded], pk[excluded]
    pr, pk, in_k = pr[~excluded], pk[~excluded], in_k[~excluded]
    num = (a.w1[pr] * in_k).sum(axis=1)
    den = (a.w2[pr] * ~in_k).sum(axis=1)
    grad = np.where(in_k, -a.w1[pr], (num / den)[:, None] * a.w2[pr])

    if mode == "individual":
        tgt_unit = tgt_rows
        ev_unit = D[pr, 0]
    else:
        tgt_unit = tgt_k
        ev_unit = pk
    unit_ids, tgt_pos = np.unique(tgt_unit, return_inverse=True)
    tgt_pos = tgt_pos.ravel()
    # one target entry per (unit, donor)
    ud = np.unique(np.stack([tgt_pos, tgt_rows], axis=1), axis=0) if tgt_rows.size else np.zeros((0, 2), np.int64)
    T = np.bincount(ud[:, 0], weights=deficit[ud[:, 1]], minlength=unit_ids.shape[0])
    unit_rep = np.empty(unit_ids.shape[0], dtype=np.int64)
    unit_rep[tgt_pos] = tgt_k
    split = np.flatnonzero(np.diff(ud[:, 0])) + 1 if ud.size else np.zeros(0, np.int64)
    unit_donors = [tuple(x) for x in np.split(ud[:, 1], split)] if ud.size else []

    # aggregate alpha changes per (unit, donor x)
    ev_pos = np.searchsorted(unit_ids, ev_unit)
    contrib = W[J[pr], pk][:, None] * grad
    nz = contrib != 0
    upos = np.repeat(ev_pos, M2).reshape(-1, M2)[nz]
    xs = D[pr][nz]
    vals = contrib[nz]
    G = sparse.coo_matrix((vals, (upos, xs)), shape=(unit_ids.shape[0], n)).tocsr()
    G.sum_duplicates()
    g_unit = np.repeat(np.arange(G.shape[0]), np.diff(G.indptr))
    g_x = G.indices
    g_val = G.data
    g_k = unit_rep[g_unit]
    # P carries the self entry of respondents, so this is alpha_x1^(k) in full
    arep = _rowdot_pairs(P, W, g_x, g_k)
    dev = arep - alpha[g_x]
    ck = c[unit_rep]
    A = ck * np.bincount(g_unit, weights=g_val**2, minlength=unit_ids.shape[0])
    B = 2.0 * ck * np.bincount(g_unit, weights=dev * g_val, minlength=unit_ids.shape[0])
    b, disc, flag, res = _solve_quadratics(A, B, T)

    return ReplicateFractionalWeights(
        assignment=a, mode=mode, c=c, alpha=alpha, phi=phi,
        event_recipient=pr, event_replicate=pk, event_unit=ev_unit, event_gradient=grad,
        unit_ids=unit_ids, unit_replicate=unit_rep, b=b, coef_a=A, coef_b=B, target=T,
        discriminant=disc, flag=flag, residual=res, unit_donors=unit_donors,
        excluded_recipient=ex_r, excluded_replicate=ex_k, n_replicates=L,
    )


def adjusted_fractional_weights(replication: ReplicateFractionalWeights, solutions=None) -> ReplicateFractionalWeights:
    """Apply solutions (default: the solver's own) to the replicate fractions."""
    if solutions is not None:
        by_unit = {s.unit: s.b for s in solutions}
        replication.b = np.array([by_unit.get(int(u), 0.0) for u in replication.unit_ids])
    replication.refresh()
    return replication


def dump_replication_csv(replication: ReplicateFractionalWeights, frame: Frame, fractions_path, diagnostics_path=None):
    """Write the replicate fraction overrides and the solver diagnostics."""
    a = replication.assignment
    M2 = a.donors.shape[1]
    with open(fractions_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["item", "recipient_id", "replicate"] + [f"donor{c + 1}_id" for c in range(M2)]
                    + [f"fraction{c + 1}" for c in range(M2)])
        for e in range(replication.n_events):
            r = replication.event_recipient[e]
            wr.writerow([a.item + 1, int(frame.person_id[a.recipients[r]]), int(replication.event_replicate[e])]
                        + [int(p) for p in frame.person_id[a.donors[r]]]
                        + [repr(float(x)) for x in replication.event_fractions[e]])
    if diagnostics_path is not None:
        with open(diagnostics_path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["item", "mode", "unit", "replicate", "b", "a", "b_coef", "target", "discriminant", "residual", "flag"])
            for s in replication.solutions():
                unit = int(frame.person_id[s.unit]) if replication.mode == "individual" else s.unit
                wr.writerow([a.item + 1, replication.mode, unit, s.replicate, repr(s.b), repr(s.a), repr(s.b_coef),
                             repr(s.target), repr(s.discriminant), repr(s.residual), s.flag])
