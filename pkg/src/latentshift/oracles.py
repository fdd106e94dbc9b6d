"""Brute-force verification of the factorization's identifiability
claims on tiny discrete instances.

Grid-enumerates every factorization of a known discrete joint that
reproduces the observed side-variable conditionals, then checks two
properties: the ground-truth decoder attains the minimum max-row
variance among them, and competing factorizations recover the true
posterior up to a latent permutation with error shrinking in the
overlap level.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from latentshift.errors import PreconditionError, ShapeError, SizeGuardError
from latentshift.validate import check_row_stochastic, check_simplex

MAX_SUPPORT = 6
MAX_CLASSES = 3
ALLOWED_STEPS = (0.05, 0.1)
MAX_DECODER_GRID = 500_000
MAX_CANDIDATES = 200_000
_CHUNK = 4096


@dataclass
class DiscreteJoint:
    """Finite-support ground truth: covariate marginal, posterior table,
    and per-class side-variable distributions."""

    p_x: np.ndarray
    p_z_given_x: np.ndarray
    p_s_given_z: np.ndarray

    def __post_init__(self):
        self.p_x = check_simplex(self.p_x, "p_x")
        self.p_z_given_x = check_row_stochastic(self.p_z_given_x, "p_z_given_x")
        self.p_s_given_z = check_row_stochastic(self.p_s_given_z, "p_s_given_z")
        if self.p_z_given_x.shape[0] != self.p_x.shape[0]:
            raise ShapeError("p_z_given_x rows must match the support size")
        if self.p_z_given_x.shape[1] != self.p_s_given_z.shape[0]:
            raise ShapeError("posterior columns must match decoder rows")

    @property
    def n_x(self):
        return self.p_x.shape[0]

    @property
    def n_z(self):
        return self.p_s_given_z.shape[0]

    @property
    def n_s(self):
        return self.p_s_given_z.shape[1]

    def implied_s_given_x(self):
        return self.p_z_given_x @ self.p_s_given_z


@dataclass
class FactorizationCandidate:
    q_z_given_x: np.ndarray
    q_s_given_z: np.ndarray


def max_row_variance(matrix):
    """Largest per-row variance around the uniform row mean."""
    matrix = np.asarray(matrix, dtype=np.float64)
    dev = matrix - 1.0 / matrix.shape[1]
    return float((dev * dev).mean(axis=1).max())


def simplex_grid(dim, step):
    """All probability vectors of the given dimension on a step grid."""
    k = round(1.0 / step)
    if abs(k * step - 1.0) > 1e-9:
        raise SizeGuardError(f"grid step {step} does not divide 1")
    combos = []
    def rec(prefix, remaining, slots):
        if slots == 1:
            combos.append(prefix + [remaining])
            return
        for v in range(remaining + 1):
            rec(prefix + [v], remaining - v, slots - 1)
    rec([], k, dim)
    return np.array(combos, dtype=np.float64) / k


def enumerate_factorizations(joint, grid_step=0.05, loss_slack=1e-9,
                             max_candidates=MAX_CANDIDATES):
    """All grid factorizations reproducing the side conditionals.

    Every pair of a row-stochastic posterior table and decoder on the
    grid whose implied side conditionals match the instance's within
    loss_slack (max-abs, per support point) is returned.
    """
    if grid_step not in ALLOWED_STEPS:
        raise SizeGuardError(f"grid_step must be one of {ALLOWED_STEPS}")
    if joint.n_x > MAX_SUPPORT or joint.n_z > MAX_CLASSES or joint.n_s > MAX_CLASSES:
        raise SizeGuardError(
            f"instance too large: support {joint.n_x} (max {MAX_SUPPORT}), "
            f"classes {joint.n_z}x{joint.n_s} (max {MAX_CLASSES})"
        )
    q_grid = simplex_grid(joint.n_z, grid_step)
    row_grid = simplex_grid(joint.n_s, grid_step)
    n_rows = row_grid.shape[0]
    n_decoders = n_rows ** joint.n_z
    if n_decoders > MAX_DECODER_GRID:
        raise SizeGuardError(
            f"{n_decoders} decoder grid points exceed {MAX_DECODER_GRID}; "
            "use a coarser grid_step"
        )
    target = joint.implied_s_given_x()

    candidates = []
    row_indices = itertools.product(range(n_rows), repeat=joint.n_z)
    while True:
        chunk = list(itertools.islice(row_indices, _CHUNK))
        if not chunk:
            break
        decoders = row_grid[np.array(chunk)]            # (c, n_z, n_s)
        implied = np.einsum("gz,czs->cgs", q_grid, decoders)
        ok_by_x = [
            (np.abs(implied - target[x]).max(axis=2) <= loss_slack)
            for x in range(joint.n_x)
        ]                                               # each (c, n_grid)
        feasible = ok_by_x[0].any(axis=1)
        for ok in ok_by_x[1:]:
            feasible &= ok.any(axis=1)
        for c in np.flatnonzero(feasible):
            valid = [np.flatnonzero(ok[c]) for ok in ok_by_x]
            for combo in itertools.product(*valid):
                candidates.append(FactorizationCandidate(
                    q_z_given_x=q_grid[list(combo)].copy(),
                    q_s_given_z=decoders[c].copy(),
                ))
                if len(candidates) > max_candidates:
                    raise SizeGuardError(
                        f"more than {max_candidates} matching factorizations; "
                        "tighten loss_slack or coarsen the grid"
                    )
    return candidates


@dataclass
class MinimalityReport:
    passed: bool
    truth_variance: float
    margins: np.ndarray
    n_candidates: int

    @property
    def worst_margin(self):
        return float(self.margins.min()) if self.margins.size else 0.0


def check_variance_minimality(joint, candidates, tolerance=1e-9):
    """Assert the true decoder minimizes max-row variance over candidates.

    Requires the instance to contain, for every latent class, a support
    point whose posterior is concentrated on that class (full overlap).
    """
    if (joint.p_z_given_x.max(axis=0) < 1.0 - 1e-9).any():
        raise PreconditionError(
            "variance minimality needs a posterior-one support point per class"
        )
    truth = max_row_variance(joint.p_s_given_z)
    margins = np.array([
        max_row_variance(c.q_s_given_z) - truth for c in candidates
    ])
    passed = bool((margins >= -tolerance).all())
    return MinimalityReport(
        passed=passed,
        truth_variance=truth,
        margins=margins,
        n_candidates=len(candidates),
    )


def check_permutation_recovery(joint, learned_q_z_given_x):
    """Best latent-relabeling match of a learned posterior table.

    Returns (permutation, max_abs_error) where permutation maps true
    class i to learned column permutation[i].
    """
    learned = np.asarray(learned_q_z_given_x, dtype=np.float64)
    truth = joint.p_z_given_x
    if learned.shape != truth.shape:
        raise ShapeError(
            f"learned table shape {learned.shape} != instance {truth.shape}"
        )
    if joint.n_z > MAX_SUPPORT:
        raise SizeGuardError("permutation search supports at most 6 classes")
    best_perm, best_err = None, np.inf
    for perm in itertools.permutations(range(joint.n_z)):
        err = float(np.abs(truth - learned[:, perm]).max())
        if err < best_err:
            best_perm, best_err = perm, err
    return best_perm, best_err


def align_rows(reference, candidate):
    """Best row-permutation alignment of two matrices (or vectors).

    Returns (permutation, max_abs_error) with candidate rows reordered
    by the permutation to match the reference.
    """
    ref = np.atleast_2d(np.asarray(reference, dtype=np.float64).T).T
    cand = np.atleast_2d(np.asarray(candidate, dtype=np.float64).T).T
    if ref.shape != cand.shape:
        raise ShapeError(f"shape mismatch {ref.shape} vs {cand.shape}")
    if ref.shape[0] > MAX_SUPPORT:
        raise SizeGuardError("row alignment supports at most 6 rows")
    best_perm, best_err = None, np.inf
    for perm in itertools.permutations(range(ref.shape[0])):
        err = float(np.abs(ref - cand[list(perm)]).max())
        if err < best_err:
            best_perm, best_err = perm, err
    return best_perm, best_err


def competing_factorization_two_class(eta, decoder):
    """Observationally equivalent competitor for a symmetric 2-class
    instance with overlap level eta.

    Builds the ground-truth instance whose posterior peaks at eta per
    class, plus the competing factorization obtained by mixing the
    decoder rows; the competitor's posteriors are one-hot, so it
    satisfies full overlap itself while reproducing the side
    conditionals exactly. Returns (joint, q_z_given_x, q_s_given_z).
    """
    if not 0.5 < eta <= 1.0:
        raise PreconditionError("eta must lie in (0.5, 1]")
    decoder = check_row_stochastic(np.asarray(decoder, dtype=np.float64), "decoder")
    if decoder.shape[0] != 2:
        raise ShapeError("two latent classes required")
    p_table = np.array([
        [eta, 1.0 - eta],
        [1.0 - eta, eta],
        [0.5, 0.5],
    ])
    joint = DiscreteJoint(
        p_x=np.full(3, 1.0 / 3.0),
        p_z_given_x=p_table,
        p_s_given_z=decoder,
    )
    mix = np.array([[eta, 1.0 - eta], [1.0 - eta, eta]])
    q_decoder = mix.T @ decoder
    q_table = np.array([
        [1.0, 0.0],
        [0.0, 1.0],
        [0.5, 0.5],
    ])
    implied_p = joint.implied_s_given_x()
    implied_q = q_table @ q_decoder
    if not np.allclose(implied_p, implied_q, atol=1e-12):
        raise PreconditionError("competitor construction lost equivalence")
    return joint, q_table, q_decoder


def fixed_minimality_instances():
    """The built-in full-overlap instances for the verification suite.

    Every posterior table contains a concentrated row per class plus
    interior mixing rows whose implied side conditionals are exactly
    representable on the enumeration grid.
    """
    def inst(name, decoder, posterior, step):
        table = np.asarray(posterior, dtype=np.float64)
        joint = DiscreteJoint(
            p_x=np.full(table.shape[0], 1.0 / table.shape[0]),
            p_z_given_x=table,
            p_s_given_z=np.asarray(decoder, dtype=np.float64),
        )
        return name, joint, step

    two_mix = [[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]
    return [
        inst("2x2 symmetric 0.9", [[0.9, 0.1], [0.1, 0.9]], two_mix, 0.05),
        inst("2x2 symmetric 0.8", [[0.8, 0.2], [0.2, 0.8]], two_mix + [[0.75, 0.25]], 0.05),
        inst("2x2 skewed", [[1.0, 0.0], [0.3, 0.7]], two_mix, 0.05),
        inst("2x3 sparse rows", [[0.7, 0.3, 0.0], [0.1, 0.0, 0.9]], two_mix, 0.05),
        inst("2x3 offset rows", [[0.6, 0.4, 0.0], [0.0, 0.2, 0.8]],
             two_mix + [[0.25, 0.75]], 0.05),
        inst("3x3 benchmark table",
             [[0.7, 0.3, 0.0], [0.8, 0.1, 0.1], [0.1, 0.0, 0.9]],
             [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0],
              [0.5, 0.5, 0.0], [0.0, 0.5, 0.5]], 0.1),
    ]


RECOVERY_TREND_ETAS = (0.7, 0.8, 0.9, 1.0)


def run_verification_suite():
    """Run every built-in check; returns a list of result rows.

    Each row is a dict with keys check / passed / detail. Used by the
    CLI verify subcommand.
    """
    rows = []
    for name, joint, step in fixed_minimality_instances():
        candidates = enumerate_factorizations(joint, grid_step=step)
        report = check_variance_minimality(joint, candidates)
        rows.append({
            "check": f"decoder variance minimality [{name}]",
            "passed": report.passed,
            "detail": (
                f"{report.n_candidates} matching factorizations, "
                f"truth variance {report.truth_variance:.4f}, "
                f"worst margin {report.worst_margin:+.3g}"
            ),
        })
        _, self_err = check_permutation_recovery(joint, joint.p_z_given_x)
        rows.append({
            "check": f"posterior self-recovery [{name}]",
            "passed": self_err == 0.0,
            "detail": f"error {self_err:.3g}",
        })
    base_decoder = np.array([[0.9, 0.1], [0.1, 0.9]])
    errors = []
    for eta in RECOVERY_TREND_ETAS:
        joint, q_table, _ = competing_factorization_two_class(eta, base_decoder)
        _, err = check_permutation_recovery(joint, q_table)
        errors.append(err)
    non_increasing = all(b <= a + 1e-12 for a, b in zip(errors, errors[1:]))
    rows.append({
        "check": "recovery error shrinks with overlap",
        "passed": non_increasing and errors[-1] < 1e-12,
        "detail": "errors " + ", ".join(
            f"eta={e}: {v:.3f}" for e, v in zip(RECOVERY_TREND_ETAS, errors)
        ),
    })
    return rows
