"""Sparse active-user detection: stage-adaptive greedy recovery per subcarrier,
cross-subcarrier voting, an l1 reference solver, and a brute-force test oracle.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .env import ChannelTensor, Measurement

_RIDGE = 1e-10
_MAX_ITERS = 1000


@dataclass(frozen=True)
class RecoveryConfig:
    """Knobs of the greedy recovery and the voting stage."""

    step_size: int = 1
    vote_threshold: float = 0.5
    max_stages: int = 12
    residual_tolerance: float = 1e-6
    max_support: int = 16
    binarize_threshold: float = 0.5
    # measurement noise variance; sets the absolute residual floor below
    # which further support growth only fits noise
    noise_variance: float = 0.0

    def __post_init__(self):
        if self.step_size < 1:
            raise ValueError("step_size must be >= 1")
        if not 0.0 < self.vote_threshold <= 1.0:
            raise ValueError("vote_threshold must lie in (0, 1]")
        if self.max_stages < 1 or self.max_support < 1:
            raise ValueError("max_stages and max_support must be >= 1")
        if self.residual_tolerance <= 0:
            raise ValueError("residual_tolerance must be positive")
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be non-negative")


def recovery_for(
    n_antennas: int, noise_variance: float = 0.0, **overrides
) -> RecoveryConfig:
    """Recovery settings matched to a measurement setup: support capped at
    half the antenna count, residual floor at the noise level."""
    settings = {
        "max_support": max(1, n_antennas // 2),
        "noise_variance": noise_variance,
    }
    settings.update(overrides)
    return RecoveryConfig(**settings)


@dataclass(frozen=True)
class SupportEstimate:
    """Voted activity indicator plus the per-subcarrier votes behind it."""

    indicator: np.ndarray
    per_subcarrier: list


@dataclass(frozen=True)
class LassoResult:
    coefficients: np.ndarray
    converged: bool
    n_iterations: int
    objective: float


def _ls_solve(a: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Least-squares fit via lightly ridged normal equations (the submatrices
    here are tall and small, so this is much cheaper than an SVD solve and
    stays well defined when columns repeat); falls back to lstsq if the
    solve degenerates."""
    gram = a.conj().T @ a
    gram.flat[:: gram.shape[0] + 1] += _RIDGE
    try:
        sol = np.linalg.solve(gram, a.conj().T @ y)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(a, y, rcond=None)[0]
    if not np.isfinite(sol.sum()):
        return np.linalg.lstsq(a, y, rcond=None)[0]
    return sol


def _top_indices(magnitudes: np.ndarray, k: int) -> np.ndarray:
    k = min(k, magnitudes.size)
    return np.argpartition(magnitudes, -k)[-k:]


def samp_recover(
    h_norm_k: np.ndarray, y_k: np.ndarray, cfg: RecoveryConfig
) -> np.ndarray:
    """Stage-adaptive matching pursuit on one subcarrier.

    Candidates are the s*theta columns most correlated with the residual,
    merged with the running support; a least-squares refit keeps the s*theta
    largest coefficients and updates the residual. The stage counter theta
    bumps whenever the residual norm grows; iteration stops once the residual
    falls below the relative tolerance (or the noise floor, when noisy),
    theta exceeds max_stages, or the support would exceed max_support. The returned indicator marks refit
    coefficients whose magnitude exceeds binarize_threshold.
    """
    h_norm_k = np.asarray(h_norm_k)
    y_k = np.asarray(y_k)
    m, n = h_norm_k.shape
    indicator = np.zeros(n, dtype=np.int64)
    y_sq = float(np.real(np.vdot(y_k, y_k)))
    y_norm = np.sqrt(y_sq)
    if y_norm == 0.0:
        return indicator

    # Everything the iteration needs reduces to the Gram matrix and the
    # correlation vector, so precompute both once per subcarrier.
    gram = h_norm_k.conj().T @ h_norm_k
    hty = h_norm_k.conj().T @ y_k

    def fit(support):
        sub = gram[np.ix_(support, support)].copy()
        sub.flat[:: sub.shape[0] + 1] += _RIDGE
        rhs = hty[support]
        try:
            coef = np.linalg.solve(sub, rhs)
        except np.linalg.LinAlgError:
            coef = _ls_solve(h_norm_k[:, support], y_k)
        if not np.isfinite(coef.sum()):
            coef = _ls_solve(h_norm_k[:, support], y_k)
        return coef

    support_cap = min(cfg.max_support, m)
    stop_norm = max(
        cfg.residual_tolerance * y_norm, np.sqrt(10.0 * m * cfg.noise_variance)
    )
    theta = 1
    best_support = np.array([], dtype=np.int64)
    best_coef = np.array([], dtype=y_k.dtype)
    corr_best = np.abs(hty)
    residual_norm = y_norm

    for _ in range(_MAX_ITERS):
        size = min(cfg.step_size * theta, support_cap)
        merged = np.zeros(n, dtype=bool)
        merged[best_support] = True
        merged[_top_indices(corr_best, size)] = True
        candidates = np.flatnonzero(merged)
        coef = fit(candidates)
        pruned = candidates[_top_indices(np.abs(coef), size)]
        coef = fit(pruned)
        # residual r = y - A c, so A^H r = hty - G[:, S] c and
        # ||r||^2 = ||y||^2 - 2 Re(c^H hty_S) + c^H G_SS c
        corr_full = hty - gram[:, pruned] @ coef
        gsc = gram[np.ix_(pruned, pruned)] @ coef
        new_sq = y_sq - 2.0 * float(np.real(np.vdot(coef, hty[pruned]))) + float(
            np.real(np.vdot(coef, gsc))
        )
        new_norm = np.sqrt(max(new_sq, 0.0))

        if new_norm < stop_norm:
            best_support, best_coef = pruned, coef
            break
        if new_norm >= residual_norm:
            theta += 1
            if theta > cfg.max_stages or cfg.step_size * theta > support_cap:
                break
        else:
            best_support, best_coef = pruned, coef
            corr_best = np.abs(corr_full)
            residual_norm = new_norm

    if best_support.size:
        keep = np.abs(best_coef) > cfg.binarize_threshold
        indicator[best_support[keep]] = 1
    return indicator


def samp_recover_batch(
    mats: np.ndarray, ys: np.ndarray, cfg: RecoveryConfig
) -> np.ndarray:
    """Run samp_recover on a stack of subcarriers in lockstep.

    Semantically equivalent to calling samp_recover per subcarrier, but the
    per-iteration work (candidate selection, least-squares refits, residual
    updates) is batched across subcarriers, with finished subcarriers frozen
    by masks. Supports are padded to a common width; padded rows of each
    normal-equation system are replaced by identity rows so the embedded
    solve matches the unpadded one.

    Returns an int64 indicator array of shape (K, N).
    """
    mats = np.asarray(mats)
    ys = np.asarray(ys)
    k_total, m, n = mats.shape
    cap = min(cfg.max_support, m)

    conj_t = mats.conj().transpose(0, 2, 1)
    gram = conj_t @ mats
    hty = (conj_t @ ys[:, :, None])[:, :, 0]
    y_sq = np.real(np.einsum("km,km->k", ys.conj(), ys))
    y_norm = np.sqrt(y_sq)
    stop_norm = np.maximum(
        cfg.residual_tolerance * y_norm,
        np.sqrt(10.0 * m * cfg.noise_variance),
    )

    rows = np.arange(k_total)[:, None]
    active = y_norm > 0.0
    theta = np.ones(k_total, dtype=np.int64)
    best_mask = np.zeros((k_total, n), dtype=bool)
    best_idx = np.zeros((k_total, cap), dtype=np.int64)
    best_coef = np.zeros((k_total, cap), dtype=complex)
    best_cnt = np.zeros(k_total, dtype=np.int64)
    corr_best = np.abs(hty)
    res_norm = y_norm.copy()

    colspan = np.arange(n)[None, :, None]

    def padded_solve(work, idx, valid):
        """Solve the ridged normal equations on padded index lists; padded
        coordinates get identity rows and zero right-hand sides, so their
        coefficients come out exactly zero. Returns the coefficients along
        with the system (sub, rhs), which the residual update reuses."""
        w = idx.shape[1]
        sub = gram[work[:, None, None], idx[:, :, None], idx[:, None, :]]
        sub *= valid[:, :, None] & valid[:, None, :]
        sub[:, np.arange(w), np.arange(w)] += np.where(valid, _RIDGE, 1.0)
        rhs = np.where(valid, hty[work[:, None], idx], 0.0)
        try:
            return np.linalg.solve(sub, rhs[:, :, None])[:, :, 0], sub, rhs
        except np.linalg.LinAlgError:
            sol = np.empty_like(rhs)
            for i, k in enumerate(work):
                sol[i] = _ls_solve(mats[k][:, idx[i]], ys[k]) * valid[i]
            return sol, sub, rhs

    for _ in range(_MAX_ITERS):
        # only unfinished subcarriers take part in an iteration
        work = np.flatnonzero(active)
        if work.size == 0:
            break
        size = np.minimum(cfg.step_size * theta[work], cap)
        grow = int(size.max())
        w2 = min(grow, n)
        w1 = min(2 * grow, n)
        lane2 = np.arange(w2)[None, :]

        rowa = np.arange(work.size)[:, None]
        order = np.argsort(-corr_best[work], axis=1, kind="stable")[:, :w2]
        merged = best_mask[work].copy()
        merged[rowa, order] |= lane2 < size[:, None]
        counts = merged.sum(axis=1)
        cand_idx = np.argsort(~merged, axis=1, kind="stable")[:, :w1]
        cand_valid = np.arange(w1)[None, :] < counts[:, None]

        coef, gss, hty_s = padded_solve(work, cand_idx, cand_valid)
        if np.array_equal(counts, size):
            # every running support already sits inside the top-correlation
            # set, so pruning keeps all candidates and the refit would solve
            # the identical system again; lanes beyond w2 are all padding
            pruned_idx = cand_idx[:, :w2]
            pruned_valid = cand_valid[:, :w2]
            coef = coef[:, :w2]
            gss = gss[:, :w2, :w2]
            hty_s = hty_s[:, :w2]
        else:
            mags = np.where(cand_valid, np.abs(coef), -1.0)
            keep = np.argsort(-mags, axis=1, kind="stable")[:, :w2]
            pruned_idx = cand_idx[rowa, keep]
            pruned_valid = lane2 < size[:, None]
            coef, gss, hty_s = padded_solve(work, pruned_idx, pruned_valid)

        # ||y - A c||^2 = ||y||^2 - Re(c^H (2 hty_S - G_SS c)); the padded
        # lanes of coef are exactly zero, so the identity rows in gss drop out
        inner = 2.0 * hty_s - (gss @ coef[:, :, None])[:, :, 0]
        new_sq = y_sq[work] - np.real((coef.conj() * inner).sum(axis=1))
        new_norm = np.sqrt(np.maximum(new_sq, 0.0))

        hit = new_norm < stop_norm[work]
        grew = ~hit & (new_norm >= res_norm[work])
        improved = ~hit & ~grew

        acc_w = hit | improved
        acc = work[acc_w]
        best_idx[acc, :w2] = pruned_idx[acc_w]
        best_idx[acc, w2:] = 0
        best_coef[acc, :w2] = coef[acc_w]
        best_coef[acc, w2:] = 0.0
        best_cnt[acc] = size[acc_w]
        new_mask = np.zeros((work.size, n), dtype=bool)
        new_mask[rowa, pruned_idx] = pruned_valid
        best_mask[acc] = new_mask[acc_w]
        # the updated correlation A^H r = hty - G[:, S] c is only consumed by
        # rows that improved, so gather the gram columns just for those
        imp = work[improved]
        if imp.size:
            gcols = gram[imp[:, None, None], colspan, pruned_idx[improved][:, None, :]]
            corr_best[imp] = np.abs(
                hty[imp] - (gcols @ coef[improved][:, :, None])[:, :, 0]
            )
        res_norm[imp] = new_norm[improved]

        grw = work[grew]
        theta[grw] += 1
        overrun = (theta[grw] > cfg.max_stages) | (
            cfg.step_size * theta[grw] > cap
        )
        active[work[hit]] = False
        active[grw[overrun]] = False

    indicator = np.zeros((k_total, n), dtype=np.int64)
    hot = (np.abs(best_coef) > cfg.binarize_threshold) & (
        np.arange(cap)[None, :] < best_cnt[:, None]
    )
    # padded slots of best_idx repeat index 0; maximum.at keeps a real
    # detection there from being overwritten by padding
    np.maximum.at(
        indicator, (np.broadcast_to(rows, best_idx.shape), best_idx),
        hot.astype(np.int64),
    )
    return indicator


def vote(per_subcarrier, threshold: float) -> np.ndarray:
    """Majority-style combining: a user is declared active iff its mean vote
    across subcarriers strictly exceeds the threshold."""
    votes = np.asarray(per_subcarrier, dtype=float)
    if votes.ndim != 2:
        raise ValueError("expected a list of equal-length vote vectors")
    return (votes.mean(axis=0) > threshold).astype(np.int64)


def lasso_recover(
    h_norm: np.ndarray,
    y: np.ndarray,
    eps_n: float,
    max_iterations: int = 5000,
    rel_tolerance: float = 1e-10,
) -> LassoResult:
    """Iterative shrinkage-thresholding for the l1-regularized recovery

        minimize (1/2M) ||y - H a||_2^2 + eps_n ||a||_1.

    Uses the 1/L gradient step (L from the largest singular value of H), which
    makes the objective non-increasing. Stops at a fixed relative-objective
    tolerance; if the iteration cap is hit first, the best iterate is returned
    with converged=False.
    """
    if eps_n <= 0:
        raise ValueError("eps_n must be positive")
    h_norm = np.asarray(h_norm)
    y = np.asarray(y)
    m, n = h_norm.shape
    alpha = np.zeros(n, dtype=complex)
    if not np.any(y):
        return LassoResult(alpha, True, 0, 0.0)

    lipschitz = np.linalg.norm(h_norm, 2) ** 2 / m
    step = 1.0 / lipschitz

    def objective(a):
        r = y - h_norm @ a
        return float(
            np.real(np.vdot(r, r)) / (2.0 * m) + eps_n * np.abs(a).sum()
        )

    obj = objective(alpha)
    converged = False
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        grad = h_norm.conj().T @ (h_norm @ alpha - y) / m
        z = alpha - step * grad
        mag = np.abs(z)
        shrink = np.maximum(mag - step * eps_n, 0.0)
        alpha = np.where(mag > 0, z * (shrink / np.maximum(mag, 1e-300)), 0.0)
        new_obj = objective(alpha)
        if abs(obj - new_obj) <= rel_tolerance * max(obj, 1e-15):
            obj = new_obj
            converged = True
            break
        obj = new_obj
    return LassoResult(alpha, converged, iterations, obj)


def lasso_support(
    coefficients: np.ndarray, eps_n: float, theta_sep: float = 1.0
) -> np.ndarray:
    """Binarize l1-solver coefficients at the separation level theta_sep * eps_n."""
    return (np.abs(coefficients) > theta_sep * eps_n).astype(np.int64)


def detection_accuracy(truth: np.ndarray, estimate: np.ndarray) -> float:
    """1 minus the normalized l1 distance between indicator vectors."""
    truth = np.asarray(truth, dtype=float)
    estimate = np.asarray(estimate, dtype=float)
    if truth.shape != estimate.shape:
        raise ValueError("indicator vectors must have equal length")
    return float(1.0 - np.abs(truth - estimate).sum() / truth.size)


def brute_force_recover(
    h_norm: np.ndarray, y: np.ndarray, max_k: int
) -> np.ndarray:
    """Exhaustive least-squares search over all supports of size <= max_k.

    Guarded to tiny instances; intended as an independent oracle for tests.
    """
    h_norm = np.asarray(h_norm)
    y = np.asarray(y)
    n = h_norm.shape[1]
    if n > 16 or max_k > 3:
        raise ValueError("brute force restricted to N <= 16 and max_k <= 3")
    best_support: tuple = ()
    best_norm = np.linalg.norm(y)
    for k in range(1, max_k + 1):
        for support in itertools.combinations(range(n), k):
            cols = h_norm[:, list(support)]
            coef = _ls_solve(cols, y)
            res = np.linalg.norm(y - cols @ coef)
            if res < best_norm - 1e-12:
                best_norm = res
                best_support = support
    indicator = np.zeros(n, dtype=np.int64)
    indicator[list(best_support)] = 1
    return indicator


def recover_activity(
    ch: ChannelTensor, meas: Measurement, cfg: RecoveryConfig
) -> SupportEstimate:
    """Run the greedy recovery on every subcarrier and combine by voting.

    The per-subcarrier recoveries are pure and independent; they are run in
    lockstep through the batched implementation.
    """
    # single precision is ample for threshold-based support decisions and
    # roughly halves the cost of the solves and gathers
    mats = (ch.h * ch.preambles[np.newaxis, np.newaxis, :]).astype(
        np.complex64, copy=False
    )
    stacked = samp_recover_batch(
        mats, meas.y.astype(np.complex64, copy=False), cfg
    )
    per_subcarrier = list(stacked)
    indicator = vote(per_subcarrier, cfg.vote_threshold)
    return SupportEstimate(indicator=indicator, per_subcarrier=per_subcarrier)
