"""Dense-matrix kernels: one-sided Jacobi SVD, truncation, low-rank approximation.

Everything runs in float64 and is deterministic: calling a kernel twice on the
same input yields bit-identical results. Left singular vectors follow a fixed
sign convention (first entry of magnitude above 1e-12 is non-negative) so
factorizations are unique up to exactly degenerate inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConvergenceError, InvalidInputError, RankRangeError

# Sweep convergence: max |b_p . b_q| / (|b_p| |b_q|) over column pairs.
JACOBI_TOL = 1e-12
MAX_SWEEPS = 60
# sigma[k] counts toward the numeric rank iff sigma[k] > RANK_TOL * sigma[0].
RANK_TOL = 1e-10

_SIGN_EPS = 1e-12
_ZERO_COL = 1e-300


def as_matrix(data, what="matrix"):
    """Coerce to a 2-D float64 array, rejecting empty shapes and non-finite entries."""
    w = np.asarray(data, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
        raise InvalidInputError(
            f"{what} must be 2-D with positive dimensions, got shape {w.shape}"
        )
    if not np.all(np.isfinite(w)):
        raise InvalidInputError(f"{what} contains non-finite entries")
    return w


@dataclass(frozen=True)
class SvdFactorization:
    """Full orthogonal factorization w = u @ diag(sigma) @ v_t.

    u is square (rows x rows), v_t is square (cols x cols), and sigma holds the
    min(rows, cols) singular values in descending order. Arrays are read-only.
    """

    u: np.ndarray
    sigma: np.ndarray
    v_t: np.ndarray
    source_shape: tuple[int, int]

    def __post_init__(self):
        for a in (self.u, self.sigma, self.v_t):
            a.setflags(write=False)

    @property
    def numeric_rank(self) -> int:
        if self.sigma.size == 0 or self.sigma[0] <= 0.0:
            return 0
        return int(np.sum(self.sigma > RANK_TOL * self.sigma[0]))

    def reconstruct(self) -> np.ndarray:
        k = self.sigma.size
        return (self.u[:, :k] * self.sigma) @ self.v_t[:k, :]


@lru_cache(maxsize=None)
def _tournament_rounds(n):
    """Round-robin schedule: each sweep visits every column pair exactly once.

    Pairs within one round are disjoint, so their rotations commute and can be
    applied in a single vectorized update.
    """
    if n < 2:
        return ()
    players = list(range(n))
    if n % 2:
        players.append(-1)  # bye slot for odd n
    k = len(players)
    rounds = []
    for _ in range(k - 1):
        pairs = [
            (min(players[i], players[k - 1 - i]), max(players[i], players[k - 1 - i]))
            for i in range(k // 2)
            if players[i] != -1 and players[k - 1 - i] != -1
        ]
        p_idx = np.array([p for p, _ in pairs], dtype=np.intp)
        q_idx = np.array([q for _, q in pairs], dtype=np.intp)
        rounds.append((p_idx, q_idx))
        players.insert(1, players.pop())
    return tuple(rounds)


def _gram_residual(b):
    """Max normalized off-diagonal of b.T @ b, plus the exact column norms squared."""
    g = b.T @ b
    colsq = np.clip(np.diag(g).copy(), 0.0, None)
    d = np.sqrt(colsq)
    denom = np.outer(d, d)
    np.fill_diagonal(denom, 1.0)
    off = np.abs(g)
    np.fill_diagonal(off, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(denom > 0.0, off / denom, 0.0)
    return float(ratio.max(initial=0.0)), colsq


def _one_sided_jacobi(w):
    """Orthogonalize the columns of w with plane rotations; returns (b, v).

    On exit b has mutually orthogonal columns (within JACOBI_TOL after
    normalization) and w = b @ v.T with v orthogonal. Column norms are tracked
    incrementally within a sweep; the convergence test always uses the exact
    Gram matrix. Pairs already orthogonal to well below JACOBI_TOL are skipped,
    which cannot mask convergence failures.
    """
    n = w.shape[1]
    b = np.asfortranarray(w, dtype=np.float64)
    if b is w:
        b = b.copy(order="F")
    v = np.asfortranarray(np.eye(n))
    skip = JACOBI_TOL * 1e-3
    residual, colsq = _gram_residual(b)
    sweep = 0
    while residual > JACOBI_TOL:
        if sweep >= MAX_SWEEPS:
            raise ConvergenceError(
                f"jacobi SVD did not converge in {MAX_SWEEPS} sweeps; "
                f"off-diagonal residual {residual:.3e}",
                residual=residual,
            )
        for p_idx, q_idx in _tournament_rounds(n):
            alpha = colsq[p_idx]
            beta = colsq[q_idx]
            bp = b[:, p_idx]
            bq = b[:, q_idx]
            gamma = np.einsum("ij,ij->j", bp, bq)
            sel = np.abs(gamma) > skip * np.sqrt(np.maximum(alpha * beta, 0.0))
            if not sel.any():
                continue
            if not sel.all():
                p_idx = p_idx[sel]
                q_idx = q_idx[sel]
                alpha = alpha[sel]
                beta = beta[sel]
                gamma = gamma[sel]
                bp = bp[:, sel]
                bq = bq[:, sel]
            zeta = (beta - alpha) / (2.0 * gamma)
            # Smaller-angle root of t^2 + 2*zeta*t - 1 = 0 (zeta == 0 -> 45 degrees).
            t = np.where(zeta >= 0.0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            b[:, p_idx] = bp * c - bq * s
            b[:, q_idx] = bp * s + bq * c
            vp = v[:, p_idx]
            vq = v[:, q_idx]
            v[:, p_idx] = vp * c - vq * s
            v[:, q_idx] = vp * s + vq * c
            cs2 = 2.0 * c * s * gamma
            cc = c * c
            ss = s * s
            colsq[p_idx] = np.maximum(cc * alpha - cs2 + ss * beta, 0.0)
            colsq[q_idx] = np.maximum(ss * alpha + cs2 + cc * beta, 0.0)
        sweep += 1
        residual, colsq = _gram_residual(b)
    return b, v


def _complete_basis(u, filled):
    """Extend u[:, :filled] to a full orthonormal basis, deterministically.

    Candidates are standard basis vectors in index order; each accepted one is
    orthogonalized twice against the current columns for stability.
    """
    m = u.shape[0]
    for j in range(filled, m):
        q = u[:, :j]
        for cand in range(m):
            r = np.zeros(m)
            r[cand] = 1.0
            r -= q @ (q.T @ r)
            r -= q @ (q.T @ r)
            norm = np.linalg.norm(r)
            # Some candidate always has residual >= 1/sqrt(m); 1e-3 is safely below.
            if norm > 1e-3:
                u[:, j] = r / norm
                break
        else:
            raise ConvergenceError("orthonormal basis completion failed")
    return u


def _assemble(b, v):
    """Sort columns by norm, normalize into u, complete the basis."""
    m, n = b.shape
    norms = np.sqrt(np.einsum("ij,ij->j", b, b))
    order = np.argsort(-norms, kind="stable")
    norms = norms[order]
    b = b[:, order]
    v = v[:, order]
    u = np.zeros((m, m))
    filled = 0
    for j in range(n):
        if norms[j] > _ZERO_COL:
            u[:, j] = b[:, j] / norms[j]
            filled = j + 1
        else:
            break  # zero columns are trailing after the sort
    _complete_basis(u, filled)
    return u, norms, v.T.copy()


def _apply_sign_convention(u, v_t, paired):
    """First entry of each u column with magnitude > 1e-12 made non-negative."""
    for j in range(u.shape[1]):
        col = u[:, j]
        nz = np.nonzero(np.abs(col) > _SIGN_EPS)[0]
        if nz.size and col[nz[0]] < 0.0:
            u[:, j] = -col
            if j < paired:
                v_t[j, :] = -v_t[j, :]
    return u, v_t


def svd(w) -> SvdFactorization:
    """Factor w into SvdFactorization via one-sided Jacobi with cyclic sweeps.

    Raises InvalidInputError for non-finite input and ConvergenceError (with the
    achieved residual attached) if the sweep budget is exhausted.
    """
    w = as_matrix(w)
    m, n = w.shape
    if m >= n:
        b, v = _one_sided_jacobi(w)
        u, sigma, v_t = _assemble(b, v)
    else:
        b, v = _one_sided_jacobi(w.T.copy())
        ut, sigma, vtt = _assemble(b, v)
        u = vtt.T.copy()
        v_t = ut.T.copy()
    u, v_t = _apply_sign_convention(u, v_t, sigma.size)
    return SvdFactorization(u=u, sigma=sigma, v_t=v_t, source_shape=(m, n))


def truncate(f: SvdFactorization, r_prime: int) -> SvdFactorization:
    """Zero all singular values beyond the top r_prime, keeping the full bases."""
    if not 1 <= r_prime <= f.sigma.size:
        raise RankRangeError(
            f"r_prime must be in [1, {f.sigma.size}], got {r_prime}"
        )
    sigma = f.sigma.copy()
    sigma[r_prime:] = 0.0
    return SvdFactorization(u=f.u, sigma=sigma, v_t=f.v_t, source_shape=f.source_shape)


def best_rank_r(w, r: int) -> np.ndarray:
    """Best Frobenius-norm rank-r approximation of w."""
    w = as_matrix(w)
    if not 1 <= r <= min(w.shape):
        raise RankRangeError(f"r must be in [1, {min(w.shape)}], got {r}")
    f = svd(w)
    return (f.u[:, :r] * f.sigma[:r]) @ f.v_t[:r, :]


def frobenius_norm(w) -> float:
    """Frobenius norm of a matrix."""
    w = as_matrix(w)
    return float(np.sqrt(np.sum(w * w)))


def read_matrix_text(path) -> np.ndarray:
    """Read the plain-text matrix format: first line "rows cols", then rows lines.

    Raises InvalidInputError on malformed dimensions, counts, or entries.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in (line.strip() for line in fh) if ln]
    if not lines:
        raise InvalidInputError("matrix text: empty file")
    head = lines[0].split()
    if len(head) != 2:
        raise InvalidInputError(f"matrix text: header must be 'rows cols', got {lines[0]!r}")
    try:
        rows, cols = int(head[0]), int(head[1])
    except ValueError as exc:
        raise InvalidInputError(f"matrix text: non-integer header {lines[0]!r}") from exc
    if rows < 1 or cols < 1:
        raise InvalidInputError(f"matrix text: dimensions must be positive, got {rows}x{cols}")
    if len(lines) - 1 != rows:
        raise InvalidInputError(
            f"matrix text: expected {rows} data lines, got {len(lines) - 1}"
        )
    out = np.empty((rows, cols))
    for i, line in enumerate(lines[1:]):
        parts = line.split()
        if len(parts) != cols:
            raise InvalidInputError(
                f"matrix text: line {i + 2} has {len(parts)} values, expected {cols}"
            )
        try:
            out[i] = [float(p) for p in parts]
        except ValueError as exc:
            raise InvalidInputError(f"matrix text: bad value on line {i + 2}") from exc
    return as_matrix(out, "matrix text")


def write_matrix_text(path, w) -> None:
    w = as_matrix(w)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{w.shape[0]} {w.shape[1]}\n")
        for row in w:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")
