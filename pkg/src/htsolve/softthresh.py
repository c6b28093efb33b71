"""Soft thresholding of hierarchical singular values and the thresholded
Richardson iteration.

Soft thresholding shrinks every singular value of an edge matricization by
``eta`` (removing the ones that hit zero) instead of cutting the spectrum at a
rank.  Composed over all effective edges it is a non-expansive map, which makes
it safe to apply inside a fixed-point iteration at any threshold: the
iteration stays convergent and the iterates inherit quasi-optimal ranks, with
the threshold steering the rank/accuracy trade-off.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from htsolve.errors import ContractionViolationError
from htsolve.hsvd import (
    HTensor,
    _project,
    _projection_data,
    add,
    norm,
    orthogonalize,
    recompress,
    scale,
    zero_htensor,
)
from htsolve.ops import LowRankOperator, apply_certified

__all__ = [
    "soft_scalar",
    "soft_threshold_edge",
    "soft_threshold",
    "StIterState",
    "st_solve",
]


def soft_scalar(x, eta: float):
    """sgn(x) * max(|x| - eta, 0), elementwise on arrays."""
    if eta < 0:
        raise ValueError(f"threshold must be >= 0, got {eta}")
    x = np.asarray(x, dtype=np.float64)
    out = np.sign(x) * np.maximum(np.abs(x) - eta, 0.0)
    return float(out) if out.ndim == 0 else out


def soft_threshold_edge(h: HTensor, edge: int, eta: float) -> HTensor:
    """Shrink the singular values of one edge matricization by ``eta``.

    ``edge`` indexes the effective edge list.  Values shrunk to zero are
    removed, so the edge rank drops accordingly; the remaining singular
    directions are kept and rescaled by ``s_eta(sigma)/sigma``, which realizes
    the proximal map of the nuclear norm at this edge exactly.
    """
    if eta < 0:
        raise ValueError(f"threshold must be >= 0, got {eta}")
    edges = h.edge_list
    if not 0 <= edge < len(edges.edges):
        raise IndexError(f"edge index {edge} out of range (0..{len(edges.edges) - 1})")
    ho = orthogonalize(h)
    spectrum, vectors = _projection_data(ho)
    sig = spectrum.sigmas[edge]
    shrunk = soft_scalar(sig, eta)
    k = int(np.count_nonzero(shrunk > 0.0))
    if k == 0:
        return zero_htensor(h.tree, h.dims)
    # sigma is nonincreasing, so the survivors are a prefix
    node_ranks = {node: vec.shape[1] for node, vec in vectors.items()}
    tree = h.tree
    left, right = tree.child_pair(tree.root)
    node = edges.edges[edge]
    root_edge = node == left
    if root_edge:
        node_ranks[left] = k
        node_ranks[right] = k  # the two root children share the root edge
    else:
        node_ranks[node] = k
    proj = _project(ho, vectors, node_ranks)
    factors = shrunk[:k] / sig[:k]
    if root_edge:
        root = factors[:, None] * proj.root_transfer
        return HTensor(tree=tree, dims=h.dims, frames=proj.frames,
                       transfer=proj.transfer, root_transfer=root)
    parent = tree.parent_map()[node]
    pleft, _ = tree.child_pair(parent)
    axis = 0 if node == pleft else 1
    transfer = dict(proj.transfer)
    shape = [1, 1, 1]
    shape[axis] = k
    transfer[parent] = transfer[parent] * factors.reshape(shape)
    return HTensor(tree=tree, dims=h.dims, frames=proj.frames,
                   transfer=transfer, root_transfer=proj.root_transfer)


def soft_threshold(h: HTensor, eta: float) -> HTensor:
    """Apply the edge shrinkage sequentially over all effective edges, in the
    fixed enumeration order.  Non-expansive for every ``eta >= 0``."""
    if eta < 0:
        raise ValueError(f"threshold must be >= 0, got {eta}")
    for i in range(len(h.edge_list.edges)):
        h = soft_threshold_edge(h, i, eta)
        if h.root_transfer.size == 0 or norm(h) == 0.0:
            return zero_htensor(h.tree, h.dims)
    return h


@dataclass
class StIterState:
    """State of the soft-thresholded Richardson iteration.

    ``alpha`` is nonincreasing: each step either halves it (when the step
    size falls below the residual-proportional trigger) or keeps it.
    """

    u: HTensor
    alpha: float
    omega: float
    xi: float
    bbar: float
    n: int = 0


def st_solve(a: LowRankOperator, f: HTensor, omega: float, xi: float,
             bbar: float | None = None, eps: float = 1e-6,
             res_tol_factor: float = 0.1, max_iter: int = 500):
    """Soft-thresholded Richardson iteration ``u <- S_alpha(u - omega (A u - f))``.

    The caller certifies ``|I - omega A| <= xi < 1`` and ``bbar > |A|``
    (``bbar`` defaults to the operator's ``bounds.upper``).  The threshold
    starts at
    ``omega |f| / (d - 1)`` and is halved whenever
    ``|u_new - u| <= (1 - xi) / (xi bbar) |A u_new - f|``, evaluated on the
    pessimistic side of the certified residual interval.  The iteration stops
    when the certified residual bound implies ``|u - u*| <= eps`` (coercivity
    ``lambda_min >= (1 - xi) / omega``).  Returns ``(u, trace)`` with one
    record per step: threshold, max rank, residual interval, halving flag.

    Raises :class:`ContractionViolationError` when the certified residual
    grows past twice the best value seen in the current threshold period, or
    when ``max_iter`` is exhausted.

    Residual norms are evaluated from the low-rank representation of
    ``A u - f``, which is accurate down to roughly ``1e-8 * |f|`` in double
    precision (squared-norm cancellation); request ``eps`` above that level.
    """
    if not 0.0 < xi < 1.0:
        raise ValueError(f"xi must be in (0, 1), got {xi}")
    if omega <= 0.0:
        raise ValueError(f"omega must be positive, got {omega}")
    if eps <= 0.0:
        raise ValueError(f"eps must be positive, got {eps}")
    if not 0.0 < res_tol_factor < 1.0:
        raise ValueError(f"res_tol_factor must be in (0, 1), got {res_tol_factor}")
    if bbar is None:
        if a.bounds is None:
            raise ValueError("bbar not given and the operator has no bounds")
        bbar = float(a.bounds.upper)
    if bbar <= 0.0:
        raise ValueError(f"bbar must be positive, got {bbar}")
    if a.dims != f.dims:
        raise ValueError(f"operator dims {a.dims} do not match {f.dims}")

    nf = norm(f)
    if nf == 0.0:
        return zero_htensor(f.tree, f.dims), []
    d = f.d
    res_target = eps * (1.0 - xi) / omega  # certified stop: ||r|| below this
    state = StIterState(u=zero_htensor(f.tree, f.dims),
                        alpha=omega * nf / max(d - 1, 1),
                        omega=omega, xi=xi, bbar=bbar)
    trigger = (1.0 - xi) / (xi * bbar)
    trace: list[dict] = []
    # residual of u^0 = 0 is exactly -f
    r, res_lo, res_hi = scale(-1.0, f), nf, nf
    r_est = nf
    period_best_hi = np.inf
    period_len = 0
    for n in range(1, max_iter + 1):
        if res_hi * omega / (1.0 - xi) <= eps:
            return state.u, trace
        u_new = soft_threshold(add(state.u, scale(-omega, r)), state.alpha)
        step = norm(add(u_new, scale(-1.0, state.u)))
        # fresh certified residual at the new iterate
        tol = res_tol_factor * max(r_est, res_target / 2.0)
        if not a.has_expsum:
            tol = 0.0
        w = apply_certified(a, u_new, tol)
        r = recompress(add(w, scale(-1.0, f)), 0.0)
        rn = norm(r)
        res_lo, res_hi = max(rn - tol, 0.0), rn + tol
        r_est = max(rn, res_target / 2.0)
        halved = step <= trigger * res_lo
        state.u, state.n = u_new, n
        trace.append({"n": n, "alpha": state.alpha,
                      "max_rank": max(u_new.ranks) if u_new.ranks else 0,
                      "res_lo": res_lo, "res_hi": res_hi, "halved": halved})
        period_len += 1
        period_best_hi = min(period_best_hi, res_hi)
        if period_len >= 3 and res_lo > 2.0 * period_best_hi:
            raise ContractionViolationError(
                f"residual grew from {period_best_hi:.3g} to at least "
                f"{res_lo:.3g} within one threshold period (iteration {n}); "
                f"the configuration is not a certified contraction "
                f"(check omega, xi={xi}, bbar={bbar})"
            )
        if halved:
            state.alpha /= 2.0
            period_best_hi = np.inf
            period_len = 0
    raise ContractionViolationError(
        f"certified residual bound {res_hi:.3g} did not reach the stopping "
        f"level {res_target:.3g} within {max_iter} iterations "
        f"(last threshold {state.alpha:.3g}); the iteration may be "
        f"non-contractive or max_iter too small"
    )