"""Accuracy-controlled adaptive Richardson iteration in hierarchical format.

The driver :func:`solve` runs a damped Richardson iteration whose every
ingredient — operator application, right-hand-side reduction, rank
truncation, support coarsening — carries an explicit error budget on a
geometric schedule.  The outer loop halves a certified error bound
``2^{-k} * eps0`` until it falls below the target; each outer pass runs a
fixed number of inner steps whose tolerances shrink with the contraction
factor, followed by a rank/support reduction sized so the halved bound still
holds.  The returned report traces every tolerance, rank, support size and
certified residual interval, and the final iterate comes with a two-sided
a posteriori error certificate.

:func:`default_config` derives the step size, contraction factor and
reduction constants from certified operator bounds;
:func:`reduction_quasi_optimality_check` verifies, against exact spectra,
that tolerance-based reduction never needs more ranks or support than the
best approximation of a nearby reference warrants.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractionViolationError
from .hsvd import (
    ZERO_CUTOFF,
    HTensor,
    add,
    as_quasinorm,
    coarsen,
    contractions,
    edge_spectra,
    norm,
    recompress,
    restrict_support,
    scale,
    truncate_to_ranks,
    zero_htensor,
)
from .ops import LowRankOperator, apply_certified, estimate_operator_bounds, rhs_truncate

__all__ = [
    "SolveConfig",
    "SolveReport",
    "kappa_defaults",
    "default_config",
    "inner_repetitions",
    "solve",
    "error_certificate",
    "reduction_quasi_optimality_check",
]


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def kappa_defaults(d: int, alpha: float = 1.0) -> tuple[float, float, float]:
    """Reduction constants ``(kappa1, kappa2, kappa3)`` for order ``d``.

    kappa1 = 1 / (1 + (1+alpha) (sqrt(2d-3) + sqrt(d) + sqrt((2d-3) d)))
    kappa2 = sqrt(2d-3) (1+alpha) kappa1
    kappa3 = sqrt(d) (sqrt(2d-3) + 1) (1+alpha) kappa1

    The three sum to 1 exactly: kappa1 absorbs the inner-loop contraction
    slack, kappa2 pays for the rank truncation (quasi-optimality factor
    ``sqrt(2d-3)``), kappa3 for the support coarsening (factor ``sqrt(d)``
    applied after the truncation).
    """
    if d < 2:
        raise ValueError(f"order must be at least 2, got d={d}")
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    edge = math.sqrt(2 * d - 3)
    mode = math.sqrt(d)
    kappa1 = 1.0 / (1.0 + (1.0 + alpha) * (edge + mode + edge * mode))
    kappa2 = edge * (1.0 + alpha) * kappa1
    kappa3 = mode * (edge + 1.0) * (1.0 + alpha) * kappa1
    return kappa1, kappa2, kappa3


@dataclass(frozen=True)
class SolveConfig:
    """Parameters of the adaptive Richardson iteration.

    omega   step size, with ``norm(I - omega A) <= rho`` on the energy space.
    rho     contraction factor in [0, 1).
    c_a     bound on the inverse: ``norm(A^{-1}) <= c_a``.
    eps0    initial certified error bound, at least ``c_a * norm(f)``.
    kappa1..kappa3
            outer reduction constants, each in (0, 1), summing to at most 1.
    beta1, beta2
            inner recompression / coarsening multipliers (beta1 may be 0,
            beta2 must be positive).
    alpha   free parameter behind the kappa defaults.
    eps     target error bound.
    """

    omega: float
    rho: float
    c_a: float
    eps0: float
    kappa1: float
    kappa2: float
    kappa3: float
    beta1: float = 0.0
    beta2: float = 0.01
    alpha: float = 1.0
    eps: float = 1e-6

    def __post_init__(self):
        if self.omega <= 0:
            raise ValueError(f"omega must be positive, got {self.omega}")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError(f"rho must lie in [0, 1), got {self.rho}")
        if self.c_a <= 0:
            raise ValueError(f"c_a must be positive, got {self.c_a}")
        if self.eps0 < 0:
            raise ValueError(f"eps0 must be nonnegative, got {self.eps0}")
        for name in ("kappa1", "kappa2", "kappa3"):
            val = getattr(self, name)
            if not 0.0 < val < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {val}")
        total = self.kappa1 + self.kappa2 + self.kappa3
        if total > 1.0 + 1e-12:
            raise ValueError(
                f"kappa1 + kappa2 + kappa3 must be at most 1, got {total}"
            )
        if self.beta1 < 0:
            raise ValueError(f"beta1 must be nonnegative, got {self.beta1}")
        if self.beta2 <= 0:
            raise ValueError(f"beta2 must be positive, got {self.beta2}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")


def default_config(a: LowRankOperator, f: HTensor, eps: float,
                   alpha: float = 1.0, d: int | None = None) -> SolveConfig:
    """Configuration derived from certified operator bounds.

    Uses the optimal Richardson parameters for a symmetric spectrum in
    ``[lower, upper]``: ``omega = 2/(upper+lower)`` and
    ``rho = (upper-lower)/(upper+lower)``; ``c_a = 1/lower`` and
    ``eps0 = c_a * norm(f)`` (the representation norm is exact).  The kappa
    constants follow :func:`kappa_defaults` for the operator's order; the
    inner reduction keeps only the coarsening step (``beta1 = 0``,
    ``beta2 = kappa1/4``).  Operator bounds are estimated on the fly when
    the operator does not carry any.
    """
    bounds = a.bounds if a.bounds is not None else estimate_operator_bounds(a)
    lower, upper = float(bounds.lower), float(bounds.upper)
    if lower <= 0:
        raise ValueError(
            f"the lower operator bound must be positive, got {lower}"
        )
    if d is None:
        d = a.d
    kappa1, kappa2, kappa3 = kappa_defaults(d, alpha)
    return SolveConfig(
        omega=2.0 / (upper + lower),
        rho=(upper - lower) / (upper + lower),
        c_a=1.0 / lower,
        eps0=norm(f) / lower,
        kappa1=kappa1,
        kappa2=kappa2,
        kappa3=kappa3,
        beta1=0.0,
        beta2=kappa1 / 4.0,
        alpha=alpha,
        eps=eps,
    )


def inner_repetitions(cfg: SolveConfig) -> int:
    """Number of inner Richardson steps per outer pass.

    The smallest ``j`` with ``rho^j (1 + (omega+beta1+beta2) j) <= kappa1/2``:
    after that many perturbed steps the inner error has contracted to a
    ``kappa1/2`` fraction of the incoming outer bound, leaving the remaining
    kappa budget for the outer rank and support reduction.  Always at least 1
    since the target is below 1.
    """
    target = cfg.kappa1 / 2.0
    drift = cfg.omega + cfg.beta1 + cfg.beta2
    j = 0
    while cfg.rho**j * (1.0 + drift * j) > target:
        j += 1
        if j > 10**6:
            raise ValueError(
                f"no finite inner step count reaches kappa1/2 = {target}; "
                f"the configuration (omega={cfg.omega}, rho={cfg.rho}) does "
                "not contract"
            )
    if j < 1:
        raise ValueError("the inner loop needs at least one step")
    return j


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


_CSV_FIELDS = ("k", "j", "eta", "res_lo", "res_hi", "max_rank", "total_support")


def _jsonify(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        val = float(obj)
        return val if math.isfinite(val) else None
    return obj


@dataclass
class SolveReport:
    """Trace and certificates of one :func:`solve` run.

    ``steps`` holds one record per inner step (outer index ``k``, inner index
    ``j``, tolerance ``eta``, the iterate's edge ranks and per-mode support
    sizes, the certified residual interval and wall time); ``outer_steps``
    one record per completed outer reduction.  ``schedule_bound`` is the
    guaranteed error bound ``2^{-K} eps0`` at exit, ``residual_interval`` the
    a posteriori two-sided error certificate, and ``final_error_bound`` the
    smaller of the two upper bounds — never above the requested ``eps``.
    """

    eps0: float
    eps: float
    inner_per_outer: int
    outer_iterations: int
    config: dict
    steps: list = field(default_factory=list)
    outer_steps: list = field(default_factory=list)
    schedule_bound: float = 0.0
    residual_interval: tuple = (0.0, 0.0)
    final_error_bound: float = 0.0
    diagnostics: dict = field(default_factory=dict)
    total_time: float = 0.0

    def __post_init__(self):
        if self.final_error_bound > self.eps * (1.0 + 1e-9):
            raise ValueError(
                f"final certified bound {self.final_error_bound} exceeds the "
                f"requested tolerance {self.eps}"
            )

    def csv_rows(self) -> list[list[str]]:
        """Per-inner-step trace as string rows, header first.

        Contains only deterministic quantities (no wall times), so repeated
        single-threaded runs produce identical output.
        """
        rows = [list(_CSV_FIELDS)]
        for s in self.steps:
            rows.append([
                str(s["k"]),
                str(s["j"]),
                repr(float(s["eta"])),
                repr(float(s["res_lo"])),
                repr(float(s["res_hi"])),
                str(max(s["ranks"], default=0)),
                str(sum(s["supports"])),
            ])
        return rows

    def to_json_dict(self) -> dict:
        """Full report as a JSON-serializable dict (NaN mapped to null)."""
        return _jsonify({
            "eps0": self.eps0,
            "eps": self.eps,
            "inner_per_outer": self.inner_per_outer,
            "outer_iterations": self.outer_iterations,
            "config": self.config,
            "steps": self.steps,
            "outer_steps": self.outer_steps,
            "schedule_bound": self.schedule_bound,
            "residual_interval": self.residual_interval,
            "final_error_bound": self.final_error_bound,
            "diagnostics": self.diagnostics,
            "total_time": self.total_time,
        })


def _fit_decay_rate(sigma: np.ndarray) -> float:
    """Exponent ``gamma`` of ``sigma_i ~ C exp(-gamma i)``, or NaN."""
    s = np.asarray(sigma, dtype=np.float64)
    if s.size:
        s = s[s > ZERO_CUTOFF * s[0]]
    if s.size < 3:
        return float("nan")
    slope = np.polyfit(np.arange(s.size), np.log(s), 1)[0]
    return float(-slope)


def _contraction_class(pi: np.ndarray) -> tuple[float, float]:
    """Fitted algebraic tail exponent ``s`` of a contraction sequence and its
    quasi-norm ``sup_N (N+1)^s tail_N``; NaN when the sequence is too short
    or does not decay."""
    p = np.asarray(pi, dtype=np.float64)
    p = np.sort(p[p > 0.0])[::-1]
    if p.size < 4:
        return float("nan"), float("nan")
    suffix2 = np.concatenate([np.cumsum(p[::-1] ** 2)[::-1], [0.0]])
    kept = np.arange(1, p.size)
    tails = np.sqrt(suffix2[1:p.size])
    mask = tails > ZERO_CUTOFF * p[0]
    if np.count_nonzero(mask) < 3:
        return float("nan"), float("nan")
    slope = np.polyfit(np.log(kept[mask]), np.log(tails[mask]), 1)[0]
    s = float(-slope)
    if not math.isfinite(s) or s <= 1e-3:
        return float("nan"), float("nan")
    return s, float(as_quasinorm(p, s))


def _diagnostics(u: HTensor) -> dict:
    spectrum = edge_spectra(u)
    per_edge = [_fit_decay_rate(s) for s in spectrum.sigmas]
    finite = [g for g in per_edge if math.isfinite(g)]
    classes = []
    for i, pi in enumerate(contractions(u).pis):
        s, q = _contraction_class(pi)
        classes.append({"mode": i, "s": s, "quasinorm": q})
    return {
        "sigma_decay": {
            "per_edge": per_edge,
            "fitted_exponent": float(np.median(finite)) if finite else float("nan"),
        },
        "contraction_classes": classes,
    }


# ---------------------------------------------------------------------------
# the iteration
# ---------------------------------------------------------------------------


def solve(a: LowRankOperator, f: HTensor, cfg: SolveConfig) -> tuple[HTensor, SolveReport]:
    """Adaptive Richardson iteration with certified error control.

    Starting from zero, as long as the certified bound ``2^{-k} eps0``
    exceeds the target ``eps``, one outer pass runs ``inner_repetitions(cfg)``
    perturbed Richardson steps

        eta = rho^{j+1} 2^{-k} eps0
        r   = apply_certified(a, w; eta/2) - rhs_truncate(f; eta/2)
        w   <- coarsen(recompress(w - omega r; beta1 eta); beta2 eta)

    and then reduces the iterate with ``recompress`` at
    ``kappa2 2^{-(k+1)} eps0`` followed by ``coarsen`` at
    ``kappa3 2^{-(k+1)} eps0``, which halves the certified bound.  The loop
    runs exactly ``ceil(log2(eps0/eps))`` outer passes (none when
    ``eps >= eps0``, returning the zero tensor).

    Every inner residual carries a certified interval; if its lower end
    contradicts the scheduled bound — which can only happen when the assumed
    contraction ``norm(I - omega A) <= rho`` does not hold — the iteration
    aborts with :class:`ContractionViolationError` naming the offending step.
    The final iterate is certified a posteriori via
    :func:`error_certificate`; the reported bound is the smaller of the
    schedule bound and the certificate, and never exceeds ``eps``.
    """
    if a.dims != f.dims:
        raise ValueError(
            f"operator dims {a.dims} do not match right-hand side dims {f.dims}"
        )
    if a.bounds is None:
        raise ValueError(
            "solve needs certified operator bounds "
            "(see estimate_operator_bounds)"
        )
    upper = float(a.bounds.upper)
    started = time.perf_counter()
    reps = inner_repetitions(cfg)
    drift = cfg.omega + cfg.beta1 + cfg.beta2

    u = zero_htensor(f.tree, f.dims)
    steps: list[dict] = []
    outer_steps: list[dict] = []
    k = 0
    while 2.0 ** (-k) * cfg.eps0 > cfg.eps:
        level = 2.0 ** (-k) * cfg.eps0
        w = u
        for j in range(reps):
            tick = time.perf_counter()
            eta = cfg.rho ** (j + 1) * level
            aw = apply_certified(a, w, eta / 2.0)
            ft = rhs_truncate(f, eta / 2.0)
            r = add(aw, scale(-1.0, ft))
            rn = norm(r)
            res_lo = max(rn - eta, 0.0)
            res_hi = rn + eta
            # the scheduled bound on ||w_{k,j} - u|| after j perturbed steps
            bound = cfg.rho**j * (1.0 + drift * j) * level
            if res_lo / upper > bound * (1.0 + 1e-9) + 1e-12 * cfg.eps0:
                raise ContractionViolationError(
                    f"certified error at outer step {k}, inner step {j} is at "
                    f"least {res_lo / upper:.6g}, above the scheduled bound "
                    f"{bound:.6g}; the assumed contraction (omega="
                    f"{cfg.omega:.6g}, rho={cfg.rho:.6g}) does not hold"
                )
            steps.append({
                "k": k,
                "j": j,
                "eta": float(eta),
                "ranks": tuple(int(x) for x in w.ranks),
                "supports": tuple(
                    int(np.count_nonzero(p > 0.0)) for p in contractions(w).pis
                ),
                "res_lo": float(res_lo),
                "res_hi": float(res_hi),
                "wall": time.perf_counter() - tick,
            })
            w = add(w, scale(-cfg.omega, r))
            w = coarsen(recompress(w, cfg.beta1 * eta), cfg.beta2 * eta)
        tick = time.perf_counter()
        u = coarsen(
            recompress(w, cfg.kappa2 * level / 2.0),
            cfg.kappa3 * level / 2.0,
        )
        k += 1
        outer_steps.append({
            "k": k,
            "bound": 2.0 ** (-k) * cfg.eps0,
            "ranks": tuple(int(x) for x in u.ranks),
            "supports": tuple(
                int(np.count_nonzero(p > 0.0)) for p in contractions(u).pis
            ),
            "wall": time.perf_counter() - tick,
        })

    schedule_bound = 2.0 ** (-k) * cfg.eps0
    res_eta = cfg.kappa1 * cfg.eps / 8.0
    err_lo, err_hi = error_certificate(a, u, f, res_eta)
    if err_lo > schedule_bound * (1.0 + 1e-9) + 1e-12 * cfg.eps0:
        raise ContractionViolationError(
            f"final certified error is at least {err_lo:.6g}, above the "
            f"scheduled bound {schedule_bound:.6g}; operator bounds or the "
            "contraction assumption are inconsistent"
        )
    report = SolveReport(
        eps0=cfg.eps0,
        eps=cfg.eps,
        inner_per_outer=reps,
        outer_iterations=k,
        config=asdict(cfg),
        steps=steps,
        outer_steps=outer_steps,
        schedule_bound=schedule_bound,
        residual_interval=(err_lo, err_hi),
        final_error_bound=min(schedule_bound, err_hi),
        diagnostics=_diagnostics(u),
        total_time=time.perf_counter() - started,
    )
    return u, report


# ---------------------------------------------------------------------------
# a posteriori certificates
# ---------------------------------------------------------------------------


def error_certificate(a: LowRankOperator, v: HTensor, f: HTensor,
                      res_eta: float) -> tuple[float, float]:
    """Two-sided certified bound on ``norm(v - u)`` where ``A u = f``.

    Computes a residual within ``2 res_eta`` of ``A v - f`` (operator
    application and right-hand-side reduction each within ``res_eta``) and
    converts its norm through the operator bounds:

        lower_err = max(norm(r) - 2 res_eta, 0) / upper_bound
        upper_err =    (norm(r) + 2 res_eta) / lower_bound

    The true error always lies in ``[lower_err, upper_err]``.
    """
    if res_eta <= 0:
        raise ValueError(f"res_eta must be positive, got {res_eta}")
    if a.dims != v.dims or a.dims != f.dims:
        raise ValueError(
            f"operator dims {a.dims} do not match tensor dims "
            f"{v.dims} / {f.dims}"
        )
    if a.bounds is None:
        raise ValueError(
            "error certificates need operator bounds "
            "(see estimate_operator_bounds)"
        )
    lower, upper = float(a.bounds.lower), float(a.bounds.upper)
    if lower <= 0:
        raise ValueError(
            f"the lower operator bound must be positive, got {lower}"
        )
    r = add(apply_certified(a, v, res_eta), scale(-1.0, rhs_truncate(f, res_eta)))
    rn = norm(r)
    return max(rn - 2.0 * res_eta, 0.0) / upper, (rn + 2.0 * res_eta) / lower


# ---------------------------------------------------------------------------
# reduction quasi-optimality
# ---------------------------------------------------------------------------


def _prefix_ranks(spectrum, budget: float) -> list[int]:
    """Per-edge minimal ranks whose cleaned singular-value tail is within
    ``budget`` (see the matching rule in the truncation pipeline)."""
    allowance = (budget * (1.0 + 1e-12)) ** 2
    out = []
    for s in spectrum.sigmas:
        cutoff = ZERO_CUTOFF * s[0] if s.size else 0.0
        sc = np.where(s > cutoff, s, 0.0)
        tails2 = np.concatenate([np.cumsum(sc[::-1] ** 2)[::-1], [0.0]])
        out.append(int(np.argmax(tails2 <= allowance)))
    return out


def _prefix_supports(pis, budget: float):
    """Per-mode minimal kept index sets with dropped mass within ``budget``."""
    allowance = (budget * (1.0 + 1e-12)) ** 2
    sets, sizes = [], []
    for p in pis:
        order = np.argsort(-p, kind="stable")
        vals = p[order]
        suffix2 = np.concatenate([np.cumsum(vals[::-1] ** 2)[::-1], [0.0]])
        keep = int(np.argmax(suffix2 <= allowance))
        sets.append(tuple(sorted(int(i) for i in order[:keep])))
        sizes.append(keep)
    return sets, sizes


def _repair_child_products(h: HTensor, spectrum, ranks: list[int]) -> list[int]:
    """Raise child ranks until every interior rank is at most the product of
    its children's ranks (a representability requirement).  Raising a rank
    only shrinks a tail, so certified budgets are preserved.  The child with
    the larger next singular value is raised first."""
    tree = h.tree
    index = {node: e for e, node in enumerate(h.edge_list)}
    numerical = [
        int(np.count_nonzero(s > (ZERO_CUTOFF * s[0] if s.size else 0.0)))
        for s in spectrum.sigmas
    ]
    ranks = list(ranks)
    left_root, _ = tree.child_pair(tree.root)

    def rank_of(node):
        return ranks[index.get(node, index[left_root])]

    for _ in range(10000):
        bumped = False
        for node in tree.interior_nodes():
            if node == tree.root:
                continue
            cl, cr = tree.child_pair(node)
            while rank_of(node) > rank_of(cl) * rank_of(cr):
                grow = [
                    c for c in (cl, cr) if ranks[index[c]] < numerical[index[c]]
                ]
                if not grow:
                    return ranks
                best = max(
                    grow,
                    key=lambda c: spectrum.sigmas[index[c]][ranks[index[c]]],
                )
                ranks[index[best]] += 1
                bumped = True
        if not bumped:
            return ranks
    return ranks


def reduction_quasi_optimality_check(u_ref: HTensor, v: HTensor, eta: float,
                                     alpha: float = 1.0) -> dict:
    """Verify quasi-optimality of tolerance-based rank/support reduction.

    Given a reference ``u_ref`` and any ``v`` with
    ``norm(u_ref - v) <= eta``, truncating ``v`` edge by edge at tail budget
    ``(1+alpha) eta`` — aggregate certified error at most
    ``sqrt(2d-3) (1+alpha) eta`` — must stay within
    ``(1 + sqrt(2d-3)(1+alpha)) eta`` of the reference while needing at most
    the per-edge ranks that truncating ``u_ref`` itself at ``alpha eta``
    needs.  The analogous statement for contraction supports carries
    ``sqrt(d)`` in place of ``sqrt(2d-3)``.  Both are checked against exact
    spectra and exact norms; the returned report carries per-edge and
    per-mode pass flags, the measured errors and their bounds, and an
    overall ``passed`` flag.  A violated precondition raises ``ValueError``.

    Measured gaps and errors are representation norms of differences, which
    in double precision are reliable down to about ``1e-8`` of the data
    norm; every comparison carries a matching allowance.
    """
    if eta < 0:
        raise ValueError(f"eta must be >= 0, got {eta}")
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if u_ref.dims != v.dims:
        raise ValueError(
            f"reference dims {u_ref.dims} do not match candidate dims {v.dims}"
        )
    ref_norm = norm(u_ref)
    floor = 1e-7 * ref_norm
    gap = norm(add(u_ref, scale(-1.0, v)))
    if gap > eta * (1.0 + 1e-9) + floor:
        raise ValueError(
            f"precondition norm(u_ref - v) <= eta violated: gap {gap:.6g} "
            f"exceeds eta {eta:.6g}"
        )
    d = u_ref.d
    kappa_edge = math.sqrt(2 * d - 3)
    kappa_mode = math.sqrt(d)

    def within(err: float, bound: float) -> bool:
        return err <= bound * (1.0 + 1e-9) + floor

    spectrum_v = edge_spectra(v)
    spectrum_u = edge_spectra(u_ref)
    target_ranks = _repair_child_products(
        v, spectrum_v, _prefix_ranks(spectrum_v, (1.0 + alpha) * eta))
    reference_ranks = _repair_child_products(
        u_ref, spectrum_u, _prefix_ranks(spectrum_u, alpha * eta))
    truncated = truncate_to_ranks(v, target_ranks)
    rank_error = norm(add(u_ref, scale(-1.0, truncated)))
    rank_bound = (1.0 + kappa_edge * (1.0 + alpha)) * eta

    sets, target_sizes = _prefix_supports(
        contractions(v).pis, (1.0 + alpha) * eta)
    _, reference_sizes = _prefix_supports(
        contractions(u_ref).pis, alpha * eta)
    restricted = restrict_support(v, sets)
    support_error = norm(add(u_ref, scale(-1.0, restricted)))
    support_bound = (1.0 + kappa_mode * (1.0 + alpha)) * eta

    rank_report = {
        "target_ranks": tuple(target_ranks),
        "reference_ranks": tuple(reference_ranks),
        "per_edge_pass": tuple(
            t <= r for t, r in zip(target_ranks, reference_ranks)
        ),
        "error": rank_error,
        "error_bound": rank_bound,
        "error_pass": within(rank_error, rank_bound),
    }
    support_report = {
        "target_sizes": tuple(target_sizes),
        "reference_sizes": tuple(reference_sizes),
        "per_mode_pass": tuple(
            t <= r for t, r in zip(target_sizes, reference_sizes)
        ),
        "error": support_error,
        "error_bound": support_bound,
        "error_pass": within(support_error, support_bound),
    }
    return {
        "eta": float(eta),
        "alpha": float(alpha),
        "gap": gap,
        "rank": rank_report,
        "support": support_report,
        "passed": bool(
            all(rank_report["per_edge_pass"])
            and rank_report["error_pass"]
            and all(support_report["per_mode_pass"])
            and support_report["error_pass"]
        ),
    }
