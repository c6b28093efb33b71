"""Adaptive Richardson solver: schedules, certificates, quasi-optimality."""

import json
import math
from pathlib import Path

import numpy as np
import pytest

from htsolve.errors import ContractionViolationError
from htsolve.htree import build_balanced_tree
from htsolve.hsvd import (
    add,
    from_dense,
    norm,
    random_htensor,
    scale,
    to_dense,
    zero_htensor,
)
from htsolve.ops import LowRankOperator, OperatorBounds, identity_operator
from htsolve.problems import dense_solve, load_problem
from htsolve.solver import (
    SolveConfig,
    SolveReport,
    default_config,
    error_certificate,
    inner_repetitions,
    kappa_defaults,
    reduction_quasi_optimality_check,
    solve,
)

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


def uniform_rank_one(dims):
    """Unit-norm rank-1 tensor with equal entries (coarsening never trims it
    at the tolerances the solver schedules for it)."""
    tree = build_balanced_tree(len(dims))
    vecs = [np.ones(n) / np.sqrt(n) for n in dims]
    dense = vecs[0]
    for v in vecs[1:]:
        dense = np.multiply.outer(dense, v)
    return from_dense(dense, tree)


@pytest.fixture(scope="module")
def diffusion_d3():
    problem = load_problem(FIXTURES / "diffusion_d3_sine.ini")
    return problem, dense_solve(problem)


@pytest.fixture(scope="module")
def diffusion_d2():
    problem = load_problem(FIXTURES / "diffusion_d2_sine.ini")
    return problem, dense_solve(problem)


@pytest.fixture(scope="module")
def parametric_d2():
    problem = load_problem(FIXTURES / "parametric_d2.ini")
    return problem, dense_solve(problem)


class TestKappaDefaults:
    def test_pinned_d3(self):
        k1, k2, k3 = kappa_defaults(3, alpha=1.0)
        assert k1 == pytest.approx(1.0 / (7.0 + 4.0 * math.sqrt(3.0)), rel=1e-14)
        assert k2 == pytest.approx(math.sqrt(3.0) * 2.0 * k1, rel=1e-14)
        assert k3 == pytest.approx(math.sqrt(3.0) * (math.sqrt(3.0) + 1.0) * 2.0 * k1,
                                   rel=1e-14)

    @pytest.mark.parametrize("d", [2, 3, 4, 6])
    @pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0])
    def test_sum_to_one(self, d, alpha):
        assert sum(kappa_defaults(d, alpha)) == pytest.approx(1.0, abs=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError, match="order"):
            kappa_defaults(1)
        with pytest.raises(ValueError, match="alpha"):
            kappa_defaults(3, alpha=0.0)


class TestSolveConfig:
    def valid(self, **overrides):
        k1, k2, k3 = kappa_defaults(2)
        fields = dict(omega=0.5, rho=0.5, c_a=2.0, eps0=1.0,
                      kappa1=k1, kappa2=k2, kappa3=k3,
                      beta1=0.0, beta2=0.01, alpha=1.0, eps=1e-4)
        fields.update(overrides)
        return SolveConfig(**fields)

    def test_accepts_defaults(self):
        cfg = self.valid()
        assert cfg.rho == 0.5
        assert cfg.kappa1 + cfg.kappa2 + cfg.kappa3 <= 1.0 + 1e-12

    def test_accepts_rho_zero(self):
        assert self.valid(rho=0.0).rho == 0.0

    @pytest.mark.parametrize("field,value,match", [
        ("omega", 0.0, "omega"),
        ("omega", -1.0, "omega"),
        ("rho", 1.0, "rho"),
        ("rho", -0.1, "rho"),
        ("c_a", 0.0, "c_a"),
        ("eps0", -1.0, "eps0"),
        ("kappa1", 0.0, "kappa1"),
        ("kappa2", 1.0, "kappa2"),
        ("kappa3", -0.2, "kappa3"),
        ("beta1", -1e-3, "beta1"),
        ("beta2", 0.0, "beta2"),
        ("alpha", 0.0, "alpha"),
        ("eps", 0.0, "eps"),
    ])
    def test_range_validation(self, field, value, match):
        with pytest.raises(ValueError, match=match):
            self.valid(**{field: value})

    def test_kappa_budget(self):
        with pytest.raises(ValueError, match="at most 1"):
            self.valid(kappa1=0.5, kappa2=0.4, kappa3=0.2)


class TestDefaultConfig:
    def test_identity(self):
        f = uniform_rank_one((8, 8))
        cfg = default_config(identity_operator((8, 8)), f, eps=0.1)
        assert cfg.omega == 1.0
        assert cfg.rho == 0.0
        assert cfg.c_a == 1.0
        assert cfg.eps0 == pytest.approx(norm(f), rel=1e-14)
        assert cfg.beta1 == 0.0
        assert cfg.beta2 == pytest.approx(cfg.kappa1 / 4.0, rel=1e-14)
        assert cfg.eps == 0.1

    def test_optimal_richardson_formulas(self):
        a = LowRankOperator((4, 4), [(None, None)], symmetric=True,
                            bounds=OperatorBounds(2.0, 8.0, True))
        cfg = default_config(a, uniform_rank_one((4, 4)), eps=1e-3)
        assert cfg.omega == pytest.approx(0.2, rel=1e-14)
        assert cfg.rho == pytest.approx(0.6, rel=1e-14)
        assert cfg.c_a == pytest.approx(0.5, rel=1e-14)

    def test_kappas_match_order(self):
        f = uniform_rank_one((4, 4, 4))
        cfg = default_config(identity_operator((4, 4, 4)), f, eps=0.1, alpha=2.0)
        k1, k2, k3 = kappa_defaults(3, alpha=2.0)
        assert (cfg.kappa1, cfg.kappa2, cfg.kappa3) == (k1, k2, k3)

    def test_estimates_missing_bounds(self):
        a = LowRankOperator((4, 4), [(2.0 * np.eye(4), None)], symmetric=True)
        cfg = default_config(a, uniform_rank_one((4, 4)), eps=0.1)
        assert cfg.omega == pytest.approx(0.5, rel=1e-9)
        assert cfg.rho == pytest.approx(0.0, abs=1e-9)

    def test_rejects_nonpositive_lower(self):
        a = LowRankOperator((4, 4), [(None, None)], symmetric=True,
                            bounds=OperatorBounds(0.0, 1.0, True))
        with pytest.raises(ValueError, match="lower"):
            default_config(a, uniform_rank_one((4, 4)), eps=0.1)


class TestInnerRepetitions:
    def test_identity_needs_one_step(self):
        f = uniform_rank_one((8, 8))
        cfg = default_config(identity_operator((8, 8)), f, eps=0.1)
        assert inner_repetitions(cfg) == 1

    def test_hand_computed_case(self):
        # rho=1/2, drift=1.1, target kappa1/2=0.25:
        # j=4: 2^-4 * 5.4 = 0.3375 > 0.25; j=5: 2^-5 * 6.5 = 0.203 <= 0.25
        cfg = SolveConfig(omega=1.0, rho=0.5, c_a=1.0, eps0=1.0,
                          kappa1=0.5, kappa2=0.2, kappa3=0.2,
                          beta1=0.0, beta2=0.1, alpha=1.0, eps=0.1)
        assert inner_repetitions(cfg) == 5

    def test_monotone_in_rho(self):
        def reps(rho):
            k1, k2, k3 = kappa_defaults(2)
            cfg = SolveConfig(omega=0.5, rho=rho, c_a=1.0, eps0=1.0,
                              kappa1=k1, kappa2=k2, kappa3=k3,
                              beta2=k1 / 4.0, eps=0.1)
            return inner_repetitions(cfg)

        assert reps(0.3) < reps(0.9)


class TestSolveIdentity:
    def test_single_outer_pass_exact(self):
        f = uniform_rank_one((8, 8))
        a = identity_operator((8, 8))
        cfg = default_config(a, f, eps=0.6 * norm(f))
        u, report = solve(a, f, cfg)
        assert report.outer_iterations == 1
        assert report.inner_per_outer == 1
        assert np.abs(to_dense(u) - to_dense(f)).max() <= 1e-14

    @pytest.mark.parametrize("eps_factor", [0.6, 1e-1, 1e-3])
    def test_exact_at_any_tolerance(self, eps_factor):
        f = uniform_rank_one((8, 8))
        a = identity_operator((8, 8))
        cfg = default_config(a, f, eps=eps_factor * norm(f))
        u, report = solve(a, f, cfg)
        assert report.outer_iterations == math.ceil(math.log2(1.0 / eps_factor))
        assert norm(add(u, scale(-1.0, f))) <= 1e-13

    def test_loose_tolerance_returns_zero(self):
        f = uniform_rank_one((8, 8))
        a = identity_operator((8, 8))
        cfg = default_config(a, f, eps=1.5 * norm(f))
        u, report = solve(a, f, cfg)
        assert report.outer_iterations == 0
        assert norm(u) == 0.0
        assert report.final_error_bound <= cfg.eps

    def test_zero_rhs(self):
        tree = build_balanced_tree(2)
        f = zero_htensor(tree, (8, 8))
        a = identity_operator((8, 8))
        cfg = default_config(a, f, eps=1e-3)
        u, report = solve(a, f, cfg)
        assert report.outer_iterations == 0
        assert norm(u) == 0.0


class TestSolveDiffusion:
    def test_dense_oracle_at_1e4(self, diffusion_d3):
        problem, u_dense = diffusion_d3
        cfg = default_config(problem.operator, problem.rhs, eps=1e-4)
        u, report = solve(problem.operator, problem.rhs, cfg)
        err = np.linalg.norm(to_dense(u) - u_dense)
        assert err <= 1e-4
        assert err <= report.final_error_bound
        assert report.final_error_bound <= 1e-4
        assert report.residual_interval[0] <= err <= report.residual_interval[1]

    def test_exact_outer_iteration_count(self, diffusion_d3):
        problem, _ = diffusion_d3
        for eps in (1e-1, 1e-2):
            cfg = default_config(problem.operator, problem.rhs, eps=eps)
            _, report = solve(problem.operator, problem.rhs, cfg)
            assert report.outer_iterations == math.ceil(math.log2(cfg.eps0 / eps))

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_monotone_certified_progress(self, diffusion_d3, k):
        # running to eps just above eps0 * 2^-k stops after exactly k outer
        # passes and returns the outer iterate u_k (the schedule does not
        # depend on eps); its measured error must respect the certified
        # bound 2^-k eps0
        problem, u_dense = diffusion_d3
        cfg0 = default_config(problem.operator, problem.rhs, eps=1.0)
        eps_k = cfg0.eps0 * 2.0 ** (-k) * 1.001
        cfg = default_config(problem.operator, problem.rhs, eps=eps_k)
        u, report = solve(problem.operator, problem.rhs, cfg)
        assert report.outer_iterations == k
        assert np.linalg.norm(to_dense(u) - u_dense) <= cfg.eps0 * 2.0 ** (-k)

    def test_eta_schedule_and_trace_shape(self, diffusion_d2):
        problem, u_dense = diffusion_d2
        cfg = default_config(problem.operator, problem.rhs, eps=1e-2)
        u, report = solve(problem.operator, problem.rhs, cfg)
        assert cfg.beta1 == 0.0
        assert len(report.steps) == report.outer_iterations * report.inner_per_outer
        for s in report.steps:
            want = cfg.rho ** (s["j"] + 1) * (2.0 ** (-s["k"]) * cfg.eps0)
            assert s["eta"] == pytest.approx(want, rel=1e-13)
            assert s["res_lo"] <= s["res_hi"]
            assert len(s["ranks"]) == len(problem.operator.dims) * 2 - 3
            assert len(s["supports"]) == len(problem.operator.dims)
        # the outer reduction keeps ranks at or below the inner-loop peak
        peak = max(max(s["ranks"]) for s in report.steps)
        assert max(report.outer_steps[-1]["ranks"]) <= peak
        assert np.linalg.norm(to_dense(u) - u_dense) <= 1e-2


class TestSolveValidation:
    def test_dimension_mismatch(self):
        a = identity_operator((8, 8))
        f = uniform_rank_one((8, 4))
        cfg = SolveConfig(omega=1.0, rho=0.0, c_a=1.0, eps0=1.0,
                          kappa1=0.1, kappa2=0.2, kappa3=0.6, eps=0.5)
        with pytest.raises(ValueError, match="do not match"):
            solve(a, f, cfg)

    def test_missing_bounds(self):
        a = LowRankOperator((8, 8), [(None, None)], symmetric=True)
        f = uniform_rank_one((8, 8))
        cfg = SolveConfig(omega=1.0, rho=0.0, c_a=1.0, eps0=1.0,
                          kappa1=0.1, kappa2=0.2, kappa3=0.6, eps=0.5)
        with pytest.raises(ValueError, match="bounds"):
            solve(a, f, cfg)

    def test_contraction_violation_diagnosed(self):
        # conspicuously wrong bounds: the operator is 2I but claims
        # spectrum [0.5, 0.6], so the scheduled contraction cannot hold
        a = LowRankOperator((6, 6), [(2.0 * np.eye(6), None)], symmetric=True,
                            bounds=OperatorBounds(0.5, 0.6, False))
        f = uniform_rank_one((6, 6))
        cfg = default_config(a, f, eps=1e-3)
        with pytest.raises(ContractionViolationError, match="outer step 0"):
            solve(a, f, cfg)


class TestSolveReport:
    def test_csv_rows_deterministic(self, diffusion_d2):
        problem, _ = diffusion_d2
        cfg = default_config(problem.operator, problem.rhs, eps=1e-1)
        _, r1 = solve(problem.operator, problem.rhs, cfg)
        _, r2 = solve(problem.operator, problem.rhs, cfg)
        rows = r1.csv_rows()
        assert rows[0] == ["k", "j", "eta", "res_lo", "res_hi",
                           "max_rank", "total_support"]
        assert len(rows) == len(r1.steps) + 1
        assert rows == r2.csv_rows()

    def test_json_dict_strictly_serializable(self, diffusion_d2):
        problem, _ = diffusion_d2
        cfg = default_config(problem.operator, problem.rhs, eps=1e-1)
        _, report = solve(problem.operator, problem.rhs, cfg)
        payload = report.to_json_dict()
        text = json.dumps(payload, allow_nan=False)
        back = json.loads(text)
        assert back["outer_iterations"] == report.outer_iterations
        assert back["config"]["eps"] == cfg.eps
        assert len(back["steps"]) == len(report.steps)
        assert "sigma_decay" in back["diagnostics"]

    def test_final_bound_invariant_enforced(self):
        with pytest.raises(ValueError, match="exceeds"):
            SolveReport(eps0=1.0, eps=1e-3, inner_per_outer=1,
                        outer_iterations=1, config={},
                        final_error_bound=2e-3)


class TestErrorCertificate:
    def test_dense_solution_interval_near_zero(self, diffusion_d2):
        # scaled down so the requested certificate sits above the
        # floating-point floor of Gram-based norms (~1e-8 relative)
        problem, u_dense = diffusion_d2
        s = 1e-3
        f = scale(s, problem.rhs)
        v = from_dense(s * u_dense, problem.rhs.tree)
        lo, hi = error_certificate(problem.operator, v, f, res_eta=1e-10)
        lower = problem.operator.bounds.lower
        assert lo == 0.0
        assert hi <= 4.2e-10 / lower

    def test_zero_candidate_brackets_solution_norm(self, diffusion_d2):
        problem, u_dense = diffusion_d2
        v = zero_htensor(problem.rhs.tree, problem.rhs.dims)
        res_eta = 1e-6
        lo, hi = error_certificate(problem.operator, v, problem.rhs, res_eta)
        bounds = problem.operator.bounds
        true_err = np.linalg.norm(u_dense)
        assert lo <= true_err <= hi
        assert hi >= (norm(problem.rhs) - 2.0 * res_eta) / bounds.lower

    @pytest.mark.parametrize("fixture_name", ["diffusion_d2", "parametric_d2"])
    def test_contains_measured_error(self, fixture_name, request):
        problem, u_dense = request.getfixturevalue(fixture_name)
        rng = np.random.default_rng(hash(fixture_name) % 2**32)
        tree = problem.rhs.tree
        for trial in range(50):
            scale_exp = rng.uniform(-6.0, 0.0)
            delta = rng.standard_normal(u_dense.shape)
            delta *= 10.0**scale_exp / np.linalg.norm(delta)
            v = from_dense(u_dense + delta, tree)
            lo, hi = error_certificate(problem.operator, v, problem.rhs,
                                       res_eta=1e-5)
            err = np.linalg.norm(delta)
            assert lo <= err * (1.0 + 1e-9) + 1e-12
            assert hi >= err * (1.0 - 1e-9)

    def test_validation(self, diffusion_d2):
        problem, _ = diffusion_d2
        v = zero_htensor(problem.rhs.tree, problem.rhs.dims)
        with pytest.raises(ValueError, match="res_eta"):
            error_certificate(problem.operator, v, problem.rhs, res_eta=0.0)
        bare = LowRankOperator(problem.operator.dims,
                               [(None,) * len(problem.operator.dims)],
                               symmetric=True)
        with pytest.raises(ValueError, match="bounds"):
            error_certificate(bare, v, problem.rhs, res_eta=1e-6)


class TestReductionQuasiOptimality:
    def test_identical_pair_passes(self):
        rng = np.random.default_rng(7)
        tree = build_balanced_tree(2)
        u_ref = random_htensor(tree, (6, 6), 3, rng)
        for eta in (0.0, 0.3):
            report = reduction_quasi_optimality_check(u_ref, u_ref, eta)
            assert report["passed"]
            # a self-gap is representation noise, ~1e-8 of the norm
            assert report["gap"] <= 1e-7 * norm(u_ref)

    def test_known_spectrum_d2(self):
        # u_ref has singular values (1, 0.6, 0.3, 0.1); at alpha*eta = 0.2
        # its minimal rank is 3 (tail beyond rank 2 is ~0.316), so the
        # perturbed tensor truncated at (1+alpha)*eta = 0.4 must need <= 3
        tree = build_balanced_tree(2)
        sigma = np.array([1.0, 0.6, 0.3, 0.1])
        u_ref = from_dense(np.diag(np.concatenate([sigma, [0.0]])), tree)
        rng = np.random.default_rng(3)
        e = rng.standard_normal((5, 5))
        e *= 0.15 / np.linalg.norm(e)
        v = from_dense(np.diag(np.concatenate([sigma, [0.0]])) + e, tree)
        report = reduction_quasi_optimality_check(u_ref, v, eta=0.2, alpha=1.0)
        assert report["rank"]["reference_ranks"] == (3,)
        assert report["rank"]["target_ranks"][0] <= 3
        assert report["rank"]["error_bound"] == pytest.approx(0.6, rel=1e-12)
        assert report["passed"]

    def test_randomized_d3_no_violations(self):
        rng = np.random.default_rng(11)
        tree = build_balanced_tree(3)
        dims = (5, 6, 7)
        violations = 0
        for trial in range(200):
            u_ref = random_htensor(tree, dims, int(rng.integers(2, 5)), rng)
            bump = random_htensor(tree, dims, int(rng.integers(1, 3)), rng)
            gap_target = norm(u_ref) * 10.0 ** rng.uniform(-4.0, -0.5)
            v = add(u_ref, scale(gap_target / norm(bump), bump))
            eta = norm(add(u_ref, scale(-1.0, v))) * rng.uniform(1.0, 5.0)
            alpha = float(rng.choice([0.5, 1.0, 2.0]))
            report = reduction_quasi_optimality_check(u_ref, v, eta, alpha)
            if not report["passed"]:
                violations += 1
        assert violations == 0

    def test_precondition_enforced(self):
        rng = np.random.default_rng(5)
        tree = build_balanced_tree(2)
        u_ref = random_htensor(tree, (6, 6), 2, rng)
        bump = random_htensor(tree, (6, 6), 2, rng)
        v = add(u_ref, scale(0.5 / norm(bump), bump))
        with pytest.raises(ValueError, match="precondition"):
            reduction_quasi_optimality_check(u_ref, v, eta=0.1)

    def test_validation(self):
        rng = np.random.default_rng(5)
        tree = build_balanced_tree(2)
        u_ref = random_htensor(tree, (6, 6), 2, rng)
        with pytest.raises(ValueError, match="eta"):
            reduction_quasi_optimality_check(u_ref, u_ref, eta=-1.0)
        with pytest.raises(ValueError, match="alpha"):
            reduction_quasi_optimality_check(u_ref, u_ref, eta=0.1, alpha=0.0)
        other = random_htensor(tree, (6, 5), 2, rng)
        with pytest.raises(ValueError, match="dims"):
            reduction_quasi_optimality_check(u_ref, other, eta=10.0)
