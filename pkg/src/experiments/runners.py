"""Experiment classes behind the CLI subcommands (everything except ``verify``)."""
import itertools
from typing import Dict

import numpy as np
import pandas as pd

from src.data.artifact_writer import CheckResult
from src.experiments.base import Experiment, constant_gammas, float_list, int_list
from src.features.catalyzing_function import CatalyzingFunction
from src.models.branching import (AtomicMeasure, laplace_functional, poissonize, run_renorm_branching, step_poisson_cluster,
                                  weighting_identity)
from src.models.campbell import (immortal_chain_path, immortal_chain_step, return_fraction, simulate_campbell_batch,
                                 simulate_campbell_tree, size_biased_law, size_biased_mean, size_biased_resample)
from src.models.embedded import (H_KINDS, build_contexts, catalyzing_for, offspring_mean, poissonization_counts,
                                 predicted_survival_h01, run_embedded_batch, run_embedded_h00, run_embedded_h01,
                                 run_embedded_h11, weighted_mass_statistics)
from src.models.hierarchical import (block_average, block_means, chain_regression, interaction_chain_extract,
                                     interaction_chain_frame, recurrence_test, simulate_hierarchical)
from src.models.loglaplace import (apply_U, check_shape_preservation, chi_m, cluster_integrals, constant_closed_form,
                                   injected_psi_samples, iterate_U, jensen_bound_hm, large_gamma_bound, linear_bound,
                                   sample_cluster, apply_U_dual_hm)
from src.models.pde_flow import (CauchyConfig, FlowConfig, GridField1D, PStarConfig, classify_fixed_point,
                                 initial_field_for_case, known_fixed_point, mesh_convergence_ratio, run_cauchy_1d,
                                 run_flow_2d, solve_p_star, verify_fixed_point)
from src.models.renorm import (CatalyticDiffusionMatrix, F_c, MigrationSchedule, alpha_recursion, effective_boundary,
                               estimate_nu_moments, iterate_renorm, iterated_kernel_sample, rescaled_F,
                               schedule_from_ck)
from src.models.wf_core import (BetaInvariantLaw, WfParams, couple_wf_ensemble, couple_wf_pair,
                                dual_chain_psi_infinity, ordering_violation_fraction, sample_invariant,
                                simulate_wf_path)
from src.utils.error_handler import ErrorHandler, ParameterError
from src.utils.statistics import count_law_test, ks_two_sample, mean_estimate


class InvariantLawExperiment(Experiment):
    name = "invariant-law"
    help = "Beta invariant law, WF path averages, couplings and the dual chain"
    operations = ("simulate_wf_path", "sample_invariant", "invariant_moment", "couple_wf_pair",
                  "dual_chain_psi_infinity")

    @staticmethod
    def add_arguments(parser):
        parser.add_argument('--gamma', type=float_list, default=[0.5, 1.0, 2.0])
        parser.add_argument('--x', type=float_list, default=[0.1, 0.3, 0.5])
        parser.add_argument('--draws', type=int, default=100000)
        parser.add_argument('--horizon', type=float, default=20.0, help="length of each WF path")
        parser.add_argument('--coupling-paths', type=int, default=1000)
        parser.add_argument('--dual-runs', type=int, default=2000)

    @ErrorHandler.handle_errors("InvariantLawExperiment")
    def run(self) -> int:
        a = self.args
        wf_dt = a.dt or float(self.ctx.config.get('wf.dt', 1e-4))
        rows = []
        for i, (gamma, x) in enumerate(itertools.product(a.gamma, a.x)):
            law = BetaInvariantLaw(gamma, x)
            draws = sample_invariant(law, self.ctx.rng("invariant-law.draws", i), size=a.draws)
            for n in (1, 2, 3):
                est = mean_estimate(draws ** n)
                rows.append((gamma, x, f"moment_{n}", law.moment(n), est.mean, est.std_error))
            het = mean_estimate(draws * (1.0 - draws))
            rows.append((gamma, x, "heterozygosity", law.heterozygosity(), het.mean, het.std_error))
            path = simulate_wf_path(WfParams(x, gamma, wf_dt), x, a.horizon, self.ctx.rng("invariant-law.path", i))
            rows.append((gamma, x, "path_mean", x, path.time_average(), np.nan))
            rows.append((gamma, x, "path_heterozygosity", law.heterozygosity(),
                         path.time_average(lambda y: y * (1.0 - y)), np.nan))
        frame = pd.DataFrame(rows, columns=["gamma", "x", "statistic", "exact", "empirical", "std_error"])
        self.ctx.writer.write_frame("invariant_law.csv", frame)

        coupling = []
        for j, dt in enumerate((4e-4, 2e-4, 1e-4)):
            low, high = couple_wf_ensemble(WfParams(0.3, 1.0, dt), WfParams(0.5, 1.0, dt), 0.2, 0.25, 1.0,
                                           a.coupling_paths, self.ctx.rng("invariant-law.coupling", j))
            coupling.append({"dt": dt, "violation_fraction": ordering_violation_fraction(low, high)})
        self.ctx.writer.write_frame("coupling_violations.csv", pd.DataFrame(coupling))
        low, high = couple_wf_pair(WfParams(0.5, 1.0, wf_dt), WfParams(0.5, 1.0, wf_dt), 0.3, 0.7, 1.0,
                                   self.ctx.rng("invariant-law.pair"))
        self.ctx.writer.write_frame("coupled_pair.csv", pd.DataFrame({"t": low.times, "low": low.values,
                                                                      "high": high.values}))

        dual = []
        for k, (gamma, m) in enumerate(itertools.product(a.gamma, range(0, 5))):
            rng = self.ctx.rng("invariant-law.dual", k)
            psi = np.array([dual_chain_psi_infinity(m, gamma, False, rng) for _ in range(a.dual_runs)])
            est = mean_estimate(psi)
            exact = float(np.sum(1.0 / (1.0 + np.arange(m) * gamma)))
            dual.append({"gamma": gamma, "m": m, "exact_mean": exact, "mean": est.mean, "std_error": est.std_error})
        self.ctx.writer.write_frame("dual_chain.csv", pd.DataFrame(dual))
        self.logger.info(f"Invariant-law experiment wrote {len(rows)} moment rows")
        return 0


class LogLaplaceExperiment(Experiment):
    name = "loglaplace"
    help = "Cluster moments, U_gamma p on the grid, dual-chain oracle and bounds"
    operations = ("sample_cluster", "apply_U", "apply_U_dual_hm", "iterate_U", "chi_m", "large_gamma_bound",
                  "check_shape_preservation")

    @staticmethod
    def add_arguments(parser):
        parser.add_argument('--gamma', type=float, default=1.0)
        parser.add_argument('--p', default="x", help="catalyzing function as an expression in x")
        parser.add_argument('--power', type=int, default=7, help="power m of h_m for the dual-chain oracle")
        parser.add_argument('--dual-runs', type=int, default=100000)
        parser.add_argument('--cluster-replicas', type=int, default=20000)
        parser.add_argument('--iterate', type=int, default=0, help="stages of U_gamma iteration")

    @ErrorHandler.handle_errors("LogLaplaceExperiment")
    def run(self) -> int:
        a, ctx = self.args, self.ctx
        gamma, dt = a.gamma, ctx.run.dt
        total, tau = cluster_integrals(gamma, 0.5, lambda y: y, a.cluster_replicas, dt, ctx.rng("loglaplace.clusters"))
        moments = []
        for k in (1, 2, 3):
            est = mean_estimate(tau ** k)
            moments.append({"statistic": f"mass_moment_{k}", "exact": float(np.prod(np.arange(1, k + 1))) * gamma ** k,
                            "empirical": est.mean, "std_error": est.std_error})
        mean_y = mean_estimate(total)
        moments.append({"statistic": "integral_y", "exact": gamma * 0.5, "empirical": mean_y.mean,
                        "std_error": mean_y.std_error})
        ctx.writer.write_frame("cluster_moments.csv", pd.DataFrame(moments))
        example = sample_cluster(gamma, 0.5, dt, ctx.rng("loglaplace.example"))
        ctx.writer.write_frame("cluster_example.csv", pd.DataFrame({"position": example.positions,
                                                                    "weight": example.weights}))

        p = ctx.catalyzing(a.p)
        est = apply_U(gamma, p, ctx.run.replicas, dt, ctx.rng("loglaplace.apply_U"), jobs=ctx.run.jobs,
                      control_variate=ctx.monte_carlo().control_variate)
        frame = est.to_frame()
        frame["p"] = p.values
        frame["linear_bound"] = linear_bound(gamma, p)
        ctx.writer.write_frame("U_p.csv", frame)

        bounds = []
        h_m = CatalyzingFunction.hm(a.power, ctx.run.grid_m)
        for k, x in enumerate((0.1, 0.5, 0.9)):
            dual = apply_U_dual_hm(gamma, a.power, x, a.dual_runs, ctx.rng("loglaplace.dual", k))
            mc = apply_U(gamma, h_m, ctx.run.replicas, dt, ctx.rng("loglaplace.hm", k), nodes=np.array([x]))
            bounds.append({"x": x, "dual": dual.mean, "dual_se": dual.std_error, "cluster": float(mc.value[0]),
                           "cluster_se": float(mc.std_error[0]),
                           "jensen_bound": jensen_bound_hm(gamma, a.power, x, a.dual_runs, ctx.rng("loglaplace.jensen", k))})
        ctx.writer.write_frame("hm_oracle.csv", pd.DataFrame(bounds))
        psi = mean_estimate(injected_psi_samples(gamma, a.power, a.dual_runs, ctx.rng("loglaplace.psi")))
        ctx.writer.manifest.diagnostics.update({
            "chi_m": chi_m(gamma, a.power), "large_gamma_bound": large_gamma_bound(gamma, a.power),
            "injected_psi_mean": psi.mean, "injected_psi_se": psi.std_error,
            "boundary_class": list(p.boundary_class), "lipschitz_constant": p.lipschitz_constant(),
        })

        if p.is_nondecreasing(1e-12):
            report = check_shape_preservation(gamma, p, ctx.run.replicas, dt, ctx.rng("loglaplace.shape"),
                                              concave=p.is_concave(1e-12), jobs=ctx.run.jobs)
            ctx.writer.manifest.diagnostics["shape"] = {"nondecreasing": report.nondecreasing,
                                                        "concave": report.concave,
                                                        "min_first_difference": report.min_first_difference}
        if a.iterate:
            it = iterate_U(constant_gammas(a.iterate, gamma), p, ctx.run.replicas, dt, ctx.rng("loglaplace.iterate"),
                           jobs=ctx.run.jobs)
            for k, stage in enumerate(it):
                ctx.writer.write_frame(f"iterates/U_{k:02d}.csv",
                                       stage.to_frame().assign(propagated_se=it.propagated_errors[k]))
        return 0


class RenormIterateExperiment(Experiment):
    name = "renorm-iterate"
    help = "Iterate the renormalization transformation on w^{alpha,p}"
    operations = ("schedule_from_ck", "rescaled_F", "F_c", "iterate_renorm", "estimate_nu_moments",
                  "effective_boundary", "iterated_kernel_sample", "verify_fixed_point")

    @staticmethod
    def add_arguments(parser):
        parser.add_argument('--gamma-star', type=float, default=None,
                            help="geometric schedule c_k=(1+g)^-k; omitted means c_k = 1")
        parser.add_argument('--n', type=int, default=15)
        parser.add_argument('--p', default="x")
        parser.add_argument('--alpha', type=float, default=None)
        parser.add_argument('--scaling-ladder', action='store_true')
        parser.add_argument('--nu-x', type=float_list, default=None, help="point x1,x2 for stationary moments")
        parser.add_argument('--kernel-samples', type=int, default=0)
        parser.add_argument('--check-fixed-point', action='store_true')
        parser.add_argument('--compare-gamma-star', action='store_true')

    @ErrorHandler.handle_errors("RenormIterateExperiment")
    def run(self) -> int:
        a, ctx = self.args, self.ctx
        mc = ctx.monte_carlo()
        alpha = a.alpha or (a.gamma_star if a.gamma_star else 1.0)
        if a.gamma_star:
            schedule = MigrationSchedule.geometric(a.gamma_star, a.n)
        else:
            schedule = schedule_from_ck(np.ones(a.n), beta=1.0 / alpha)
        w = CatalyticDiffusionMatrix(alpha, ctx.catalyzing(a.p))
        alphas = alpha_recursion(alpha, schedule.c)
        ctx.writer.write_frame("schedule.csv", pd.DataFrame({
            "k": np.arange(a.n), "c": schedule.c, "s": schedule.s[:-1], "s_bar": schedule.s_bar[:-1],
            "gamma": schedule.gammas, "alpha": alphas[:-1]}))
        ctx.writer.manifest.diagnostics.update({"schedule_flags": schedule.flags(),
                                                "effective_boundary": effective_boundary(w).value})

        iteration = iterate_renorm(w, schedule, a.n, mc, ctx.rng("renorm.iterate"))
        for k, r in enumerate(iteration.rescaled):
            frame = r.p.to_frame().assign(propagated_se=iteration.u_iteration.propagated_errors[k])
            ctx.writer.write_frame(f"stages/stage_{k:02d}.csv", frame)
        increments = iteration.sup_increments()
        ctx.writer.write_frame("sup_increments.csv", pd.DataFrame({
            "k": np.arange(1, len(increments) + 1), "sup_increment": increments,
            "max_propagated_se": [float(e.max()) for e in iteration.u_iteration.propagated_errors[1:]]}))
        ctx.writer.write_diffusion_matrix("w_final.json", iteration.rescaled[-1])

        if a.scaling_ladder:
            self._scaling_ladder(w, float(schedule.c[0]), mc)
        if a.nu_x:
            nu = estimate_nu_moments(float(schedule.c[0]), w, a.nu_x, mc, ctx.rng("renorm.nu"), compare_burn_in=True)
            ctx.writer.write_json("nu_moments.json", {"x": a.nu_x, "mean_offset": nu.mean_offset,
                                                      "mean_offset_se": nu.mean_offset_se,
                                                      "covariance": nu.covariance, "covariance_se": nu.covariance_se,
                                                      "burn_in": nu.burn_in, "burn_in_shift": nu.burn_in_shift})
        if a.kernel_samples:
            depth = min(a.n, 3)
            x = a.nu_x or [0.5, 0.5]
            y = iterated_kernel_sample(w, schedule, depth, x, ctx.rng("renorm.kernel"), mc=mc,
                                       n_samples=a.kernel_samples, iteration=iteration)
            ctx.writer.write_frame("kernel_samples.csv", pd.DataFrame({"y1": y[:, 0], "y2": y[:, 1]}))
        if a.check_fixed_point:
            ErrorHandler.require(bool(a.gamma_star), "--check-fixed-point needs --gamma-star")
            w_star = CatalyticDiffusionMatrix(1.0, iteration.rescaled[-1].p)
            report = verify_fixed_point(w_star, a.gamma_star, mc, ctx.rng("renorm.fixed_point"))
            ctx.check(CheckResult("fixed_point_residual", report.consistent(), report.residual,
                                  3.0 * report.propagated_se, tag="DERIVED"))
        if a.compare_gamma_star:
            self._compare_gamma_star(mc)
        return 0

    def _scaling_ladder(self, w: CatalyticDiffusionMatrix, c: float, mc) -> None:
        direct = F_c(w, c, mc, self.ctx.rng("renorm.ladder.F_c"))
        via_rescaled = rescaled_F(w.alpha / c, CatalyticDiffusionMatrix(1.0, w.p.scaled(1.0 / w.alpha)), mc,
                                  self.ctx.rng("renorm.ladder.rescaled"))
        # F_c w = alpha' * rescaled_F(alpha/c, w/alpha)
        rebuilt = via_rescaled.scaled(direct.alpha)
        self.ctx.writer.manifest.diagnostics["scaling_ladder"] = {
            "alpha_prime": direct.alpha, "sup_distance": direct.sup_distance(rebuilt)}

    def _compare_gamma_star(self, mc) -> None:
        self.mark_exploratory("p*_{0,1,gamma*} curves for several gamma*")
        m = self.ctx.run.grid_m
        frames = [solve_p_star(PStarConfig(m=m)).to_frame().rename(columns={"value": "p"}).assign(gamma_star=0.0)]
        start = CatalyzingFunction.h1(m)
        for k, g in enumerate((0.5, 1.0, 2.0)):
            it = iterate_U(constant_gammas(self.args.n, g), start, mc.replicas, mc.dt,
                           self.ctx.rng("renorm.compare", k), jobs=mc.jobs)
            frames.append(it.final.to_frame().assign(gamma_star=g))
        self.ctx.writer.write_frame("gamma_star_comparison.csv", pd.concat(frames, ignore_index=True))


class PdeFlowExperiment(Experiment):
    name = "pde-flow"
    help = "Matrix-valued flow towards its boundary-pattern fixed points"
    operations = ("run_flow_2d",)

    @staticmethod
    def add_arguments(parser):
        parser.add_argument('--case', type=int, default=1, choices=range(1, 7))
        parser.add_argument('--max-time', type=float, default=None)

    @ErrorHandler.handle_errors("PdeFlowExperiment")
    def run(self) -> int:
        a, cfg = self.args, self.ctx.config
        m = a.M or int(cfg.get('pde_flow.grid_m', 50))
        config = FlowConfig(m=m, max_steps=int(cfg.get('pde_flow.max_steps', 400000)),
                            residual_tol=float(cfg.get('pde_flow.residual_tol', 1e-7)),
                            cfl=float(cfg.get('pde_flow.cfl', 0.25)), ceiling=float(cfg.get('pde_flow.ceiling', 1e3)))
        p_star = solve_p_star(PStarConfig(m=m)) if a.case == 2 else None
        target = known_fixed_point(a.case, m, p_star)
        max_time = a.max_time
        if target is None:
            self.mark_exploratory(f"boundary case {a.case} has no asserted fixed point")
            max_time = max_time or 30.0
        tol = self.ctx.run.tolerance('pde_sup', 1e-3)
        result = run_flow_2d(initial_field_for_case(a.case, m), config, target=target, target_tol=0.5 * tol,
                             max_time=max_time)
        self.ctx.writer.write_frame(f"flow_case{a.case}.csv", result.field.to_frame())
        self.ctx.writer.write_frame(f"flow_case{a.case}_residuals.csv", result.residual_history)
        diag = {"case": a.case, "pattern": classify_fixed_point(result.field).name, "steps": result.steps,
                "time": result.time, "converged": result.converged, "min_eigenvalue": result.min_eigenvalue,
                "eigenvalue_floor": result.eigenvalue_floor}
        diag.update(result.reactant_decay())
        if target is not None:
            diag["distance_to_fixed_point"] = result.field.sup_distance(target)
        self.ctx.writer.manifest.diagnostics.update(diag)
        return 0


class SolvePStarExperiment(Experiment):
    name = "solve-pstar"
    help = "Newton solution of the p* boundary-value problem with a Cauchy cross-check"
    operations = ("solve_p_star", "run_cauchy_1d")

    @staticmethod
    def add_arguments(parser):
        parser.add_argument('--horizon', type=float, default=None, help="Cauchy cross-check horizon")
        parser.add_argument('--mesh-study', action='store_true')

    @ErrorHandler.handle_errors("SolvePStarExperiment")
    def run(self) -> int:
        a, cfg = self.args, self.ctx.config
        m = a.M or int(cfg.get('pde_flow.pstar_grid_m', 200))
        p = solve_p_star(PStarConfig(m=m, tol=float(cfg.get('pde_flow.newton_tol', 1e-8)),
                                     max_iter=int(cfg.get('pde_flow.newton_max_iter', 60)),
                                     fallback_horizon=float(cfg.get('pde_flow.cauchy_horizon', 40.0))))
        p_fn = p.to_catalyzing_function()
        self.ctx.writer.write_function("p_star.csv", p_fn)
        horizon = a.horizon or float(cfg.get('pde_flow.cauchy_horizon', 40.0))
        cauchy = run_cauchy_1d(GridField1D.from_function(lambda x: 1.0 - (1.0 - x) ** 7, m), horizon, CauchyConfig())
        self.ctx.writer.write_frame("p_star_cauchy.csv", cauchy.to_frame())
        x = p.grid_x
        diag = {"method": p.meta.get("method"), "residual": p.meta.get("residual"),
                "cauchy_distance": p.sup_distance(cauchy), "nondecreasing": p_fn.is_nondecreasing(1e-12),
                "concave": p_fn.is_concave(1e-10),
                "sandwich": bool(np.all(x - 1e-12 <= p.values) and np.all(p.values <= 1.0 - (1.0 - x) ** 7 + 1e-12))}
        if a.mesh_study:
            ratio, e1, e2 = mesh_convergence_ratio(max(m // 4, 10))
            diag["mesh_ratio"] = {"ratio": ratio, "coarse_difference": e1, "fine_difference": e2}
        self.ctx.writer.manifest.diagnostics.update(diag)
        self.logger.info(f"p* on M={m}: Newton/Cauchy distance {diag['cauchy_distance']:.2e}")
        return 0


class BranchingExperiment(Experiment):
    name = "branching"
    help = "Poisson-cluster branching and the embedded particle systems"
    operations = ("step_poisson_cluster", "run_renorm_branching", "poissonize", "run_embedded_h11",
                  "run_embedded_h00", "run_embedded_h01", "weighted_mass_statistics", "weighting_identity",
                  "poissonization_counts")

    @staticmethod
    def add_arguments(parser):
        parser.add_argument('--kind', choices=H_KINDS + ("all",), default="all")
        parser.add_argument('--n', type=int_list, default=[5, 10, 20])
        parser.add_argument('--x', type=float, default=0.5)
        parser.add_argument('--gamma', type=float, default=1.0, help="constant schedule gamma_k")
        parser.add_argument('--mode', choices=("particles", "measure"), default="particles")
        parser.add_argument('--trace-runs', type=int, default=5)
        parser.add_argument('--trajectory-steps', type=int, default=3)
        parser.add_argument('--one-step-replicas', type=int, default=500)

    @ErrorHandler.handle_errors("BranchingExperiment")
    def run(self) -> int:
        a, ctx, cfg = self.args, self.ctx, self.ctx.config
        kinds = H_KINDS if a.kind == "all" else (a.kind,)
        dt = 2e-3 if a.dt is None else a.dt
        replicas = a.replicas or int(cfg.get('verify.branching_replicas', 2000))
        ceiling = int(cfg.get('branching.particle_ceiling', 10000))
        low, high = float(cfg.get('branching.middle_low', 0.1)), float(cfg.get('branching.middle_high', 10.0))
        contexts = self._contexts(kinds, a.gamma, dt)

        self._one_step(a.gamma, dt)
        self._trajectory(a.gamma, dt)
        self._transform_identities(a.gamma, dt, contexts.get("h00"))
        rows = []
        for n, kind in itertools.product(a.n, kinds):
            gammas = constant_gammas(n, a.gamma)
            report = weighted_mass_statistics(gammas, a.x, kind, ctx.rng(f"branching.mass.{kind}", n), replicas,
                                              contexts.get(kind), low, high, a.mode, dt, ceiling)
            ctx.writer.write_frame(f"histograms/{kind}_n{n:02d}.csv", report.histogram())
            rows.append({"kind": kind, "n": n, "middle_probability": report.middle.mean,
                         "middle_se": report.middle.std_error,
                         "zero_fraction": float(np.mean(report.samples == 0)),
                         "ceiling_fraction": float(np.mean(np.isinf(report.samples)))})
        ctx.writer.write_frame("weighted_mass.csv", pd.DataFrame(rows))
        self._single_runs(kinds, a.gamma, dt, contexts)
        if "h00" in kinds:
            self._criticality(contexts["h00"][a.gamma], dt)
        if "h01" in kinds:
            self._h01_prediction(contexts["h01"], max(a.n), dt, replicas)
        return 0

    def _contexts(self, kinds, gamma: float, dt: float) -> Dict[str, Dict]:
        cfg = self.ctx.config
        out = {}
        for kind in kinds:
            if kind == "h11":
                continue
            out[kind] = build_contexts(catalyzing_for(kind), [gamma], int(cfg.get('branching.context_replicas', 4000)),
                                       dt, self.ctx.rng(f"branching.context.{kind}"),
                                       grid_m=int(cfg.get('branching.context_grid_m', 40)), jobs=self.ctx.run.jobs)
        return out

    def _one_step(self, gamma: float, dt: float) -> None:
        rng = self.ctx.rng("branching.one_step")
        start = AtomicMeasure.dirac(self.args.x)
        after = [step_poisson_cluster(start, gamma, dt, rng, bin_grid=None) for _ in range(self.args.one_step_replicas)]
        mass = mean_estimate([X.total_mass for X in after])
        lf = mean_estimate(laplace_functional(after, np.ones_like))
        self.ctx.writer.write_frame("one_step.csv", pd.DataFrame([
            {"statistic": "total_mass", "exact": 1.0 + gamma, "empirical": mass.mean, "std_error": mass.std_error},
            {"statistic": "laplace_functional_1", "exact": float(np.exp(-constant_closed_form(gamma, 1.0))),
             "empirical": lf.mean, "std_error": lf.std_error}]))

    def _transform_identities(self, gamma: float, dt: float, h00_contexts) -> None:
        ctx, x = self.ctx, self.args.x
        replicas = self.args.one_step_replicas
        sigmas = ctx.run.tolerance('sigmas', 3.0)
        alpha = float(ctx.config.get('campbell.test_alpha', 0.01))
        h = catalyzing_for("h00")
        weighting = weighting_identity(x, 1.0, gamma, h, lambda y: y, replicas, dt, ctx.rng("branching.weighting"),
                                       u_replicas=int(ctx.config.get('verify.cluster_replicas', 20000)))
        ctx.check(CheckResult("weighting_identity", weighting.agrees(sigmas),
                              {"simulated": weighting.simulated.mean, "simulated_se": weighting.simulated.std_error,
                               "predicted": weighting.predicted, "predicted_se": weighting.predicted_se,
                               "z": weighting.z}, sigmas, detail="E exp(-<h X_1, f>) against exp(-U(h f)(x))"))
        if h00_contexts is None or not 0.0 < x < 1.0:
            return
        mass = 2.0 / float(h(x))
        direct, embedded = poissonization_counts(h00_contexts[gamma], x, mass, replicas, dt,
                                                 ctx.rng("branching.poissonization"))
        law = count_law_test(direct, embedded, alpha)
        ctx.check(CheckResult("poissonization_commutes", law.passed, law.as_measured(), alpha,
                              detail="counts of Pois(h X_1) against one embedded h00 step"))
        ctx.writer.write_frame("poissonization_counts.csv", pd.DataFrame({"poissonized": direct, "embedded": embedded}))

    def _trajectory(self, gamma: float, dt: float) -> None:
        rng = self.ctx.rng("branching.trajectory")
        traj = run_renorm_branching(constant_gammas(self.args.trajectory_steps, gamma), AtomicMeasure.dirac(self.args.x),
                                    rng, dt=dt, bin_grid=100)
        rows = []
        for kind in H_KINDS:
            h = catalyzing_for(kind)
            for step, X in enumerate(traj):
                rows.append({"kind": kind, "step": step, "particle_count": poissonize(X, h, rng).count,
                             "weighted_mass": X.integrate(h)})
        self.ctx.writer.write_frame("trajectory_summary.csv", pd.DataFrame(rows))

    def _single_runs(self, kinds, gamma: float, dt: float, contexts) -> None:
        rows = []
        n = min(self.args.n)
        gammas = constant_gammas(n, gamma)
        for kind in kinds:
            for i in range(self.args.trace_runs):
                rng = self.ctx.rng(f"branching.trace.{kind}", i)
                if kind == "h11":
                    result = str(run_embedded_h11(gammas, self.args.x, rng, dt=dt))
                elif kind == "h00":
                    extinct, count = run_embedded_h00(gammas, self.args.x, rng, contexts["h00"], dt=dt)
                    result = "extinct" if extinct else str(count)
                else:
                    result = run_embedded_h01(gammas, self.args.x, rng, contexts["h01"], dt=dt).value
                rows.append({"kind": kind, "run": i, "n": n, "result": result})
        self.ctx.writer.write_frame("trace_runs.csv", pd.DataFrame(rows))

    def _criticality(self, context, dt: float) -> None:
        rows = []
        for k, x in enumerate((0.1, 0.3, 0.5, 0.7, 0.9)):
            est = offspring_mean(context, x, self.args.one_step_replicas, dt, self.ctx.rng("branching.critical", k))
            rows.append({"x": x, "offspring_mean": est.mean, "std_error": est.std_error})
        self.ctx.writer.write_frame("criticality_h00.csv", pd.DataFrame(rows))

    def _h01_prediction(self, contexts, n: int, dt: float, replicas: int) -> None:
        self.mark_exploratory("h01 survival compared with the gamma*=0 profile p*_{0,1,0}")
        p_star = solve_p_star(PStarConfig(m=100)).to_catalyzing_function()
        run = run_embedded_batch("h01", constant_gammas(n, self.args.gamma), [np.array([self.args.x])] * replicas,
                                 self.ctx.rng("branching.h01_survival"), contexts, dt=dt)
        self.ctx.writer.write_frame("h01_generations.csv", run.summary_frame())
        prediction = predicted_survival_h01(p_star, self.args.x)
        survival = run.survival()
        self.ctx.writer.manifest.diagnostics["h01_survival"] = {**prediction, "survival": survival.mean,
                                                                "survival_se": survival.std_error}


class CampbellExperiment(Experiment):
    name = "campbell"
    help = "Immortal-particle chain and the size-biased (Campbell) family"
    operations = ("immortal_chain_step", "simulate_campbell_tree", "return_fraction", "size_biased_resample")

    @staticmethod
    def add_arguments(parser):
        parser.add_argument('--n', type=int, default=2)
        parser.add_argument('--x', type=float, default=0.5)
        parser.add_argument('--gamma-star', type=float, default=1.0)
        parser.add_argument('--immortal-steps', type=int, default=100000)
        parser.add_argument('--return-runs', type=int, default=1000)

    @ErrorHandler.handle_errors("CampbellExperiment")
    def run(self) -> int:
        a, ctx, cfg = self.args, self.ctx, self.ctx.config
        g = a.gamma_star
        dt = 2e-3 if a.dt is None else a.dt
        alpha = float(cfg.get('campbell.test_alpha', 0.01))
        replicas = a.replicas or int(cfg.get('verify.branching_replicas', 2000))

        v = immortal_chain_step(np.full(a.immortal_steps, a.x), g, ctx.rng("campbell.immortal"))
        het = mean_estimate(v * (1.0 - v))
        exact = (a.x * (1 - a.x) + g * (1 + g)) / ((1 + 2 * g) * (1 + 3 * g))
        ctx.check(CheckResult("immortal_heterozygosity", het.agrees_with(exact, ctx.run.tolerance('sigmas', 3.0)),
                              {"mean": het.mean, "std_error": het.std_error, "exact": exact},
                              ctx.run.tolerance('sigmas', 3.0)))
        mirrored = immortal_chain_step(np.full(a.immortal_steps, 1.0 - a.x), g, ctx.rng("campbell.mirror"))
        symmetry = ks_two_sample(v, 1.0 - mirrored, alpha)
        ctx.check(CheckResult("immortal_symmetry", symmetry.passed, symmetry.as_measured(), alpha,
                              detail="KS: v' from x against 1 - v' from 1 - x"))
        threshold = float(cfg.get('campbell.return_threshold', 0.95))
        returned = return_fraction(0.01, g, a.return_runs, 200, ctx.rng("campbell.return"))
        ctx.check(CheckResult("immortal_return_to_interior", returned > threshold, returned, threshold,
                              tag="DERIVED", detail="from 0.01, visit [0.2, 0.8] within 200 steps"))
        path = immortal_chain_path(a.x, g, 1000, ctx.rng("campbell.path"))
        ctx.writer.write_frame("immortal_path.csv", pd.DataFrame({"step": np.arange(path.size), "v": path}))

        context = build_contexts(CatalyzingFunction.h00(100), [g], int(cfg.get('branching.context_replicas', 4000)),
                                 dt, ctx.rng("campbell.context"),
                                 grid_m=int(cfg.get('branching.context_grid_m', 40)))[g]
        samples = simulate_campbell_batch(a.n, a.x, g, context, replicas, ctx.rng("campbell.trees"), dt)
        campbell_counts = np.array([s.count for s in samples])
        forward_replicas = replicas * int(cfg.get('campbell.forward_multiple', 4))
        forward = run_embedded_batch("h00", constant_gammas(a.n, g), [np.array([a.x])] * forward_replicas,
                                     ctx.rng("campbell.forward"), {g: context}, dt=dt)
        biased = size_biased_law(forward.counts)
        observed = pd.Series(campbell_counts).value_counts(normalize=True)
        support = sorted(set(biased) | set(observed.index))
        ctx.writer.write_frame("campbell_laws.csv", pd.DataFrame({
            "count": support, "size_biased_forward": [biased.get(k, 0.0) for k in support],
            "campbell": [float(observed.get(k, 0.0)) for k in support]}))
        resampled = size_biased_resample(forward.counts, replicas, ctx.rng("campbell.resample"))
        law = count_law_test(campbell_counts, resampled, alpha)
        ctx.check(CheckResult("campbell_count_law", law.passed, law.as_measured(), alpha, tag="DERIVED",
                              detail=f"chi-square against the size-biased forward law at n={a.n}"))

        spines = np.array([s.spine for s in samples])
        ctx.writer.write_frame("spines.csv", pd.DataFrame(spines, columns=[f"v{k}" for k in range(a.n + 1)]))
        if a.n >= 1:
            direct = immortal_chain_step(np.full(replicas, a.x), g, ctx.rng("campbell.spine"))
            spine = ks_two_sample(spines[:, 1], direct, alpha)
            ctx.check(CheckResult("spine_first_step", spine.passed, spine.as_measured(), alpha,
                                  detail="KS: spine at step 1 against immortal_chain_step"))

        single = simulate_campbell_tree(a.n, a.x, g, ctx.rng("campbell.single"), context, dt)
        forward_mean = size_biased_mean(forward.counts)
        campbell_mean = mean_estimate(campbell_counts)
        ctx.writer.manifest.diagnostics["campbell"] = {
            "campbell_mean": campbell_mean.mean, "campbell_se": campbell_mean.std_error,
            "size_biased_mean": forward_mean.mean, "size_biased_se": forward_mean.std_error,
            "single_tree_count": single.count}
        return 0


class HierarchicalExperiment(Experiment):
    name = "hierarchical"
    help = "Hierarchically interacting catalytic WF diffusions and the recurrence criterion"
    operations = ("simulate_hierarchical", "block_average", "recurrence_test", "interaction_chain_extract",
                  "chain_regression")

    @staticmethod
    def add_arguments(parser):
        parser.add_argument('--N', type=int, default=None)
        parser.add_argument('--K', type=int, default=None)
        parser.add_argument('--r', type=float, default=1.0, help="migration constants c_k = r^k")
        parser.add_argument('--theta', type=float_list, default=[0.5, 0.5])
        parser.add_argument('--horizon', type=float, default=None)
        parser.add_argument('--p', default="x")
        parser.add_argument('--exploratory', action='store_true')

    @ErrorHandler.handle_errors("HierarchicalExperiment")
    def run(self) -> int:
        a, ctx, cfg = self.args, self.ctx, self.ctx.config
        n = a.N or int(cfg.get('hierarchical.N', 2))
        k = a.K or int(cfg.get('hierarchical.K', 4))
        horizon = a.horizon or float(cfg.get('hierarchical.horizon', 5.0))
        dt = a.dt or float(cfg.get('hierarchical.dt', 1e-3))
        record = int(cfg.get('hierarchical.record_every', 100))
        replicas = a.replicas or 20
        w = CatalyticDiffusionMatrix(1.0, ctx.catalyzing(a.p))
        c = [a.r ** j for j in range(k)]
        ctx.writer.manifest.diagnostics["initial_condition"] = {"theta": list(a.theta), "kind": "constant at every site"}

        finals, chains = [], []
        for i in range(replicas):
            traj = simulate_hierarchical(n, k, w, c, a.theta, horizon, dt, ctx.rng("hierarchical.run", i), record)
            chains.append(interaction_chain_extract(traj, k, horizon))
            if i == 0:
                ctx.writer.write_frame("trajectory.csv", traj.to_frame())
                ctx.writer.write_frame("interaction_chain.csv", interaction_chain_frame(chains[0]))
            finals.append(traj.states[-1])
        sigmas = ctx.run.tolerance('sigmas', 3.0)
        fit = chain_regression(chains)
        ctx.check(CheckResult("interaction_chain_slope", fit.consistent_with_martingale(sigmas),
                              {"slope": fit.slope, "std_error": fit.std_error, "pairs": fit.pairs}, sigmas,
                              tag="DERIVED", detail="regression of x^j_0 on x^{j+1}_0 at the horizon"))
        self._conservation(n, k, w, c, horizon, dt)
        finals = np.array(finals)
        drift = finals.mean(axis=1) - np.asarray(a.theta)
        drift_est = [mean_estimate(drift[:, j]) for j in range(2)]
        ctx.writer.manifest.diagnostics["global_average_drift"] = {
            "mean": [e.mean for e in drift_est], "std_error": [e.std_error for e in drift_est],
            "full_block_gap": float(np.max(np.abs(block_average(finals[0], 0, k, n) - finals[0].mean(axis=0))))}

        rows = []
        for r, big_n in itertools.product((0.5, 0.9, 1.0, 1.1, 2.0), (2, 4)):
            rows.append(self._classify(r, big_n))
        ctx.writer.write_frame("recurrence.csv", pd.DataFrame(rows))
        if a.exploratory:
            self._trend_report(n, k, w, horizon, dt)
        return 0

    @staticmethod
    def _classify(r: float, n: int) -> Dict:
        try:
            closed = recurrence_test(None, n, r=r).verdict.value
        except ParameterError:
            closed = "undefined"
        try:
            numeric = recurrence_test(lambda j: r ** j, n)
            verdict, partial = numeric.verdict.value, numeric.partial_sums[-1]
        except ParameterError:
            verdict, partial = "undefined", np.nan
        return {"r": r, "N": n, "closed_form": closed, "numeric": verdict, "partial_sum": partial}

    def _conservation(self, n: int, k: int, w, c, horizon: float, dt: float) -> None:
        rng = self.ctx.rng("hierarchical.conservation")
        start = rng.uniform(0.05, 0.95, size=(n ** k, 2))
        traj = simulate_hierarchical(n, k, w, c, self.args.theta, horizon, dt, rng, noise=False, initial_state=start)
        gap = float(np.max(np.abs(traj.states.sum(axis=1) - start.sum(axis=0))))
        tol = 1e-9 * n ** k
        self.ctx.check(CheckResult("migration_conservation", gap <= tol, gap, tol,
                                   detail="site sum under migration alone from a random start"))

    def _trend_report(self, n: int, k: int, w, horizon: float, dt: float) -> None:
        self.mark_exploratory("interaction-chain and within-block variance trends at finite N")
        rows = []
        for j, c0 in enumerate((0.1, 1.0, 10.0)):
            c = [c0] + [1.0] * (k - 1)
            step = min(dt, 0.5 / (c0 + 1.0))
            variances, chains = [], []
            for i in range(10):
                traj = simulate_hierarchical(n, k, w, c, self.args.theta, horizon, step,
                                             self.ctx.rng(f"hierarchical.trend.{j}", i), 10 ** 6)
                state = traj.states[-1]
                variances.append(float(np.mean((state - block_means(state, n, 1)) ** 2)))
                chains.append(interaction_chain_extract(traj, k, horizon))
            slope = chain_regression(chains).slope
            rows.append({"c0": c0, "within_block_variance": float(np.mean(variances)), "chain_slope": slope})
        self.ctx.writer.write_frame("hierarchical_trends.csv", pd.DataFrame(rows))
