"""
Experiment stages

generate -> train-vae -> run (per method, per case) -> evaluate. Every stage
reads its inputs from the run directory, writes its outputs there and
records them in a stage manifest, so an interrupted experiment resumes where
it stopped.
"""

import csv
import dataclasses
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from backend.errors import MissingPrerequisiteError
from backend.inference.acquisition import AcquisitionKind, SearchBox, acquisition_surface, save_grid_csv
from backend.inference.active_learner import BalResult, TargetPosterior, load_bal_result, run_bal, save_bal_result
from backend.inference.evaluation import (
    aggregate,
    coverage_fraction,
    decode_field_stats,
    field_metrics,
    kde_fit,
    kde_logpdf,
    kl_divergence_mc,
    paired_t_test,
    stat_difference,
    z_stats,
)
from backend.inference.gp_surrogate import GpPosterior, gp_predict_batch
from backend.inference.mcmc import (
    load_sample_set,
    run_reference_mcmc,
    run_two_stage_mcmc,
    save_sample_set,
    tune_proposal,
)
from backend.inference.vae import checkpoint_files, encode, load_checkpoint, save_checkpoint, train_vae
from backend.pipeline.storage import RunDirectory, write_json
from backend.simulation.data_gen import (
    generate_training_set,
    load_training_set,
    make_test_field,
    save_training_set,
    sector_of_nodes,
)
from backend.simulation.forward_model import (
    ForwardModelConfig,
    LikelihoodConfig,
    add_measurement_noise,
    build_lead_field,
    load_lead_field_csv,
    load_measurements_csv,
    noise_std_for_snr,
    save_lead_field_csv,
    save_measurements_csv,
)
from config.experiment_config import ExperimentConfig, config_digest, derive_seed

logger = logging.getLogger(__name__)

DIRECT_MCMC = "direct-mcmc"
TWO_STAGE = "two-stage"
BAL_ENTROPY = "bal-entropy"
BAL_VARIANCE = "bal-variance"
BAL_UCB = "bal-ucb"
METHODS = (DIRECT_MCMC, TWO_STAGE, BAL_ENTROPY, BAL_VARIANCE, BAL_UCB)
BAL_METHODS = (BAL_ENTROPY, BAL_VARIANCE, BAL_UCB)
REFERENCE = DIRECT_MCMC
SAMPLES = "samples"


def _generate_settings(cfg: ExperimentConfig) -> Dict:
    return {
        "seed": cfg.seed,
        "geometry": dataclasses.asdict(cfg.geometry),
        "training_geometry": None if cfg.training_geometry is None else dataclasses.asdict(cfg.training_geometry),
        "ap_params": dataclasses.asdict(cfg.ap_params),
        "stimulus": dataclasses.asdict(cfg.stimulus),
        "lead_field": dataclasses.asdict(cfg.lead_field),
        "training_set": dataclasses.asdict(cfg.training_set),
        "snr_db": cfg.snr_db,
        "cases": [dataclasses.asdict(c) for c in cfg.cases],
    }


def _vae_settings(cfg: ExperimentConfig) -> Dict:
    return {"generate": _generate_settings(cfg), "vae": dataclasses.asdict(cfg.vae)}


def _run_settings(cfg: ExperimentConfig, method: str, extra: Optional[Dict] = None) -> Dict:
    return {
        "vae": _vae_settings(cfg),
        "method": method,
        "bal": dataclasses.asdict(cfg.bal),
        "mcmc": dataclasses.asdict(cfg.mcmc),
        **(extra or {}),
    }


def _require(run: RunDirectory, stage: str, needed_by: str):
    if not run.stage_complete(stage):
        raise MissingPrerequisiteError(f"'{needed_by}' needs stage '{stage}' to be completed first")


def forward_config(cfg: ExperimentConfig, run: RunDirectory) -> ForwardModelConfig:
    geometry = cfg.estimation_geometry()
    return ForwardModelConfig(
        geometry,
        cfg.ap_params.build(),
        cfg.stimulus.build(geometry),
        load_lead_field_csv(run.data_dir / "lead_field.csv"),
    )


def cmd_generate(cfg: ExperimentConfig, verbose: bool = False) -> RunDirectory:
    """
    Training fields, lead field, ground-truth case fields and noisy observations.

    Args:
        cfg: Experiment configuration
        verbose: Show progress bars

    Returns:
        The run directory
    """
    run = RunDirectory(cfg.output_path)
    settings = _generate_settings(cfg)
    if run.stage_complete("generate", settings):
        logger.info("[Pipeline] generate: outputs up to date, skipping")
        return run

    geometry = cfg.estimation_geometry()
    vae_geometry = cfg.vae_geometry()
    run.data_dir.mkdir(parents=True, exist_ok=True)
    artifacts: List[Path] = []

    training = generate_training_set(
        vae_geometry,
        cfg.training_set.count,
        cfg.size_range(),
        np.random.default_rng(derive_seed(cfg.seed, "training-set")),
    )
    training_csv = run.data_dir / "training_set.csv"
    save_training_set(training_csv, training, {"geometry": vae_geometry.to_dict(), "size_range": list(cfg.size_range())})
    artifacts += [training_csv, training_csv.with_suffix(".json")]

    lead_field = build_lead_field(geometry, cfg.lead_field.n_leads, derive_seed(cfg.seed, "lead-field"))
    save_lead_field_csv(run.data_dir / "lead_field.csv", lead_field)
    artifacts.append(run.data_dir / "lead_field.csv")

    fwd = forward_config(cfg, run)
    for index, case in enumerate(tqdm(cfg.cases, desc="Cases", disable=not verbose)):
        case_dir = run.case_dir(index)
        case_dir.mkdir(parents=True, exist_ok=True)
        spec = case.build()
        truth = make_test_field(geometry, spec, np.random.default_rng(derive_seed(cfg.seed, "case", index, "truth")))
        clean = fwd.measure(truth)
        noise_rng = np.random.default_rng(derive_seed(cfg.seed, "case", index, "noise"))
        observed = add_measurement_noise(clean, cfg.snr_db, noise_rng)
        sigma_e = noise_std_for_snr(clean, cfg.snr_db)

        np.savetxt(case_dir / "truth.csv", truth[None, :], delimiter=",", fmt="%.17g")
        save_measurements_csv(case_dir / "observations.csv", observed)
        write_json(case_dir / "case.json", {**spec.to_dict(), "snr_db": cfg.snr_db, "sigma_e": sigma_e})
        artifacts += [case_dir / "truth.csv", case_dir / "observations.csv", case_dir / "case.json"]
        logger.info(f"[Pipeline] case {index}: sectors {sorted(spec.sector_ids)}, severity {spec.severity}, sigma_e {sigma_e:.4g}")

    run.record_stage("generate", settings, artifacts, {"n_cases": len(cfg.cases), "n_training": len(training)})
    run.write_manifest(config_digest(cfg))
    return run


def cmd_train_vae(cfg: ExperimentConfig, verbose: bool = False) -> RunDirectory:
    """Train the VAE on the generated fields; writes the checkpoint, loss history and latent scatter"""
    run = RunDirectory(cfg.output_path)
    _require(run, "generate", "train-vae")
    settings = _vae_settings(cfg)
    if run.stage_complete("train-vae", settings):
        logger.info("[Pipeline] train-vae: checkpoint up to date, skipping")
        return run

    training, _ = load_training_set(run.data_dir / "training_set.csv")
    result = train_vae(training.fields, cfg.train_config(), verbose=verbose)
    save_checkpoint(run.vae_dir, result, cfg.train_config())

    loss_csv = run.vae_dir / "loss_history.csv"
    np.savetxt(
        loss_csv,
        np.column_stack([np.arange(len(result.loss_history)), result.loss_history]),
        delimiter=",",
        header="epoch,loss",
        comments="",
        fmt=["%d", "%.17g"],
    )

    mu, _ = encode(result.model, training.fields)
    sectors = sector_of_nodes(cfg.vae_geometry())[training.seed_nodes]
    scatter_csv = run.vae_dir / "latent_scatter.csv"
    header = ",".join([f"z{i + 1}" for i in range(mu.shape[1])] + ["lesion_size", "sector"])
    np.savetxt(
        scatter_csv,
        np.column_stack([mu, training.lesion_sizes, sectors]),
        delimiter=",",
        header=header,
        comments="",
        fmt=["%.17g"] * mu.shape[1] + ["%d", "%d"],
    )

    artifacts = checkpoint_files(run.vae_dir, result.model) + [loss_csv, scatter_csv]
    summary = {"final_loss": result.loss_history[-1] if result.loss_history else None, "validation_rmse": result.validation_rmse}
    run.record_stage("train-vae", settings, artifacts, summary)
    run.write_manifest(config_digest(cfg))
    return run


@dataclass
class CaseInputs:
    index: int
    truth: np.ndarray
    target: TargetPosterior


def load_case(cfg: ExperimentConfig, run: RunDirectory, index: int) -> CaseInputs:
    case_dir = run.case_dir(index)
    sigma_e = float(json.loads((case_dir / "case.json").read_text())["sigma_e"])
    truth = np.loadtxt(case_dir / "truth.csv", delimiter=",")
    target = TargetPosterior(
        vae=load_checkpoint(run.vae_dir),
        forward=forward_config(cfg, run),
        y_obs=load_measurements_csv(case_dir / "observations.csv"),
        likelihood=LikelihoodConfig(sigma_e),
        field_geometry=cfg.vae_geometry(),
    )
    return CaseInputs(index, truth, target)


def surrogate_logpdf(gp: GpPosterior, box: SearchBox) -> Callable[[np.ndarray], float]:
    """Log of the surrogate density exp(GP mean), restricted to the search box"""

    def logpdf(z: np.ndarray) -> float:
        if not box.contains(z):
            return -np.inf
        mu, _ = gp_predict_batch(gp, np.atleast_2d(z))
        return float(mu[0])

    return logpdf


def _best_training_point(gp: GpPosterior) -> np.ndarray:
    ts = gp.training_set
    return ts.inputs[int(np.argmax(ts.targets))].copy()


def pilot_surrogate(cfg: ExperimentConfig, run: RunDirectory, case: CaseInputs) -> Tuple[BalResult, int]:
    """
    Short variance-acquisition BAL run used to tune MCMC proposals.

    Cached per case and shared by direct and two-stage MCMC. Returns the
    result and the number of simulations it cost.
    """
    pilot_dir = run.pilot_dir(case.index)
    settings = _run_settings(cfg, "pilot")
    stage = f"case-{case.index:02d}-pilot"
    if run.stage_complete(stage, settings):
        result = load_bal_result(pilot_dir)
        return result, result.n_evaluations

    bal_cfg = cfg.bal_config(
        AcquisitionKind.variance(),
        derive_seed(cfg.seed, "case", case.index, "pilot"),
        max_iterations=cfg.mcmc.pilot_bal_iterations,
    )
    result = run_bal(case.target, bal_cfg, cfg.search_box())
    save_bal_result(pilot_dir, result)
    run.record_stage(stage, settings, [pilot_dir / "bal_result.json", pilot_dir / "surrogate_pdf.csv"])
    return result, result.n_evaluations


def _tuned_proposal(cfg: ExperimentConfig, gp: GpPosterior, box: SearchBox, rng: np.random.Generator):
    return tune_proposal(
        surrogate_logpdf(gp, box),
        _best_training_point(gp),
        rng,
        target_rate=cfg.mcmc.target_acceptance,
        pilot_length=cfg.mcmc.pilot_length,
        max_pilots=cfg.mcmc.max_pilots,
    )


def _mcmc_inits(gp: GpPosterior, box: SearchBox, n_chains: int, rng: np.random.Generator) -> np.ndarray:
    """Chains start at distinct jittered copies of the best training point, kept inside the box"""
    start = _best_training_point(gp)
    return box.clip(start + 0.1 * rng.standard_normal((n_chains, start.shape[0])))


def _run_mcmc_method(cfg: ExperimentConfig, run: RunDirectory, case: CaseInputs, method: str) -> Dict:
    pilot, pilot_evaluations = pilot_surrogate(cfg, run, case)
    box = cfg.search_box()
    rng = np.random.default_rng(derive_seed(cfg.seed, "case", case.index, method))
    prop = _tuned_proposal(cfg, pilot.gp, box, rng)
    inits = _mcmc_inits(pilot.gp, box, cfg.mcmc.n_chains, rng)
    protocol = dict(
        n_chains=cfg.mcmc.n_chains,
        chain_length=cfg.mcmc.chain_length,
        burn_in_fraction=cfg.mcmc.burn_in_fraction,
        thin=cfg.mcmc.thin,
        inits=inits,
    )
    if method == DIRECT_MCMC:
        samples = run_reference_mcmc(case.target.log_density, prop, rng, **protocol)
    else:
        samples = run_two_stage_mcmc(case.target.log_density, surrogate_logpdf(pilot.gp, box), prop, rng, **protocol)

    save_sample_set(run.method_dir(case.index, method), SAMPLES, samples)
    n_simulations = samples.n_evaluations + samples.n_init_evaluations + pilot_evaluations
    return {
        "chain_evaluations": samples.n_evaluations,
        "init_evaluations": samples.n_init_evaluations,
        "pilot_evaluations": pilot_evaluations,
        "n_simulations": n_simulations,
        "acceptance_rates": samples.acceptance_rates,
    }


def _ucb_budget(run: RunDirectory, index: int) -> Optional[int]:
    record = run.load_stage(f"case-{index:02d}-{BAL_ENTROPY}")
    if record is None or not run.stage_complete(f"case-{index:02d}-{BAL_ENTROPY}"):
        return None
    return int(record["summary"]["n_simulations"])


def _run_bal_method(cfg: ExperimentConfig, run: RunDirectory, case: CaseInputs, method: str, budget: Optional[int]) -> Dict:
    kind = cfg.acquisition(method)
    seed = derive_seed(cfg.seed, "case", case.index, method)
    overrides = {}
    if budget is not None:
        overrides = {"max_iterations": max(budget - cfg.bal.initial_design_size, 0), "stop_on_convergence": False}
    box = cfg.search_box()
    result = run_bal(case.target, cfg.bal_config(kind, seed, **overrides), box)

    out_dir = run.method_dir(case.index, method)
    save_bal_result(out_dir, result)
    axes, values = acquisition_surface(result.gp, kind, box, cfg.bal.quadrature_grid)
    save_grid_csv(out_dir / "acquisition_surface.csv", axes, values, kind.name)

    rng = np.random.default_rng(derive_seed(cfg.seed, "case", case.index, method, "surrogate-mcmc"))
    prop = _tuned_proposal(cfg, result.gp, box, rng)
    samples = run_reference_mcmc(
        surrogate_logpdf(result.gp, box),
        prop,
        rng,
        n_chains=cfg.mcmc.n_chains,
        chain_length=cfg.mcmc.surrogate_chain_length,
        burn_in_fraction=cfg.mcmc.burn_in_fraction,
        thin=cfg.mcmc.thin,
        inits=_mcmc_inits(result.gp, box, cfg.mcmc.n_chains, rng),
    )
    save_sample_set(out_dir, SAMPLES, samples)
    return {
        "n_simulations": result.n_evaluations,
        "iterations": len(result.history),
        "converged": result.converged,
        "budget_matched": budget is not None,
        "acceptance_rates": samples.acceptance_rates,
    }


def _method_artifacts(run: RunDirectory, index: int, method: str) -> List[Path]:
    out_dir = run.method_dir(index, method)
    paths = [out_dir / f"{SAMPLES}.csv", out_dir / f"{SAMPLES}.json"]
    if method in BAL_METHODS:
        paths += [out_dir / "bal_result.json", out_dir / "surrogate_pdf.csv", out_dir / "acquisition_surface.csv"]
    return paths


def run_case(cfg: ExperimentConfig, method: str, index: int) -> Dict:
    """One method on one case; skipped when its recorded outputs are intact"""
    run = RunDirectory(cfg.output_path)
    stage = f"case-{index:02d}-{method}"
    budget = _ucb_budget(run, index) if method == BAL_UCB else None
    settings = _run_settings(cfg, method, {"budget": budget})
    if run.stage_complete(stage, settings):
        logger.info(f"[Pipeline] {stage}: results up to date, skipping")
        return run.load_stage(stage)["summary"]
    if method == BAL_UCB and budget is None:
        logger.warning(f"[Pipeline] case {index}: no {BAL_ENTROPY} result, running {BAL_UCB} with its own stopping rule")

    case = load_case(cfg, run, index)
    if method in BAL_METHODS:
        summary = _run_bal_method(cfg, run, case, method, budget)
    else:
        summary = _run_mcmc_method(cfg, run, case, method)
    summary = {"case": index, "method": method, **summary}
    run.record_stage(stage, settings, _method_artifacts(run, index, method), summary)
    logger.info(f"[Pipeline] case {index} {method}: {summary['n_simulations']} simulations")
    return summary


def cmd_run(cfg: ExperimentConfig, method: str, verbose: bool = False) -> List[Dict]:
    """
    Run one inference method on every case.

    Cases are dispatched to a process pool of ``cfg.workers`` workers.

    Returns:
        Per-case summaries in case order
    """
    if method not in METHODS:
        raise ValueError(f"Unknown method '{method}'; choose from {', '.join(METHODS)}")
    run = RunDirectory(cfg.output_path)
    _require(run, "generate", f"run {method}")
    _require(run, "train-vae", f"run {method}")

    indices = list(range(len(cfg.cases)))
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(run_case, cfg, method, i) for i in indices]
            summaries = [f.result() for f in tqdm(futures, desc=method, disable=not verbose)]
    else:
        summaries = [run_case(cfg, method, i) for i in tqdm(indices, desc=method, disable=not verbose)]

    run.write_manifest(config_digest(cfg))
    return summaries


def _case_metrics(cfg: ExperimentConfig, run: RunDirectory, index: int, methods: List[str]) -> Dict[str, Dict]:
    vae = load_checkpoint(run.vae_dir)
    truth = np.loadtxt(run.case_dir(index) / "truth.csv", delimiter=",")
    source, target_geom = cfg.vae_geometry(), cfg.estimation_geometry()

    reference = load_sample_set(run.method_dir(index, REFERENCE), SAMPLES)
    ref_kde = kde_fit(reference.samples)
    ref_z = z_stats(reference.samples, ref_kde)
    ref_fields = decode_field_stats(vae, reference.samples, ref_z.mode, source, target_geom)
    ref_sims = run.load_stage(f"case-{index:02d}-{REFERENCE}")["summary"]["n_simulations"]

    rows = {}
    for method in methods:
        samples = reference if method == REFERENCE else load_sample_set(run.method_dir(index, method), SAMPLES)
        kde = ref_kde if method == REFERENCE else kde_fit(samples.samples)
        zs = ref_z if method == REFERENCE else z_stats(samples.samples, kde)
        fields = decode_field_stats(vae, samples.samples, zs.mode, source, target_geom)
        kl = kl_divergence_mc(reference.samples, lambda X: kde_logpdf(ref_kde, X), lambda X: kde_logpdf(kde, X))
        summary = run.load_stage(f"case-{index:02d}-{method}")["summary"]

        row = {
            "kl": kl.value,
            "kl_std_error": kl.std_error,
            "mean_error": stat_difference(zs.mean, ref_z.mean),
            "mode_error": stat_difference(zs.mode, ref_z.mode),
            "std_error": stat_difference(zs.std, ref_z.std),
            "field_mean_error": stat_difference(fields.mean_field, ref_fields.mean_field),
            "field_mode_error": stat_difference(fields.mode_field, ref_fields.mode_field),
            "field_std_error": stat_difference(fields.std_field, ref_fields.std_field),
            "n_simulations": summary["n_simulations"],
            "simulation_ratio": summary["n_simulations"] / ref_sims,
            "z_mean": zs.mean.tolist(),
            "z_mode": zs.mode.tolist(),
            "z_std": zs.std.tolist(),
        }
        for stat_name, field in (("mean", fields.mean_field), ("mode", fields.mode_field)):
            for metric, value in field_metrics(field, truth).items():
                row[f"{stat_name}_{metric}"] = value
        if method in BAL_METHODS:
            bal = load_bal_result(run.method_dir(index, method))
            row["coverage"] = coverage_fraction(bal.acquired_points, ref_kde)
            row["iterations"] = len(bal.history)
            row["converged"] = bal.converged
        rows[method] = row
    return rows


SCALAR_METRICS = (
    "kl",
    "mean_error",
    "mode_error",
    "std_error",
    "field_mean_error",
    "field_mode_error",
    "field_std_error",
    "mean_dice",
    "mean_rmse",
    "mean_cc",
    "mode_dice",
    "mode_rmse",
    "mode_cc",
    "n_simulations",
    "simulation_ratio",
    "coverage",
)
PAIRED_METRICS = (
    "kl",
    "mean_error",
    "mode_error",
    "std_error",
    "mean_dice",
    "mean_rmse",
    "mean_cc",
    "mode_dice",
    "mode_rmse",
    "mode_cc",
)
PAIRED_METHODS = (BAL_ENTROPY, BAL_VARIANCE)


def _paired_tests(per_case: Dict[str, Dict], methods: List[str], baseline: str) -> Dict[str, Dict]:
    """Paired t-tests of each latent BAL variant against ``baseline`` over the cases both finished"""
    tests = {}
    for method in PAIRED_METHODS:
        if method not in methods or baseline not in methods:
            continue
        shared = [rows for rows in per_case.values() if method in rows and baseline in rows]
        tests[f"{method}_vs_{baseline}"] = {
            metric: paired_t_test([r[method][metric] for r in shared], [r[baseline][metric] for r in shared])
            for metric in PAIRED_METRICS
        }
    return tests


def _completed_methods(run: RunDirectory, index: int) -> List[str]:
    return [m for m in METHODS if run.load_stage(f"case-{index:02d}-{m}") is not None]


def cmd_evaluate(cfg: ExperimentConfig, verbose: bool = False) -> Dict:
    """
    Compare every method against the direct-MCMC reference.

    Writes report.json, per_case.csv and aggregate.csv into the run directory.

    Returns:
        The report
    """
    run = RunDirectory(cfg.output_path)
    _require(run, "train-vae", "evaluate")
    cases = [i for i in range(len(cfg.cases)) if run.stage_complete(f"case-{i:02d}-{REFERENCE}")]
    if not cases:
        raise MissingPrerequisiteError(f"evaluate needs '{REFERENCE}' results for at least one case")

    per_case: Dict[str, Dict] = {}
    for index in tqdm(cases, desc="Evaluate", disable=not verbose):
        methods = [m for m in _completed_methods(run, index) if run.stage_complete(f"case-{index:02d}-{m}")]
        per_case[f"{index:02d}"] = _case_metrics(cfg, run, index, methods)
        logger.info(f"[Evaluate] case {index}: {', '.join(methods)}")

    methods = [m for m in METHODS if any(m in rows for rows in per_case.values())]
    aggregate_rows = {
        m: {metric: aggregate([rows[m].get(metric, np.nan) for rows in per_case.values() if m in rows]) for metric in SCALAR_METRICS}
        for m in methods
    }
    tests = _paired_tests(per_case, methods, BAL_UCB)
    tests_vs_two_stage = _paired_tests(per_case, methods, TWO_STAGE)

    report = {
        "name": cfg.name,
        "config_digest": config_digest(cfg),
        "reference": REFERENCE,
        "cases": per_case,
        "aggregate": aggregate_rows,
        "paired_tests": tests,
        "paired_tests_vs_two_stage": tests_vs_two_stage,
    }
    write_json(run.report_path, report)
    _write_per_case_csv(run.root / "per_case.csv", per_case)
    _write_aggregate_csv(run.root / "aggregate.csv", aggregate_rows)
    run.write_manifest(config_digest(cfg))
    logger.info(f"[Evaluate] Report for {len(per_case)} cases written to {run.report_path}")
    return report


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return "" if not np.isfinite(value) else repr(value)
    return str(value)


def _write_per_case_csv(path: Path, per_case: Dict[str, Dict]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["case", "method", *SCALAR_METRICS])
        for case, rows in per_case.items():
            for method, row in rows.items():
                writer.writerow([case, method, *[_fmt(row.get(m, float("nan"))) for m in SCALAR_METRICS]])


def _write_aggregate_csv(path: Path, aggregate_rows: Dict[str, Dict]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "metric", "mean", "std", "n"])
        for method, metrics in aggregate_rows.items():
            for metric, agg in metrics.items():
                writer.writerow([method, metric, _fmt(agg["mean"]), _fmt(agg["std"]), agg["n"]])
