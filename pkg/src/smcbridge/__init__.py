"""Exact-approximate MCMC for state-space models.

Particle-filter likelihood estimation, conditional SMC with backward
sampling, annealed likelihood-ratio estimation, and the samplers built on
them, plus a config-driven experiment harness.
"""
from .ais import (AnnealingPath, DistanceVarianceTable, RatioEstimate,
                  UnsupportedPathError, ais_csmc_run, intermediate_logdensity,
                  ratio_variance_vs_distance, warm_start_path)
from .diagnostics import (DiagnosticsReport, LambdaSample, diagnostics_report,
                          ess_batch_means, iac_time, lambda_penalty_check,
                          msjd)
from .harness import (ConfigError, ExperimentConfig, ExperimentResult,
                      SamplerSetting, aggregate_report, build_model,
                      build_work_items, cell_label, generate_dataset,
                      load_config, load_dataset_json, load_trace_npz,
                      parse_trace_mode, proposal_sds_for, read_result_rows,
                      render_table, result_header, run_cell, run_experiment,
                      save_dataset_json, save_trace_npz, write_dict_rows_csv,
                      write_result_rows)
from .models import (Dataset, DomainError, LatentPath, ModelSpec,
                     ParamDomain, UnsupportedModelError, iid_gaussian_model,
                     joint_logdensity, nonlinear_benchmark_model, simulate)
from .rng import derive_rng, derive_seedseq, stream_fingerprint
from .samplers import (BridgeConfig, ChainState, ChainTrace, CsmcConfig,
                       RwProposal, SmcConfig, init_chain_state,
                       marginal_mh_step, mcmc_ais_step, mwpg_step, pmmh_step,
                       run_chain, spsa_gradient_estimate)
from .smc import (DegenerateParticlesError, LogLikeEstimate, ParticleSystem,
                  ProposalSpec, csmc_run, log_likelihood_estimate,
                  sample_smc_path, smc_run)

__version__ = "0.1.0"

__all__ = [
    "AnnealingPath", "BridgeConfig", "ChainState", "ChainTrace",
    "ConfigError", "CsmcConfig", "Dataset", "DegenerateParticlesError",
    "DistanceVarianceTable", "ExperimentResult", "SamplerSetting",
    "DiagnosticsReport", "DomainError", "ExperimentConfig", "LambdaSample",
    "LatentPath", "LogLikeEstimate", "ModelSpec", "ParamDomain",
    "ParticleSystem", "ProposalSpec", "RatioEstimate", "RwProposal",
    "SmcConfig", "UnsupportedModelError", "UnsupportedPathError",
    "aggregate_report", "ais_csmc_run", "build_model", "build_work_items",
    "cell_label", "csmc_run", "derive_rng",
    "derive_seedseq", "diagnostics_report", "ess_batch_means",
    "generate_dataset", "iac_time", "iid_gaussian_model", "init_chain_state",
    "intermediate_logdensity", "joint_logdensity", "lambda_penalty_check",
    "load_config", "load_dataset_json", "load_trace_npz",
    "log_likelihood_estimate", "marginal_mh_step", "mcmc_ais_step", "msjd",
    "mwpg_step", "nonlinear_benchmark_model", "parse_trace_mode", "pmmh_step",
    "proposal_sds_for", "read_result_rows", "render_table", "result_header",
    "run_cell",
    "ratio_variance_vs_distance", "run_chain", "run_experiment",
    "sample_smc_path", "save_dataset_json", "save_trace_npz", "simulate",
    "smc_run", "spsa_gradient_estimate", "stream_fingerprint",
    "warm_start_path", "write_dict_rows_csv", "write_result_rows",
]
