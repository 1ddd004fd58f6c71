"""Desk-scale lab for minority-focused prompt optimisation in diffusion samplers.

Gaussian-mixture toy worlds give exact densities and an exact denoiser, so
objectives, samplers and likelihood estimates can be checked against
closed-form oracles.
"""

from .conditioning import LearnableToken, Prompt, TextEncoder, build_vocab, encode, encode_null, init_token
from .denoiser import (AnalyticDenoiser, TrainConfig, TrainedDenoiser, TrainingDiverged, base_prompt, load_checkpoint,
                       make_analytic, predict_eps, save_checkpoint, train_denoiser)
from .evaluation import (EvalReport, aggregate_report, condition_consistency, in_batch_similarity, minority_hit_rate,
                         pf_ode_loglik, precision_recall)
from .objectives import ObjectiveContext, ObjectiveSpec, eval_objective, grad_v, optimize_emb
from .samplers import (RunRecord, SamplerConfig, sample_cads, sample_ddim, sample_diverse_batch,
                       sample_minority_prompt, sample_sgms)
from .schedule import NoiseSchedule, add_noise, cfg_combine, ddim_step, make_schedule, tweedie_denoise
from .world import ToyWorld, analytic_eps, classify_component, make_world, sample_data, true_log_density

__all__ = [
    "AnalyticDenoiser", "EvalReport", "LearnableToken", "NoiseSchedule", "ObjectiveContext", "ObjectiveSpec",
    "Prompt", "RunRecord", "SamplerConfig", "TextEncoder", "ToyWorld", "TrainConfig", "TrainedDenoiser",
    "TrainingDiverged", "add_noise", "aggregate_report", "analytic_eps", "base_prompt", "build_vocab",
    "cfg_combine", "classify_component", "condition_consistency", "ddim_step", "encode", "encode_null",
    "eval_objective", "grad_v", "in_batch_similarity", "init_token", "load_checkpoint", "make_analytic",
    "make_schedule", "make_world", "minority_hit_rate", "optimize_emb", "pf_ode_loglik", "precision_recall",
    "predict_eps", "sample_cads", "sample_data", "sample_ddim", "sample_diverse_batch", "sample_minority_prompt",
    "sample_sgms", "save_checkpoint", "train_denoiser", "true_log_density", "tweedie_denoise",
]
