import json

import numpy as np
import pytest
import torch
from scipy.stats import mannwhitneyu, shapiro

from minority_lab.conditioning import build_vocab
from minority_lab.denoiser import TrainConfig, base_prompt, train_denoiser
from minority_lab.evaluation import in_batch_similarity, minority_hit_rate
from minority_lab.samplers import (SamplerConfig, cads_gamma, read_run, run_sampler, sample_cads, sample_ddim,
                                   sample_diverse_batch, sample_minority_prompt, sample_sgms, sample_streams,
                                   with_overrides, write_run)
from minority_lab.world import true_log_density

W1 = SamplerConfig(w=1.0)


def test_config_validation():
    for bad in ({"N": 0}, {"K": 0}, {"m": 0}, {"tau1": 0.9, "tau2": 0.5}, {"tau1": -0.1}):
        with pytest.raises(ValueError):
            SamplerConfig(**bad)
    d = SamplerConfig()
    assert (d.T, d.w, d.N, d.K, d.lam, d.s_schedule, d.m, d.position) == (50, 7.5, 3, 3, 1.0, "inverse", 1, "postfix")
    assert with_overrides(d, K=5, lr=None).K == 5 and with_overrides(d, lr=None).lr == d.lr


def test_streams_are_independent_and_seeded():
    a = sample_streams(3, 2)
    b = sample_streams(3, 2)
    draws_a = [[g.standard_normal(4) for g in s] for s in a]
    draws_b = [[g.standard_normal(4) for g in s] for s in b]
    for xa, xb in zip(draws_a, draws_b):
        for u, v in zip(xa, xb):
            assert np.array_equal(u, v)
    flat = [tuple(x) for s in draws_a for x in s]
    assert len(set(flat)) == len(flat)
    # offset addresses the same per-sample stream as a larger batch
    assert np.array_equal(sample_streams(3, 1, offset=1)[0][0].standard_normal(4),
                          sample_streams(3, 2)[0][1].standard_normal(4))


def test_ddim_deterministic(world, analytic):
    p = base_prompt(world, 0)
    a = sample_ddim(analytic, p, 0, SamplerConfig(seed=7), n=8)
    b = sample_ddim(analytic, p, 0, SamplerConfig(seed=7), n=8)
    assert np.array_equal(a.latents, b.latents)
    assert not np.array_equal(a.latents, sample_ddim(analytic, p, 0, SamplerConfig(seed=8), n=8).latents)


def test_ddim_standard_normal_world(gauss_world, gauss_analytic):
    X = sample_ddim(gauss_analytic, base_prompt(gauss_world, 0), 0, W1, n=2000).latents
    assert np.all(np.abs(X.mean(0)) < 0.1)
    assert np.all(np.abs(np.cov(X.T) - np.eye(2)) < 0.1)
    assert shapiro(X[:500, 0]).pvalue > 1e-3


def test_ddim_hit_rate_matches_minority_mass(world, analytic):
    for c in range(world.n_conditions):
        X = sample_ddim(analytic, base_prompt(world, c), c, W1, n=2000, offset=2000 * c).latents
        assert abs(minority_hit_rate(world, c, X) - 0.10) <= 0.03


def test_t_mismatch_rejected(world, analytic):
    with pytest.raises(ValueError):
        sample_ddim(analytic, base_prompt(world, 0), 0, SamplerConfig(T=20), n=1)


@pytest.mark.parametrize("w", [1.0, 7.5])
def test_degenerate_configs_equal_ddim(world, analytic, w):
    p = base_prompt(world, 1)
    ref = sample_ddim(analytic, p, 1, SamplerConfig(w=w, seed=2), n=6).latents
    cases = [
        (sample_minority_prompt, SamplerConfig(w=w, seed=2, N=51)),
        (sample_minority_prompt, SamplerConfig(w=w, seed=2, lr=0.0)),
        (sample_sgms, SamplerConfig(w=w, seed=2, N=51)),
        (sample_sgms, SamplerConfig(w=w, seed=2, sgms_lr=0.0)),
        (sample_diverse_batch, SamplerConfig(w=w, seed=2, N=51, batch=2)),
        (sample_diverse_batch, SamplerConfig(w=w, seed=2, lr=0.0, batch=3)),
    ]
    for fn, cfg in cases:
        assert np.array_equal(fn(analytic, p, 1, cfg, n=6).latents, ref), (fn.__name__, cfg)


def test_minority_records_schema_and_determinism(world, analytic):
    p = base_prompt(world, 2)
    cfg = SamplerConfig(w=1.0, seed=4)
    a = sample_minority_prompt(analytic, p, 2, cfg, n=3)
    b = sample_minority_prompt(analytic, p, 2, cfg, n=3)
    assert np.array_equal(a.latents, b.latents)
    s = a.samples[0]
    # optimisation fires at every t divisible by N
    assert [tr["t"] for tr in s["objective_trace"]] == [t for t in range(50, 0, -1) if t % 3 == 0]
    assert all(len(tr["values"]) == cfg.K and tr["s"] == max(50 - tr["t"], 1) for tr in s["objective_trace"])
    assert s["v_summary"]["init_mode"] == "default" and len(s["v_summary"]["steps"]) == 16
    assert s["cond"] == 2 and s["seed"] == [4, 0]


def test_minority_fallback_flag_changes_non_optimised_steps(world, analytic):
    p = base_prompt(world, 0)
    on = sample_minority_prompt(analytic, p, 0, SamplerConfig(w=1.0, seed=1), n=4).latents
    off = sample_minority_prompt(analytic, p, 0, SamplerConfig(w=1.0, seed=1, fallback=False), n=4).latents
    assert not np.array_equal(on, off)


def test_sgms_lowers_true_density(world, analytic):
    lp_d, lp_s = [], []
    for c in range(world.n_conditions):
        p = base_prompt(world, c)
        lp_d.append(true_log_density(world, c, sample_ddim(analytic, p, c, W1, n=50, offset=50 * c).latents))
        lp_s.append(true_log_density(world, c, sample_sgms(analytic, p, c, W1, n=50, offset=50 * c).latents))
    lp_d, lp_s = np.concatenate(lp_d), np.concatenate(lp_s)
    assert lp_s.mean() < lp_d.mean()
    assert mannwhitneyu(lp_s, lp_d, alternative="less").pvalue < 0.05


def test_sgms_deterministic(world, analytic):
    p = base_prompt(world, 3)
    a = sample_sgms(analytic, p, 3, SamplerConfig(seed=5), n=3)
    b = sample_sgms(analytic, p, 3, SamplerConfig(seed=5), n=3)
    assert np.array_equal(a.latents, b.latents)


def test_cads_gamma():
    assert cads_gamma(50, 50, 0.8, 1.0) == 0.0
    assert cads_gamma(40, 50, 0.8, 1.0) == 1.0
    assert cads_gamma(45, 50, 0.8, 1.0) == pytest.approx(0.5)
    assert all(cads_gamma(t, 50, 0.0, 0.0) == 1.0 for t in range(0, 1))
    assert all(cads_gamma(t, 50, 0.0, 0.0) == 0.0 for t in range(1, 51))
    g = [cads_gamma(t, 50, 0.3, 0.7) for t in range(50, 0, -1)]
    assert all(x <= y for x, y in zip(g, g[1:]))


def test_cads_degenerate_and_deterministic(world, analytic):
    p = base_prompt(world, 0)
    ref = sample_ddim(analytic, p, 0, SamplerConfig(seed=3), n=5).latents
    # gamma == 1 everywhere: no eta draws, plain DDIM
    assert np.array_equal(sample_cads(analytic, p, 0, SamplerConfig(seed=3, tau1=1.0, tau2=1.0), n=5).latents, ref)
    a = sample_cads(analytic, p, 0, SamplerConfig(seed=3, noise_scale=0.0), n=5).latents
    b = sample_cads(analytic, p, 0, SamplerConfig(seed=9, noise_scale=0.0), n=5, ).latents
    # scaling-only variant draws no randomness beyond the initial noise
    assert np.array_equal(a, sample_cads(analytic, p, 0, SamplerConfig(seed=3, noise_scale=0.0), n=5).latents)
    assert not np.array_equal(a, b)


def test_cads_tau_zero_reading(world, analytic):
    # tau1 = tau2 = 0 puts every step with t >= 1 above tau2: gamma = 0 throughout
    p = base_prompt(world, 0)
    r = sample_cads(analytic, p, 0, SamplerConfig(seed=3, tau1=0.0, tau2=0.0), n=2)
    assert np.all(np.isfinite(r.latents))


def _group_ibs(X, size=4):
    return np.array([in_batch_similarity(X[i:i + size]) for i in range(0, len(X) - size + 1, size)])


def test_cads_ibs_not_above_ddim(world, analytic):
    ibs_c, ibs_d = [], []
    for c in range(world.n_conditions):
        p = base_prompt(world, c)
        ibs_d.append(_group_ibs(sample_ddim(analytic, p, c, SamplerConfig(), n=200, offset=200 * c).latents))
        ibs_c.append(_group_ibs(sample_cads(analytic, p, c, SamplerConfig(), n=200, offset=200 * c).latents))
    assert np.concatenate(ibs_c).mean() <= np.concatenate(ibs_d).mean()


def test_diverse_errors(world, analytic):
    p = base_prompt(world, 0)
    with pytest.raises(ValueError):
        sample_diverse_batch(analytic, p, 0, SamplerConfig(batch=1))
    with pytest.raises(ValueError):
        sample_diverse_batch(analytic, p, 0, SamplerConfig(batch=4), n=6)


def test_diverse_groups_and_determinism(world, analytic):
    p = base_prompt(world, 0)
    cfg = SamplerConfig(w=1.0, batch=2, seed=1)
    a = sample_diverse_batch(analytic, p, 0, cfg, n=4)
    b = sample_diverse_batch(analytic, p, 0, cfg, n=4)
    assert np.array_equal(a.latents, b.latents)
    assert [s["group"] for s in a.samples] == [0, 0, 1, 1]


def test_diverse_identical_noise_stays_symmetric(world, analytic):
    # two trajectories from the same z_T see a zero repulsion gradient and never separate
    from minority_lab.objectives import ObjectiveContext, ObjectiveSpec, grad_v
    from minority_lab.conditioning import init_token
    ctx = ObjectiveContext(analytic, analytic.vocab, base_prompt(world, 0).with_placeholder(1), 0)
    z = torch.tensor(np.random.default_rng(0).standard_normal((1, 2))).expand(2, -1)
    rep = grad_v(ObjectiveSpec(kind="diversity"), ctx, z, 30, 1, init_token(analytic.vocab).v, [])
    assert torch.all(rep.grad == 0)


def test_diverse_pair_distance(world, analytic):
    # pilot: 98% of 200 pairs at least as far apart as the DDIM pair; bound 70%
    cfg = SamplerConfig(w=1.0, batch=2)
    p = base_prompt(world, 0)
    d = sample_diverse_batch(analytic, p, 0, cfg, n=400).latents.reshape(200, 2, 2)
    dd = sample_ddim(analytic, p, 0, cfg, n=400).latents.reshape(200, 2, 2)
    frac = np.mean(np.linalg.norm(d[:, 0] - d[:, 1], axis=1) >= np.linalg.norm(dd[:, 0] - dd[:, 1], axis=1))
    assert frac >= 0.7


def test_write_read_roundtrip(world, analytic, tmp_path):
    r = sample_minority_prompt(analytic, base_prompt(world, 1), 1, SamplerConfig(w=1.0, seed=2), n=3)
    r.extra["label"] = "ours"
    rec, man = write_run(r, tmp_path, checkpoint_sha256="analytic")
    m = json.loads(man.read_text())
    assert m["n"] == 3 and m["config"]["K"] == 3 and m["checkpoint_sha256"] == "analytic" and m["label"] == "ours"
    assert len(rec.read_text().splitlines()) == 3
    back = read_run(rec)
    assert np.array_equal(back.latents, r.latents) and back.config == r.config and back.extra == {"label": "ours"}
    bad = tmp_path / "bad_c0.jsonl"
    bad.write_text('{"cond": 0}\n')
    (tmp_path / "bad_c0.manifest.json").write_text(man.read_text())
    with pytest.raises(ValueError):
        read_run(bad)


def test_run_sampler_guards(world, sched, analytic):
    with pytest.raises(ValueError):
        run_sampler("euler", analytic, base_prompt(world, 0), 0, SamplerConfig(), 1)
    model, _ = train_denoiser(world, build_vocab(world), TrainConfig(steps=3, dropout=0.0), sched)
    with pytest.raises(ValueError, match="unconditional"):
        run_sampler("ddim", model, base_prompt(world, 0), 0, SamplerConfig(w=7.5), 1)
    assert run_sampler("ddim", model, base_prompt(world, 0), 0, SamplerConfig(w=1.0), 2).latents.shape == (2, 2)
