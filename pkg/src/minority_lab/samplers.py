"""DDIM-family samplers: baseline, token-optimising minority sampler, latent
guidance baseline, conditioning-noise baseline and batch diversity sampler.

Every sampler runs its n trajectories in lockstep as one batch.  Sample i
owns three random streams derived from ``(seed, i)``: initial noise,
per-iteration objective noise, and conditioning noise.  Methods sharing a
seed therefore start from identical z_T.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .conditioning import Prompt, encode, encode_null, init_token
from .objectives import Adam, ObjectiveContext, ObjectiveSpec, draw_normal, grad_z, optimize_emb
from .schedule import cfg_combine, ddim_step

SAMPLERS = ("ddim", "minority", "sgms", "cads", "diverse")


@dataclass(frozen=True)
class SamplerConfig:
    T: int = 50
    w: float = 7.5
    N: int = 3
    K: int = 3
    lr: float = 2e-3
    lam: float = 1.0
    s_schedule: str | int = "inverse"
    kind: str = "ours_sg"
    init_mode: str = "default"
    init_word: str | None = None
    m: int = 1
    position: str = "postfix"
    fallback: bool = True
    seed: int = 0
    # latent-guidance baseline
    sgms_lr: float = 0.0075
    sgms_s: int | None = None  # None -> round(0.75 T)
    # conditioning-noise baseline
    tau1: float = 0.8
    tau2: float = 1.0
    noise_scale: float = 0.1
    # diversity sampler
    batch: int = 4

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if not 0 <= self.tau1 <= self.tau2 <= 1:
            raise ValueError("need 0 <= tau1 <= tau2 <= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunRecord:
    method: str
    config: SamplerConfig
    cond: int
    prompt: str
    samples: list  # one dict per sample
    wall_clock: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def latents(self) -> np.ndarray:
        return np.array([s["latent"] for s in self.samples])

    def manifest(self, **hashes) -> dict:
        return {"method": self.method, "cond": self.cond, "prompt": self.prompt, "n": len(self.samples),
                "config": self.config.to_dict(), "config_hash": self.config.hash(),
                "wall_clock_s": self.wall_clock, **hashes, **self.extra}


def sample_streams(seed: int, n: int, offset: int = 0):
    """(init, objective, conditioning-noise) generators for each sample."""
    streams = [np.random.SeedSequence([seed, offset + i]).spawn(3) for i in range(n)]
    return tuple([np.random.default_rng(s[j]) for s in streams] for j in range(3))


def _check_model(model, cfg: SamplerConfig):
    if model.sched.T != cfg.T:
        raise ValueError(f"config T={cfg.T} does not match the model schedule T={model.sched.T}")


def _guided_eps(model, z, t, C, cond, C_null, w):
    eps = model.eps(z, t, C, cond)
    if w != 1.0:
        eps = cfg_combine(eps, model.eps(z, t, C_null, None), w)
    return eps


def _initial(model, rngs) -> torch.Tensor:
    d = model.world.d if hasattr(model, "world") else model.d
    return draw_normal(rngs, d)


def _record(method, cfg, cond, prompt, z, seeds_offset, traces=None, v_summaries=None, t0=None, extra=None):
    samples = []
    for i in range(z.shape[0]):
        s = {"index": seeds_offset + i, "seed": [cfg.seed, seeds_offset + i], "cond": cond, "prompt": str(prompt),
             "latent": z[i].tolist()}
        if traces is not None:
            s["objective_trace"] = traces[i]
        if v_summaries is not None:
            s["v_summary"] = v_summaries[i]
        samples.append(s)
    return RunRecord(method=method, config=cfg, cond=cond, prompt=str(prompt), samples=samples,
                     wall_clock=time.perf_counter() - t0 if t0 else 0.0, extra=extra or {})


def _context(model, prompt: Prompt, cond: int, cfg: SamplerConfig) -> ObjectiveContext:
    return ObjectiveContext(model=model, vocab=model.vocab, prompt=prompt.base.with_placeholder(cfg.m, cfg.position),
                            cond=cond)


@torch.no_grad()
def sample_ddim(model, prompt: Prompt, cond: int, cfg: SamplerConfig, n: int = 1, offset: int = 0) -> RunRecord:
    _check_model(model, cfg)
    t0 = time.perf_counter()
    init, _, _ = sample_streams(cfg.seed, n, offset)
    C = encode(model.vocab, prompt.base)
    C_null = encode_null(model.vocab)
    z = _initial(model, init)
    for t in range(cfg.T, 0, -1):
        z = ddim_step(z, _guided_eps(model, z, t, C, cond, C_null, cfg.w), t, model.sched)
    return _record("ddim", cfg, cond, prompt.base, z, offset, t0=t0)


def _optimization_enabled(cfg: SamplerConfig) -> bool:
    # lr = 0 leaves v at its initial value; treat it as "no prompt optimisation"
    return cfg.lr > 0 and cfg.N <= cfg.T


def sample_minority_prompt(model, prompt: Prompt, cond: int, cfg: SamplerConfig, n: int = 1,
                           offset: int = 0) -> RunRecord:
    """Token-embedding optimisation every N steps, warm-started along the trajectory."""
    _check_model(model, cfg)
    t0 = time.perf_counter()
    init, eps_rngs, _ = sample_streams(cfg.seed, n, offset)
    ctx = _context(model, prompt, cond, cfg)
    spec = ObjectiveSpec(kind=cfg.kind, s_schedule=cfg.s_schedule, lam=cfg.lam, w=cfg.w)
    tok = init_token(model.vocab, cfg.init_mode, cfg.m, seed=cfg.seed, word=cfg.init_word)
    v = tok.v.expand(n, -1, -1).clone()
    v0 = v.clone()
    z = _initial(model, init)
    enabled = _optimization_enabled(cfg)
    traces = [[] for _ in range(n)]
    v_sums = [{"init_mode": tok.init_mode, "init_word": tok.init_word, "steps": []} for _ in range(n)]
    C_latest = None
    for t in range(cfg.T, 0, -1):
        C_use = ctx.C_base
        if enabled and t % cfg.N == 0:
            s = spec.s_for(t, cfg.T)
            res = optimize_emb(z, v, spec, ctx, t, cfg.K, cfg.lr, s=s, rngs=eps_rngs)
            v = res.v.detach()
            with torch.no_grad():
                C_latest = encode(model.vocab, ctx.prompt, v)
            C_use = C_latest
            vals = np.array(res.values)  # (K, n)
            disp = (v - v0).flatten(1).norm(dim=1)
            for i in range(n):
                traces[i].append({"t": t, "s": s, "values": vals[:, i].tolist()})
                v_sums[i]["steps"].append({"t": t, "displacement": float(disp[i])})
        elif not cfg.fallback and C_latest is not None:
            C_use = C_latest
        with torch.no_grad():
            z = ddim_step(z, _guided_eps(model, z, t, C_use, cond, ctx.C_null, cfg.w), t, model.sched)
    for i in range(n):
        v_sums[i]["final_norm"] = float(v[i].norm())
    return _record("minority", cfg, cond, prompt.base, z, offset, traces, v_sums, t0)


def sample_sgms(model, prompt: Prompt, cond: int, cfg: SamplerConfig, n: int = 1, offset: int = 0) -> RunRecord:
    """Latent-space guidance: Adam ascent on z_t itself every N steps."""
    _check_model(model, cfg)
    t0 = time.perf_counter()
    init, eps_rngs, _ = sample_streams(cfg.seed, n, offset)
    ctx = _context(model, prompt, cond, cfg)
    s_fixed = cfg.sgms_s if cfg.sgms_s is not None else int(math.floor(0.75 * cfg.T + 0.5))
    spec = ObjectiveSpec(kind="metric_cfg", s_schedule=s_fixed, w=cfg.w)
    z = _initial(model, init)
    traces = [[] for _ in range(n)]
    for t in range(cfg.T, 0, -1):
        if t % cfg.N == 0 and cfg.N <= cfg.T:
            opt = Adam(z, cfg.sgms_lr)
            vals = []
            for _ in range(cfg.K):
                rep = grad_z(spec, ctx, opt.param, t, s_fixed, None, [draw_normal(eps_rngs, z.shape[-1])])
                vals.append(rep.values.tolist())
                opt.ascend(rep.grad)
            z = opt.param
            vals = np.array(vals)
            for i in range(n):
                traces[i].append({"t": t, "s": s_fixed, "values": vals[:, i].tolist()})
        with torch.no_grad():
            z = ddim_step(z, _guided_eps(model, z, t, ctx.C_base, cond, ctx.C_null, cfg.w), t, model.sched)
    return _record("sgms", cfg, cond, prompt.base, z, offset, traces, None, t0)


def cads_gamma(t: int, T: int, tau1: float, tau2: float) -> float:
    """1 below tau1, 0 above tau2, linear in between (u = t / T)."""
    u = t / T
    if u <= tau1:
        return 1.0
    if u >= tau2:
        return 0.0
    return (tau2 - u) / (tau2 - tau1)


@torch.no_grad()
def sample_cads(model, prompt: Prompt, cond: int, cfg: SamplerConfig, n: int = 1, offset: int = 0) -> RunRecord:
    """Annealed Gaussian noise on the conditioning vector."""
    _check_model(model, cfg)
    t0 = time.perf_counter()
    init, _, noise_rngs = sample_streams(cfg.seed, n, offset)
    C = encode(model.vocab, prompt.base)
    C_null = encode_null(model.vocab)
    z = _initial(model, init)
    for t in range(cfg.T, 0, -1):
        g = cads_gamma(t, cfg.T, cfg.tau1, cfg.tau2)
        C_t = C
        if g < 1.0:
            eta = draw_normal(noise_rngs, C.shape[-1])
            C_t = math.sqrt(g) * C + cfg.noise_scale * math.sqrt(1.0 - g) * eta
        z = ddim_step(z, _guided_eps(model, z, t, C_t, cond, C_null, cfg.w), t, model.sched)
    return _record("cads", cfg, cond, prompt.base, z, offset, t0=t0)


def sample_diverse_batch(model, prompt: Prompt, cond: int, cfg: SamplerConfig, n: int | None = None,
                         offset: int = 0) -> RunRecord:
    """Groups of ``cfg.batch`` trajectories sharing one v that maximises in-group spread."""
    _check_model(model, cfg)
    B = cfg.batch
    if B < 2:
        raise ValueError("batch size must be >= 2")
    n = B if n is None else n
    if n % B:
        raise ValueError(f"n={n} must be a multiple of the batch size {B}")
    t0 = time.perf_counter()
    ctx = _context(model, prompt, cond, cfg)
    spec = ObjectiveSpec(kind="diversity")
    enabled = _optimization_enabled(cfg)
    samples = []
    for g0 in range(0, n, B):
        init, _, _ = sample_streams(cfg.seed, B, offset + g0)
        tok = init_token(model.vocab, cfg.init_mode, cfg.m, seed=cfg.seed, word=cfg.init_word)
        v = tok.v
        z = _initial(model, init)
        trace, C_latest = [], None
        for t in range(cfg.T, 0, -1):
            C_use = ctx.C_base
            if enabled and t % cfg.N == 0:
                res = optimize_emb(z, v, spec, ctx, t, cfg.K, cfg.lr, s=1)
                v = res.v.detach()
                with torch.no_grad():
                    C_latest = encode(model.vocab, ctx.prompt, v)
                C_use = C_latest
                trace.append({"t": t, "values": [float(np.sum(x)) for x in res.values]})
            elif not cfg.fallback and C_latest is not None:
                C_use = C_latest
            with torch.no_grad():
                z = ddim_step(z, _guided_eps(model, z, t, C_use, cond, ctx.C_null, cfg.w), t, model.sched)
        rec = _record("diverse", cfg, cond, prompt.base, z, offset + g0, [trace] * B)
        for s in rec.samples:
            s["group"] = g0 // B
        samples.extend(rec.samples)
    return RunRecord(method="diverse", config=cfg, cond=cond, prompt=str(prompt.base), samples=samples,
                     wall_clock=time.perf_counter() - t0)


SAMPLER_FUNCS = {
    "ddim": sample_ddim,
    "minority": sample_minority_prompt,
    "sgms": sample_sgms,
    "cads": sample_cads,
    "diverse": sample_diverse_batch,
}


def run_sampler(name: str, model, prompt: Prompt, cond: int, cfg: SamplerConfig, n: int) -> RunRecord:
    if name not in SAMPLER_FUNCS:
        raise ValueError(f"unknown sampler {name!r}; expected one of {SAMPLERS}")
    if cfg.w != 1.0 and getattr(model, "variant", "") == "trained" and not _has_null_branch(model):
        raise ValueError("w != 1 needs an unconditional branch, but this model was trained without dropout")
    return SAMPLER_FUNCS[name](model, prompt, cond, cfg, n)


def _has_null_branch(model) -> bool:
    return getattr(model, "null_branch_trained", True)


# -- persistence ------------------------------------------------------------------

def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_run(record: RunRecord, out_dir: str | Path, **hashes) -> tuple[Path, Path]:
    """JSON-lines sample file plus a manifest; returns both paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{record.method}_c{record.cond}"
    lines = "".join(_canonical(s) + "\n" for s in record.samples)
    rec_path = out / f"{stem}.jsonl"
    rec_path.write_text(lines)
    manifest = record.manifest(records_sha256=hashlib.sha256(lines.encode()).hexdigest(), **hashes)
    man_path = out / f"{stem}.manifest.json"
    man_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return rec_path, man_path


def read_run(rec_path: str | Path) -> RunRecord:
    rec_path = Path(rec_path)
    man_path = rec_path.with_name(rec_path.name.replace(".jsonl", ".manifest.json"))
    manifest = json.loads(man_path.read_text())
    samples = [json.loads(line) for line in rec_path.read_text().splitlines() if line.strip()]
    for s in samples:
        if "latent" not in s or "cond" not in s:
            raise ValueError(f"{rec_path}: sample record missing 'latent' or 'cond'")
    cfg = SamplerConfig(**manifest["config"])
    return RunRecord(method=manifest["method"], config=cfg, cond=manifest["cond"], prompt=manifest["prompt"],
                     samples=samples, wall_clock=manifest.get("wall_clock_s", 0.0),
                     extra={"label": manifest["label"]} if "label" in manifest else {})


def with_overrides(cfg: SamplerConfig, **kw) -> SamplerConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
