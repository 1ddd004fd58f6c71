"""Reconstruction-style objectives over the placeholder embedding.

Notation used below: ``a`` is the first-branch clean estimate
x0_hat(z_t, C_v); ``z_s`` re-noises ``a`` to step s with a supplied noise
draw; ``b`` is the second-branch clean estimate of ``z_s``.  Stop-gradient
is ``Tensor.detach``: the value participates in the forward pass but is a
constant for differentiation.

Kinds:

* ``ours``      |a - b|^2, b conditioned on the base prompt, gradient through both branches
* ``ours_sg``   |a - sg(b)|^2 + lam |sg(a) - b|^2
* ``naive``     CFG estimates, b conditioned on C_v, sg on b
* ``flaw_cfg``  ``ours`` with CFG clean estimates in both branches
* ``flaw_sg``   ``ours`` with sg on b
* ``flaw_cv``   ``ours`` with b conditioned on C_v
* ``metric_cfg`` CFG estimates on the base prompt, sg on b (no v; used for latent guidance)
* ``diversity`` sum over ordered pairs i != j of |a_i - a_j|^2 with one shared v
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .conditioning import LearnableToken, Prompt, TextEncoder, encode, encode_null
from .schedule import DTYPE, NoiseSchedule, cfg_combine, tweedie_denoise

KINDS = ("metric_cfg", "naive", "ours", "ours_sg", "flaw_cfg", "flaw_sg", "flaw_cv", "diversity")
CFG_KINDS = ("metric_cfg", "naive", "flaw_cfg")


class NonFiniteObjective(FloatingPointError):
    pass


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str = "ours_sg"
    s_schedule: str | int = "inverse"  # "inverse" (s = T - t) or a fixed step
    lam: float = 1.0
    w: float = 1.0
    mc_samples: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown objective kind {self.kind!r}; expected one of {KINDS}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.s_schedule != "inverse" and not isinstance(self.s_schedule, int):
            raise ValueError("s_schedule must be 'inverse' or an integer step")

    def s_for(self, t: int, T: int) -> int:
        if self.s_schedule == "inverse":
            return min(max(T - t, 1), T)
        s = int(self.s_schedule)
        if not 1 <= s <= T:
            raise ValueError(f"fixed s={s} outside [1, {T}]")
        return s


@dataclass
class ObjectiveContext:
    """Everything an objective needs besides the latent, step and token."""

    model: object
    vocab: TextEncoder
    prompt: Prompt  # with placeholder slots (P_S)
    cond: int

    def __post_init__(self):
        with torch.no_grad():
            self.C_base = encode(self.vocab, self.prompt.base)
            self.C_null = encode_null(self.vocab)

    @property
    def sched(self) -> NoiseSchedule:
        return self.model.sched


@dataclass
class GradReport:
    value: float
    grad: torch.Tensor
    values: torch.Tensor  # per-sample objective values
    terms: dict = field(default_factory=dict)


def clean_estimate(ctx: ObjectiveContext, z: torch.Tensor, t: int, C: torch.Tensor, w: float) -> tuple:
    """(x0_hat, eps_used) with CFG scale w; w = 1 skips the unconditional call."""
    eps = ctx.model.eps(z, t, C, ctx.cond)
    if w != 1.0:
        eps = cfg_combine(eps, ctx.model.eps(z, t, ctx.C_null, None), w)
    return tweedie_denoise(z, eps, t, ctx.sched), eps


def _renoise(a: torch.Tensor, s: int, noise: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    ab = sched.alpha_bar[s]
    return math.sqrt(ab) * a + math.sqrt(1.0 - ab) * noise


def objective_terms(spec: ObjectiveSpec, ctx: ObjectiveContext, z_t: torch.Tensor, t: int, s: int,
                    v: torch.Tensor | None, noise: torch.Tensor) -> dict:
    """Per-sample objective for one noise draw, as a differentiable graph.

    z_t (B, d); v (B, m, e) per sample or (m, e) shared; noise (B, d).
    Returns a dict with ``value`` (B,) and per-term diagnostics.
    """
    sched = ctx.sched
    sched.check_step(t)
    sched.check_step(s)
    kind = spec.kind
    if kind == "diversity":
        return _diversity_terms(ctx, z_t, t, v)
    if kind == "metric_cfg":
        C_first = ctx.C_base
    else:
        if v is None:
            raise ValueError(f"objective {kind!r} needs a token embedding")
        C_first = encode(ctx.vocab, ctx.prompt, v)
    w_first = spec.w if kind in CFG_KINDS else 1.0
    a, _ = clean_estimate(ctx, z_t, t, C_first, w_first)
    z_s = _renoise(a, s, noise, sched)
    C_second = C_first if kind in ("naive", "flaw_cv") else ctx.C_base
    b, eps_b = clean_estimate(ctx, z_s, s, C_second, w_first)
    sq = lambda x: (x**2).sum(-1)  # noqa: E731
    out = {"a": a, "b": b, "z_s": z_s, "eps_second": eps_b}
    if kind == "ours_sg":
        j1 = sq(a - b.detach())
        j2 = sq(a.detach() - b)
        out.update(value=j1 + spec.lam * j2, J1=j1, J2=j2)
    elif kind in ("naive", "flaw_sg", "metric_cfg"):
        out["value"] = sq(a - b.detach())
    else:  # ours, flaw_cfg, flaw_cv
        out["value"] = sq(a - b)
    return out


def _diversity_terms(ctx: ObjectiveContext, z_t: torch.Tensor, t: int, v: torch.Tensor) -> dict:
    if z_t.shape[0] < 2:
        raise ValueError("diversity objective needs a batch of at least 2 latents")
    C = encode(ctx.vocab, ctx.prompt, v)
    a, _ = clean_estimate(ctx, z_t, t, C, 1.0)
    diff = a.unsqueeze(0) - a.unsqueeze(1)
    pair = (diff**2).sum(-1)  # (B, B), zero diagonal
    return {"a": a, "value": pair.sum(-1), "total": pair.sum()}


def _as_draws(eps_draws, spec: ObjectiveSpec) -> list[torch.Tensor]:
    if spec.kind == "diversity":
        return [None]
    draws = [torch.as_tensor(e, dtype=DTYPE) for e in eps_draws]
    if len(draws) != spec.mc_samples:
        raise ValueError(f"expected {spec.mc_samples} noise draws, got {len(draws)}")
    return draws


def _v_tensor(v) -> torch.Tensor | None:
    if v is None:
        return None
    return v.v if isinstance(v, LearnableToken) else v


def _averaged(spec, ctx, z_t, t, s, v, eps_draws) -> dict:
    draws = _as_draws(eps_draws, spec)
    acc = {}
    for noise in draws:
        terms = objective_terms(spec, ctx, z_t, t, s, v, noise)
        for k in ("value", "J1", "J2"):
            if k in terms:
                acc[k] = acc.get(k, 0) + terms[k] / len(draws)
    return acc


def eval_objective(spec: ObjectiveSpec, ctx: ObjectiveContext, z_t, t: int, s: int, v, eps_draws) -> torch.Tensor:
    """Monte-Carlo objective over exactly the supplied draws; per-sample values (B,).

    For ``diversity`` the single batch total is returned as a 0-d tensor.
    """
    z = torch.as_tensor(z_t, dtype=DTYPE)
    with torch.no_grad():
        acc = _averaged(spec, ctx, z, t, s, _v_tensor(v), eps_draws)
    return acc["value"].sum() if spec.kind == "diversity" else acc["value"]


def grad_v(spec: ObjectiveSpec, ctx: ObjectiveContext, z_t, t: int, s: int, v, eps_draws) -> GradReport:
    """Exact gradient of the objective w.r.t. every entry of v (per-sample v gets per-sample grads)."""
    z = torch.as_tensor(z_t, dtype=DTYPE)
    vt = _v_tensor(v)
    if vt is None:
        raise ValueError("grad_v needs a token embedding")
    vt = vt.detach().clone().requires_grad_(True)
    acc = _averaged(spec, ctx, z, t, s, vt, eps_draws)
    total = acc["value"].sum()
    if total.requires_grad:
        (g,) = torch.autograd.grad(total, vt, allow_unused=True)
    else:
        g = None
    if g is None:  # metric_cfg does not involve v
        g = torch.zeros_like(vt)
    terms = {k: acc[k].detach() for k in ("J1", "J2") if k in acc}
    return GradReport(value=float(total.detach()), grad=g.detach(), values=acc["value"].detach(), terms=terms)


def grad_z(spec: ObjectiveSpec, ctx: ObjectiveContext, z_t, t: int, s: int, v, eps_draws) -> GradReport:
    """Gradient w.r.t. the latent itself (latent-space guidance)."""
    z = torch.as_tensor(z_t, dtype=DTYPE).detach().clone().requires_grad_(True)
    acc = _averaged(spec, ctx, z, t, s, _v_tensor(v), eps_draws)
    total = acc["value"].sum()
    (g,) = torch.autograd.grad(total, z)
    return GradReport(value=float(total.detach()), grad=g.detach(), values=acc["value"].detach())


class Adam:
    """Elementwise Adam ascent on one tensor; fresh moments per instance."""

    def __init__(self, param: torch.Tensor, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.param = param.detach().clone()
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = torch.zeros_like(self.param)
        self.v = torch.zeros_like(self.param)
        self.k = 0

    def ascend(self, grad: torch.Tensor) -> torch.Tensor:
        self.k += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad**2
        if self.lr == 0:
            return self.param
        m_hat = self.m / (1 - self.b1**self.k)
        v_hat = self.v / (1 - self.b2**self.k)
        self.param = self.param + self.lr * m_hat / (v_hat.sqrt() + self.eps)
        return self.param


def draw_normal(rngs, shape_per_sample) -> torch.Tensor:
    """One standard-normal draw per sample, each from its own generator."""
    return torch.as_tensor(np.stack([r.standard_normal(shape_per_sample) for r in rngs]), dtype=DTYPE)


@dataclass
class OptimizeResult:
    v: torch.Tensor
    values: list  # objective value per iteration (evaluated before each update), per sample


def optimize_emb(z_t, v0, spec: ObjectiveSpec, ctx: ObjectiveContext, t: int, K: int, lr: float,
                 s: int | None = None, rngs=None, seed: int | None = None) -> OptimizeResult:
    """K Adam ascent steps on v, one fresh noise draw per iteration.

    ``rngs`` is one numpy Generator per latent; ``seed`` builds a single one
    when a lone latent is optimised.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    z = torch.as_tensor(z_t, dtype=DTYPE)
    single = z.dim() == 1
    if single:
        z = z[None]
    vt = _v_tensor(v0)
    batched_v = spec.kind != "diversity"
    if batched_v and vt.dim() == 2:
        vt = vt.expand(z.shape[0], -1, -1)
    if rngs is None and spec.kind != "diversity":
        if seed is None:
            raise ValueError("optimize_emb needs per-sample generators or a seed")
        rngs =[np.random.default_rng(seed)] if single else [np.random.default_rng([seed, i]) for i in range(len(z))]
    s = spec.s_for(t, ctx.sched.T) if s is None else s
    opt = Adam(vt, lr)
    values = []
    for _ in range(K):
        draws = [] if spec.kind == "diversity" else [draw_normal(rngs, z.shape[-1]) for _ in range(spec.mc_samples)]
        rep = grad_v(spec, ctx, z, t, s, opt.param, draws)
        if not (np.isfinite(rep.value) and torch.isfinite(rep.grad).all()):
            raise NonFiniteObjective(f"non-finite objective or gradient at t={t}, s={s}: value={rep.value}")
        values.append(rep.values.tolist())
        opt.ascend(rep.grad)
    v_out = opt.param
    if single and batched_v:
        v_out = v_out[0]
    return OptimizeResult(v=v_out, values=values)


def prop1_sides(ctx: ObjectiveContext, z_t, t: int, s: int, v, noise) -> tuple[torch.Tensor, torch.Tensor]:
    """Both sides of the single-draw weighted-objective / noise-regression identity.

    Left: ab_s / (1 - ab_s) * |a - b|^2 (the ``ours`` value); right:
    |noise - eps_theta(z_s, C)|^2.
    """
    spec = ObjectiveSpec(kind="ours")
    with torch.no_grad():
        terms = objective_terms(spec, ctx, torch.as_tensor(z_t, dtype=DTYPE), t, s, _v_tensor(v),
                                torch.as_tensor(noise, dtype=DTYPE))
    ab = ctx.sched.alpha_bar[s]
    lhs = ab / (1 - ab) * terms["value"]
    rhs = ((torch.as_tensor(noise, dtype=DTYPE) - terms["eps_second"]) ** 2).sum(-1)
    return lhs, rhs
