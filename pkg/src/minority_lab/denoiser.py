"""Noise-prediction models.

Two interchangeable variants expose ``eps(z, t, C, cond)``:

* :class:`TrainedDenoiser`, a small MLP trained by noise prediction with
  condition dropout;
* :class:`AnalyticDenoiser`, the exact posterior-mean predictor of a toy
  world.  It reads the conditioning vector through a soft nearest-reference
  lookup over the encodings of the prompts it "was trained on" (base
  prompt, base prompt + neutral placeholder, base prompt + attribute
  word), so a
  placeholder embedding can steer it the way it steers a trained network.

``cond=None`` requests the unconditional branch.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .conditioning import Prompt, TextEncoder, build_vocab, encode, encode_null
from .schedule import DTYPE, NoiseSchedule, make_schedule
from .world import MINORITY, ToyWorld, posterior_eps

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training loss became non-finite ({loss}) at step {step}")
        self.step = step
        self.loss = loss


def _check_t(t, T: int):
    tt = torch.as_tensor(t, dtype=DTYPE)
    if float(tt.min()) <= 0 or float(tt.max()) > T:
        raise ValueError(f"step {t} outside (0, {T}]")
    return tt


def attribute_prompt(world: ToyWorld, word: str) -> Prompt:
    cond, _ = world.attribute_words[word]
    return Prompt((world.conditions[cond].word, word))


def base_prompt(world: ToyWorld, cond: int) -> Prompt:
    return Prompt((world.condition(cond).word,))


def neutral_prompt(world: ToyWorld, cond: int) -> Prompt:
    """Base prompt with one postfix placeholder slot."""
    return Prompt((world.condition(cond).word,), m=1, position="postfix")


class AnalyticDenoiser:
    """Exact mixture denoiser with embedding-dependent mixture weights.

    Every condition c contributes reference embeddings: C_base (the
    condition word, mixture weights of c), the same prompt followed by the
    placeholder's reserved default row (a neutral word, same weights), and
    C_a for each attribute word a of c (condition word followed by a; all
    mass on a's component).  An arbitrary C mixes the reference weight
    vectors with softmax(-|C - C_j|^2 / 2h^2), h^2 = ``bandwidth`` times the
    smallest squared distance between references.

    With ``scope="global"`` the kernel runs over the references of all
    conditions and the resulting mixture spans every component, so a token
    embedding can drift towards another condition.  ``scope="condition"``
    restricts both to the requested condition.
    """

    variant = "analytic"

    def __init__(self, world: ToyWorld, sched: NoiseSchedule, vocab: TextEncoder, bandwidth: float = 0.1,
                 scope: str = "global"):
        if scope not in ("global", "condition"):
            raise ValueError("scope must be 'global' or 'condition'")
        self.world, self.sched, self.vocab = world, sched, vocab
        self.bandwidth, self.scope = bandwidth, scope
        sizes = [len(c.components) for c in world.conditions]
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self._blocks = [slice(int(offsets[c]), int(offsets[c + 1])) for c in range(world.n_conditions)]
        means, var, _ = world.null_arrays()
        self._all = (means, var)
        refs = []  # per condition: (embeddings, weight vectors over all components)
        with torch.no_grad():
            for c in range(world.n_conditions):
                _, _, logw = world.component_arrays(c)
                ph = vocab.embedding[vocab.placeholder_row][None]
                embs = [encode(vocab, base_prompt(world, c)), encode(vocab, neutral_prompt(world, c), ph)]
                full = torch.zeros(int(offsets[-1]), dtype=DTYPE)
                full[self._blocks[c]] = torch.exp(logw)
                weights = [full, full]
                for word, (ac, k) in sorted(world.attribute_words.items()):
                    if ac != c:
                        continue
                    embs.append(encode(vocab, attribute_prompt(world, word)))
                    onehot = torch.zeros_like(full)
                    onehot[self._blocks[c].start + k] = 1.0
                    weights.append(onehot)
                refs.append((torch.stack(embs), torch.stack(weights)))
        if scope == "global":
            R = torch.cat([r for r, _ in refs])
            P = torch.cat([p for _, p in refs])
            self._refs = [(R, P, self._two_h2(R))] * world.n_conditions
        else:
            self._refs = [(R, P[:, self._blocks[c]], self._two_h2(R)) for c, (R, P) in enumerate(refs)]

    def _two_h2(self, R: torch.Tensor) -> torch.Tensor:
        if len(R) < 2:
            return torch.tensor(2.0 * self.bandwidth, dtype=DTYPE)
        d2 = torch.cdist(R, R) ** 2
        return 2.0 * self.bandwidth * d2[~torch.eye(len(R), dtype=torch.bool)].min()

    def mixture_log_weights(self, C: torch.Tensor, cond: int) -> torch.Tensor:
        """Log mixture weights selected by C (over all components when scope is global)."""
        R, P, two_h2 = self._refs[cond]
        logits = -((C.unsqueeze(-2) - R) ** 2).sum(-1) / two_h2
        r = torch.softmax(logits, dim=-1)
        # far-away components can underflow to 0; the clamp keeps gradients finite
        return torch.log((r @ P).clamp_min(1e-300))

    def eps(self, z: torch.Tensor, t, C: torch.Tensor | None, cond: int | None) -> torch.Tensor:
        tt = _check_t(t, self.sched.T)
        ab = self.sched.alpha_bar_cont(tt)
        if cond is None:
            means, var, logw = self.world.null_arrays()
        elif C is None:
            means, var, logw = self.world.component_arrays(cond)
        elif self.scope == "global":
            means, var = self._all
            logw = self.mixture_log_weights(C, cond)
        else:
            means, var, _ = self.world.component_arrays(cond)
            logw = self.mixture_log_weights(C, cond)
        return posterior_eps(z, ab, means, var, logw)


def time_embedding(t: torch.Tensor, T: int, dim: int = 32) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=DTYPE) / half)
    x = (t / T * 1000.0)[..., None] * freqs
    return torch.cat([torch.sin(x), torch.cos(x)], dim=-1)


ROW_BLOCK = 32


class TrainedDenoiser(nn.Module):
    variant = "trained"
    null_branch_trained = True  # overwritten by train_denoiser / load_checkpoint

    def __init__(self, d: int, sched: NoiseSchedule, vocab: TextEncoder, hidden: int = 128, t_dim: int = 32,
                 seed: int = 0):
        super().__init__()
        self.d, self.sched, self.vocab, self.t_dim = d, sched, vocab, t_dim
        g = torch.Generator().manual_seed(seed + 1)
        n_in = d + t_dim + vocab.c_e

        def lin(i, o):
            layer = nn.Linear(i, o, dtype=DTYPE)
            with torch.no_grad():
                bound = 1.0 / math.sqrt(i)
                layer.weight.copy_(torch.rand(o, i, generator=g, dtype=DTYPE) * 2 * bound - bound)
                layer.bias.zero_()
            return layer

        self.net = nn.Sequential(lin(n_in, hidden), nn.SiLU(), lin(hidden, hidden), nn.SiLU(), lin(hidden, d))

    def eps(self, z: torch.Tensor, t, C: torch.Tensor | None, cond: int | None = None) -> torch.Tensor:
        tt = _check_t(t, self.sched.T)
        if C is None:
            C = encode_null(self.vocab)
        B = z.shape[0]
        temb = time_embedding(tt.expand(B) if tt.dim() == 0 else tt, self.sched.T, self.t_dim)
        C = C.expand(B, -1) if C.dim() == 1 else C
        return self.forward_rows(torch.cat([z, temb, C], dim=-1))

    def forward_rows(self, x: torch.Tensor) -> torch.Tensor:
        """Network output whose rows do not depend on the batch size.

        BLAS picks different kernels for different matrix shapes, so a plain
        forward pass can change a row's last bits when the batch grows. Here
        every matmul runs on zero-padded blocks of ``ROW_BLOCK`` rows.
        """
        B = x.shape[0]
        pad = (-B) % ROW_BLOCK
        if pad:
            x = torch.cat([x, x.new_zeros(pad, x.shape[1])])
        x = x.view(-1, ROW_BLOCK, x.shape[1])
        for layer in self.net:
            if isinstance(layer, nn.Linear):
                x = torch.bmm(x, layer.weight.T.expand(x.shape[0], -1, -1)) + layer.bias
            else:
                x = layer(x)
        return x.reshape(-1, x.shape[-1])[:B]


def predict_eps(model, z_t, t, C=None, cond=None) -> torch.Tensor:
    """Single-call convenience wrapper; accepts an unbatched latent."""
    z = torch.as_tensor(z_t, dtype=DTYPE)
    single = z.dim() == 1
    out = model.eps(z[None] if single else z, t, C, cond)
    return out[0] if single else out


# -- training -------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 256
    lr: float = 1e-3
    dropout: float = 0.1
    seed: int = 0
    ema_decay: float | None = None
    attribute_rate: float = 0.5
    neutral_rate: float = 0.2
    val_size: int = 4096

    def __post_init__(self):
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout probability must lie in [0, 1)")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch size must be positive")


@dataclass
class TrainReport:
    final_loss: float
    val_loss: float
    steps: int
    null_branch_trained: bool
    loss_curve: list = field(default_factory=list)


def _draw_batch(world: ToyWorld, rng: np.random.Generator, n: int, attribute_rate: float,
                neutral_rate: float):
    """(z0, prompt index) where prompt index addresses :func:`_prompt_table`.

    Minority samples carry their attribute word with probability
    ``attribute_rate``; remaining samples get the neutral placeholder
    appended with probability ``neutral_rate``.
    """
    n_cond = world.n_conditions
    conds = rng.integers(0, n_cond, size=n)
    z0 = np.empty((n, world.d))
    prompt_idx = conds.copy()
    attr_of = {(c, k): i for i, (c, k) in enumerate(world.attribute_words[w] for w in _attr_order(world))}
    for c in range(n_cond):
        sel = np.flatnonzero(conds == c)
        comps = world.conditions[c].components
        w = np.array([x.weight for x in comps])
        idx = rng.choice(len(comps), size=len(sel), p=w / w.sum())
        means = np.array([x.mean for x in comps])
        sd = np.array([x.stdev for x in comps])
        z0[sel] = means[idx] + sd[idx, None] * rng.standard_normal((len(sel), world.d))
        use_attr = rng.random(len(sel)) < attribute_rate
        use_neutral = rng.random(len(sel)) < neutral_rate
        for j, (i, k) in enumerate(zip(sel, idx)):
            if comps[k].tag == MINORITY and use_attr[j] and (c, k) in attr_of:
                prompt_idx[i] = 2 * n_cond + attr_of[(c, k)]
            elif use_neutral[j]:
                prompt_idx[i] = n_cond + c
    return z0, prompt_idx


def _attr_order(world: ToyWorld) -> list[str]:
    return sorted(world.attribute_words)


def _prompt_table(world: ToyWorld) -> list[Prompt]:
    """Base prompts, base + neutral placeholder, base + attribute word."""
    n = world.n_conditions
    return ([base_prompt(world, c) for c in range(n)] + [neutral_prompt(world, c) for c in range(n)]
            + [attribute_prompt(world, w) for w in _attr_order(world)])


def _encode_table(vocab: TextEncoder, prompts: list[Prompt]) -> torch.Tensor:
    # group prompts of equal slot count into one batched slot tensor
    out = [None] * len(prompts)
    by_len = {}
    for i, p in enumerate(prompts):
        by_len.setdefault(len(p.content_tokens) + p.m, []).append(i)
    neutral_v = vocab.embedding[vocab.placeholder_row][None]
    for _, idxs in by_len.items():
        slots = torch.stack([vocab.slots(prompts[i], neutral_v if prompts[i].m else None) for i in idxs])
        enc = vocab._encode_slots(slots)
        for j, i in enumerate(idxs):
            out[i] = enc[j]
    return torch.stack(out)


def train_denoiser(world: ToyWorld, vocab: TextEncoder, cfg: TrainConfig, sched: NoiseSchedule | None = None,
                   progress: bool = False) -> tuple[TrainedDenoiser, TrainReport]:
    """Noise-prediction training of the MLP and the encoder, jointly."""
    sched = sched or make_schedule()
    torch.manual_seed(cfg.seed)
    model = TrainedDenoiser(world.d, sched, vocab, seed=cfg.seed)
    params = list(model.net.parameters()) + list(vocab.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=(0.9, 0.999))
    ema = [p.detach().clone() for p in params] if cfg.ema_decay else None
    rng = np.random.default_rng(cfg.seed)
    prompts = _prompt_table(world)
    ab_table = torch.tensor(sched.alpha_bar, dtype=DTYPE)
    curve, recent = [], []

    for step in range(1, cfg.steps + 1):
        z0, pidx = _draw_batch(world, rng, cfg.batch_size, cfg.attribute_rate, cfg.neutral_rate)
        t = rng.integers(1, sched.T + 1, size=cfg.batch_size)
        noise = rng.standard_normal((cfg.batch_size, world.d))
        drop = rng.random(cfg.batch_size) < cfg.dropout

        table = _encode_table(vocab, prompts)
        C = table[torch.as_tensor(pidx)]
        if drop.any():
            C = torch.where(torch.as_tensor(drop)[:, None], encode_null(vocab).expand_as(C), C)
        tt = torch.as_tensor(t, dtype=DTYPE)
        ab = ab_table[torch.as_tensor(t)][:, None]
        eps = torch.as_tensor(noise)
        zt = ab.sqrt() * torch.as_tensor(z0) + (1 - ab).sqrt() * eps
        pred = model.net(torch.cat([zt, time_embedding(tt, sched.T, model.t_dim), C], dim=-1))
        loss = ((pred - eps) ** 2).mean()
        if not torch.isfinite(loss):
            raise TrainingDiverged(step, float(loss))
        opt.zero_grad()
        loss.backward()
        opt.step()
        if ema is not None:
            with torch.no_grad():
                for e_, p in zip(ema, params):
                    e_.mul_(cfg.ema_decay).add_(p.detach(), alpha=1 - cfg.ema_decay)
        recent.append(loss.item())
        if step % 100 == 0 or step == cfg.steps:
            avg = float(np.mean(recent))
            curve.append((step, avg))
            recent = []
            if progress:
                log.info("step %d loss %.4f", step, avg)

    if ema is not None:
        with torch.no_grad():
            for e_, p in zip(ema, params):
                p.copy_(e_)
    final = curve[-1][1]
    val = validation_loss(model, world, cfg)
    report = TrainReport(final_loss=final, val_loss=val, steps=cfg.steps,
                         null_branch_trained=cfg.dropout > 0, loss_curve=curve)
    model.null_branch_trained = report.null_branch_trained
    if not report.null_branch_trained:
        log.warning("dropout = 0: the unconditional branch was never trained")
    return model, report


@torch.no_grad()
def validation_loss(model: TrainedDenoiser, world: ToyWorld, cfg: TrainConfig) -> float:
    rng = np.random.default_rng(cfg.seed + 7919)
    n = cfg.val_size
    sched = model.sched
    z0, pidx = _draw_batch(world, rng, n, cfg.attribute_rate, cfg.neutral_rate)
    t = rng.integers(1, sched.T + 1, size=n)
    eps = torch.as_tensor(rng.standard_normal((n, world.d)))
    table = _encode_table(model.vocab, _prompt_table(world))
    C = table[torch.as_tensor(pidx)]
    ab = torch.tensor(sched.alpha_bar, dtype=DTYPE)[torch.as_tensor(t)][:, None]
    zt = ab.sqrt() * torch.as_tensor(z0) + (1 - ab).sqrt() * eps
    pred = model.eps(zt, torch.as_tensor(t, dtype=DTYPE), C)
    return float(((pred - eps) ** 2).mean())


# -- checkpoints ----------------------------------------------------------------

def _tensor_dict(module: nn.Module) -> dict:
    return {k: {"shape": list(v.shape), "data": v.detach().reshape(-1).tolist()} for k, v in module.state_dict().items()}


def _load_tensors(module: nn.Module, doc: dict) -> None:
    state = {k: torch.tensor(v["data"], dtype=DTYPE).reshape(v["shape"]) for k, v in doc.items()}
    module.load_state_dict(state)


def save_checkpoint(path: str | Path, model: TrainedDenoiser, world: ToyWorld, cfg: TrainConfig,
                    report: TrainReport | None = None) -> str:
    vocab = model.vocab
    doc = {
        "version": CHECKPOINT_VERSION,
        "schedule": {"T": model.sched.T, "kind": model.sched.kind, "alpha_bar": model.sched.alpha_bar.tolist()},
        "vocabulary": {"words": vocab.words, "e": vocab.e, "c_e": vocab.c_e, "width": vocab.width,
                       "max_len": vocab.max_len},
        "encoder": _tensor_dict(vocab),
        "denoiser": {"d": model.d, "t_dim": model.t_dim, "hidden": model.net[0].out_features,
                     "params": _tensor_dict(model.net)},
        "world_hash": world.hash(),
        "train_config": asdict(cfg),
        "train_report": asdict(report) if report else None,
    }
    text = json.dumps(doc, sort_keys=True)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_checkpoint(path: str | Path) -> tuple[TrainedDenoiser, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    s = doc["schedule"]
    sched = NoiseSchedule(T=s["T"], alpha_bar=np.array(s["alpha_bar"]), kind=s["kind"])
    v = doc["vocabulary"]
    vocab = TextEncoder(v["words"], e=v["e"], c_e=v["c_e"], width=v["width"], max_len=v["max_len"])
    _load_tensors(vocab, doc["encoder"])
    dn = doc["denoiser"]
    model = TrainedDenoiser(dn["d"], sched, vocab, hidden=dn["hidden"], t_dim=dn["t_dim"])
    _load_tensors(model.net, dn["params"])
    model.null_branch_trained = doc["train_config"]["dropout"] > 0
    return model, doc


def make_analytic(world: ToyWorld, sched: NoiseSchedule | None = None, vocab_seed: int = 0,
                  bandwidth: float = 0.1, scope: str = "global", **vocab_kw) -> AnalyticDenoiser:
    sched = sched or make_schedule()
    return AnalyticDenoiser(world, sched, build_vocab(world, seed=vocab_seed, **vocab_kw), bandwidth=bandwidth,
                            scope=scope)
