"""Gaussian-mixture toy worlds with labeled majority/minority components.

A world stands in for the text-conditional data distribution: every
condition is an isotropic mixture with one heavy "majority" component and a
few light "minority" ones.  Because everything is Gaussian, the density,
the per-component responsibilities and the exact posterior-mean denoiser
are all available in closed form.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .schedule import DTYPE, NoiseSchedule

MAJORITY = "majority"
MINORITY = "minority"
_WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class GaussianComponent:
    mean: tuple[float, ...]
    stdev: float
    weight: float
    tag: str

    def __post_init__(self):
        if not self.stdev > 0:
            raise ValueError(f"stdev must be positive, got {self.stdev}")
        if not 0 < self.weight <= 1:
            raise ValueError(f"weight must lie in (0, 1], got {self.weight}")
        if self.tag not in (MAJORITY, MINORITY):
            raise ValueError(f"unknown tag {self.tag!r}")


@dataclass(frozen=True)
class Condition:
    id: int
    word: str
    components: tuple[GaussianComponent, ...]


@dataclass(frozen=True)
class ToyWorld:
    d: int
    conditions: tuple[Condition, ...]
    # attribute word -> (condition id, component index)
    attribute_words: dict = field(default_factory=dict)

    def __post_init__(self):
        # padded per-condition tensors for vectorised evaluation
        kmax = max(len(c.components) for c in self.conditions)
        n = len(self.conditions)
        means = np.zeros((n, kmax, self.d))
        var = np.ones((n, kmax))
        logw = np.full((n, kmax), -np.inf)
        for i, c in enumerate(self.conditions):
            for k, comp in enumerate(c.components):
                means[i, k] = comp.mean
                var[i, k] = comp.stdev**2
                logw[i, k] = math.log(comp.weight)
        object.__setattr__(self, "_means", torch.tensor(means, dtype=DTYPE))
        object.__setattr__(self, "_var", torch.tensor(var, dtype=DTYPE))
        object.__setattr__(self, "_logw", torch.tensor(logw, dtype=DTYPE))

    @property
    def n_conditions(self) -> int:
        return len(self.conditions)

    def condition(self, cond: int) -> Condition:
        if not 0 <= cond < len(self.conditions):
            raise KeyError(f"unknown condition {cond}")
        return self.conditions[cond]

    def component_arrays(self, cond: int):
        """(means, variances, log-weights) tensors of one condition, unpadded."""
        k = len(self.condition(cond).components)
        return self._means[cond, :k], self._var[cond, :k], self._logw[cond, :k]

    def null_arrays(self):
        """Equal-weight mixture over all conditions (the unconditional marginal)."""
        means, var, logw = [], [], []
        for c in range(self.n_conditions):
            m, v, lw = self.component_arrays(c)
            means.append(m)
            var.append(v)
            logw.append(lw - math.log(self.n_conditions))
        return torch.cat(means), torch.cat(var), torch.cat(logw)

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "conditions": [
                {
                    "id": c.id,
                    "word": c.word,
                    "components": [
                        {"mean": list(comp.mean), "stdev": comp.stdev, "weight": comp.weight, "tag": comp.tag}
                        for comp in c.components
                    ],
                }
                for c in self.conditions
            ],
            "attribute_words": {w: {"condition": c, "component": k} for w, (c, k) in self.attribute_words.items()},
        }

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def make_world(params: dict, require_minority: bool = True) -> ToyWorld:
    """Build and validate a world from its JSON-style description.

    ``require_minority=False`` relaxes the majority/minority structure so
    reference worlds such as a single standard normal can be expressed.
    """
    d = int(params["d"])
    if d < 1:
        raise ValueError("d must be >= 1")
    raw_conds = params.get("conditions") or []
    if not raw_conds:
        raise ValueError("a world needs at least one condition")
    conditions = []
    words = set()
    for i, rc in enumerate(raw_conds):
        cid = int(rc.get("id", i))
        if cid != i:
            raise ValueError(f"condition ids must be 0..n-1 in order, got {cid} at position {i}")
        word = rc.get("word", f"cond_{i}")
        if word in words:
            raise ValueError(f"duplicate word id {word!r}")
        words.add(word)
        comps = []
        for rcomp in rc["components"]:
            mean = tuple(float(x) for x in rcomp["mean"])
            if len(mean) != d:
                raise ValueError(f"component mean has dimension {len(mean)}, expected {d}")
            comps.append(
                GaussianComponent(mean=mean, stdev=float(rcomp["stdev"]), weight=float(rcomp["weight"]),
                                  tag=rcomp.get("tag", MAJORITY))
            )
        total = sum(c.weight for c in comps)
        if abs(total - 1.0) > _WEIGHT_TOL:
            raise ValueError(f"condition {i}: weights must sum to 1, got {total!r}")
        if require_minority:
            majors = [c for c in comps if c.tag == MAJORITY]
            if len(majors) != 1:
                raise ValueError(f"condition {i}: exactly one majority component required, got {len(majors)}")
            if len(comps) - 1 < 1:
                raise ValueError(f"condition {i}: at least one minority component required")
            if majors[0].weight < 0.5:
                raise ValueError(f"condition {i}: majority weight must be >= 0.5")
            if any(c.weight >= 1 for c in comps):
                raise ValueError(f"condition {i}: component weights must lie in (0, 1)")
        conditions.append(Condition(id=cid, word=word, components=tuple(comps)))

    attrs = {}
    for w, target in (params.get("attribute_words") or {}).items():
        if w in words or w in attrs:
            raise ValueError(f"duplicate word id {w!r}")
        c, k = int(target["condition"]), int(target["component"])
        if not 0 <= c < len(conditions) or not 0 <= k < len(conditions[c].components):
            raise ValueError(f"attribute word {w!r} points at a missing component ({c}, {k})")
        attrs[w] = (c, k)
    return ToyWorld(d=d, conditions=tuple(conditions), attribute_words=attrs)


def default_world_params(radius: float = 3.0, minority_offset: float = 1.75) -> dict:
    """Four conditions around a circle; minorities sit outward of each majority."""
    conds, attrs = [], {}
    n_attr = 0
    for c in range(4):
        theta = math.pi / 4 + c * math.pi / 2
        center = (radius * math.cos(theta), radius * math.sin(theta))
        comps = [{"mean": list(center), "stdev": 0.15, "weight": 0.9, "tag": MAJORITY}]
        for sign in (1, -1):
            phi = theta + sign * math.pi / 3
            m = [center[0] + minority_offset * math.cos(phi), center[1] + minority_offset * math.sin(phi)]
            comps.append({"mean": m, "stdev": 0.1, "weight": 0.05, "tag": MINORITY})
            attrs[f"attr_{n_attr}"] = {"condition": c, "component": len(comps) - 1}
            n_attr += 1
        conds.append({"id": c, "word": f"cond_{c}", "components": comps})
    return {"d": 2, "conditions": conds, "attribute_words": attrs}


def gaussian_world_params(d: int = 2, stdev: float = 1.0) -> dict:
    return {
        "d": d,
        "conditions": [{"id": 0, "word": "cond_0",
                        "components": [{"mean": [0.0] * d, "stdev": stdev, "weight": 1.0, "tag": MAJORITY}]}],
        "attribute_words": {},
    }


PRESETS = {
    "default": lambda: make_world(default_world_params()),
    "gaussian": lambda: make_world(gaussian_world_params(), require_minority=False),
}


def load_world(path: str | Path) -> ToyWorld:
    params = json.loads(Path(path).read_text())
    return make_world(params, require_minority=params.get("require_minority", True))


def save_world(world: ToyWorld, path: str | Path, require_minority: bool = True) -> None:
    doc = world.to_dict()
    if not require_minority:
        doc["require_minority"] = False
    Path(path).write_text(json.dumps(doc, indent=2))


# -- sampling and oracles -----------------------------------------------------

def sample_data(world: ToyWorld, cond: int, n: int, seed: int, return_components: bool = False):
    if n < 1:
        raise ValueError("n must be >= 1")
    c = world.condition(cond)
    rng = np.random.default_rng(seed)
    w = np.array([comp.weight for comp in c.components])
    idx = rng.choice(len(w), size=n, p=w / w.sum())
    means = np.array([comp.mean for comp in c.components])
    sd = np.array([comp.stdev for comp in c.components])
    x = means[idx] + sd[idx, None] * rng.standard_normal((n, world.d))
    return (x, idx) if return_components else x


def _log_normal(x: torch.Tensor, means: torch.Tensor, var: torch.Tensor) -> torch.Tensor:
    # x (B, d), means (..., K, d), var (..., K) -> (B, K)
    d = x.shape[-1]
    sq = ((x.unsqueeze(-2) - means) ** 2).sum(-1)
    return -0.5 * sq / var - 0.5 * d * torch.log(2 * math.pi * var)


def _as_batch(x) -> tuple[torch.Tensor, bool]:
    t = torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x, dtype=DTYPE)
    single = t.dim() == 1
    return (t.unsqueeze(0) if single else t), single


def component_log_joint(world: ToyWorld, cond: int, x) -> np.ndarray:
    """log(w_k N(x; mu_k, s_k^2 I)) for each component, shape (n, K)."""
    xb, _ = _as_batch(x)
    means, var, logw = world.component_arrays(cond)
    return (logw + _log_normal(xb, means, var)).numpy()


def true_log_density(world: ToyWorld, cond: int | None, x):
    """Exact log mixture density; ``cond=None`` uses the unconditional mixture."""
    xb, single = _as_batch(x)
    means, var, logw = world.null_arrays() if cond is None else world.component_arrays(cond)
    out = torch.logsumexp(logw + _log_normal(xb, means, var), dim=-1).numpy()
    return float(out[0]) if single else out


def classify_component(world: ToyWorld, cond: int, x):
    """Index and tag of the max-responsibility component; ties go to the lowest index."""
    lj = component_log_joint(world, cond, x)
    idx = np.argmax(lj, axis=-1)  # argmax returns the first maximum
    tags = [world.conditions[cond].components[k].tag for k in idx]
    if np.ndim(x) == 1 or (torch.is_tensor(x) and x.dim() == 1):
        return int(idx[0]), tags[0]
    return idx, tags


def posterior_eps(z: torch.Tensor, ab: torch.Tensor, means: torch.Tensor, var: torch.Tensor,
                  logw: torch.Tensor) -> torch.Tensor:
    """Exact noise prediction E[eps | z_t] for an isotropic Gaussian mixture.

    z: (B, d); ab: scalar or (B,); means (K, d) or (B, K, d); var and logw
    (K,) or (B, K).  Differentiable in z, ab and logw.

    Per component the optimal eps is sqrt(1-ab) / v_k * (z - sqrt(ab) mu_k)
    with v_k = ab s_k^2 + 1 - ab, which avoids dividing by sqrt(1-ab).
    """
    ab = torch.as_tensor(ab, dtype=DTYPE)
    if ab.dim() == 1:
        ab = ab[:, None]
    sab = torch.sqrt(ab)
    v = ab * var + (1.0 - ab)  # (B, K) or (K,)
    diff = z.unsqueeze(-2) - sab.unsqueeze(-1) * means  # (B, K, d)
    d = z.shape[-1]
    logp = logw - 0.5 * (diff**2).sum(-1) / v - 0.5 * d * torch.log(2 * math.pi * v)
    resp = torch.softmax(logp, dim=-1)
    eps_k = torch.sqrt(1.0 - ab).unsqueeze(-1) * diff / v.unsqueeze(-1)
    return (resp.unsqueeze(-1) * eps_k).sum(-2)


def analytic_eps(world: ToyWorld, cond: int | None, z_t, t, sched: NoiseSchedule,
                 log_weights: torch.Tensor | None = None) -> torch.Tensor:
    """Posterior-mean noise prediction of a perfectly trained model.

    ``t`` may be fractional (continuous-time extension of the schedule).
    ``log_weights`` optionally overrides the condition's mixture weights,
    per sample (B, K) or shared (K,).
    """
    if not 0 < float(torch.as_tensor(t).min()) <= sched.T or float(torch.as_tensor(t).max()) > sched.T:
        raise ValueError(f"step {t} outside (0, {sched.T}]")
    z, single = _as_batch(z_t)
    ab = sched.alpha_bar_cont(t)
    if cond is None:
        means, var, logw = world.null_arrays()
    else:
        means, var, logw = world.component_arrays(cond)
    if log_weights is not None:
        logw = log_weights
    out = posterior_eps(z, ab, means, var, logw)
    return out[0] if single else out
