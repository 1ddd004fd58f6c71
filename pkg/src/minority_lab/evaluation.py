"""Sample-quality metrics and report aggregation.

Model likelihood uses the probability-flow ODE written in the scaled
variable y = x / sqrt(ab), whose drift w.r.t. sigma = sqrt((1 - ab) / ab)
is exactly the noise prediction.  Integration runs in u = log(1 + sigma)
with a batched Dormand-Prince 5(4) pair and per-sample step control.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial.distance import cdist

from .conditioning import Prompt, encode
from .schedule import DTYPE
from .world import MINORITY, ToyWorld, classify_component, sample_data, true_log_density


class IntegrationError(RuntimeError):
    def __init__(self, msg: str, sigma: float, tau: float):
        super().__init__(f"{msg} at sigma={sigma:.6g} (tau={tau:.6g})")
        self.sigma = sigma
        self.tau = tau


# Dormand-Prince 5(4) tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = _A[6] + (0.0,)
_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_E = tuple(a - b for a, b in zip(_B5, _B4))


def cond_embedding(model, cond: int | None) -> torch.Tensor | None:
    """Base-prompt conditioning vector (None for the unconditional model).

    Condition words occupy the first rows of the vocabulary in condition order.
    """
    if cond is None:
        return None
    with torch.no_grad():
        return encode(model.vocab, Prompt((model.vocab.words[cond],)))


def _drift_and_div(model, y: torch.Tensor, u: torch.Tensor, C, cond, fd_step: float):
    """dy/du and e^u * div_y(eps) for a batch of states."""
    B, d = y.shape
    sigma = torch.expm1(u)
    scale = torch.sqrt(1.0 + sigma**2)
    tau = torch.as_tensor(model.sched.tau_of_sigma(sigma.numpy()), dtype=DTYPE)
    tau = tau.clamp(1e-12, model.sched.T)
    x = y / scale[:, None]
    # rows: x, x + h e_j, x - h e_j for every coordinate j
    basis = fd_step * torch.eye(d, dtype=DTYPE)
    xs = torch.cat([x[:, None, :], x[:, None, :] + basis, x[:, None, :] - basis], dim=1)  # (B, 1+2d, d)
    taus = tau[:, None].expand(B, 1 + 2 * d).reshape(-1)
    with torch.no_grad():
        eps = model.eps(xs.reshape(-1, d), taus, C, cond).reshape(B, 1 + 2 * d, d)
    jac_diag = (eps[:, 1 : 1 + d] - eps[:, 1 + d :]).diagonal(dim1=1, dim2=2) / (2 * fd_step)
    div_y = jac_diag.sum(-1) / scale
    g = torch.exp(u)
    return g[:, None] * eps[:, 0], g * div_y


def pf_ode_logp(model, x, cond: int | None = None, C: torch.Tensor | None = None, tol: float = 1e-5,
                fd_step: float = 1e-5, h0: float = 1e-2, max_steps: int = 100_000) -> np.ndarray:
    """Model log-density log p(x | cond) in nats, one value per row of x."""
    x = torch.as_tensor(np.asarray(x), dtype=DTYPE)
    single = x.dim() == 1
    x = x[None] if single else x
    if C is None and getattr(model, "variant", "") == "trained":
        C = cond_embedding(model, cond)
    n, d = x.shape
    sig_T = model.sched.sigma_max
    U = math.log1p(sig_T)

    y = x.clone()
    acc = torch.zeros(n, dtype=DTYPE)
    u = torch.zeros(n, dtype=DTYPE)
    h = torch.full((n,), h0, dtype=DTYPE)
    done = torch.zeros(n, dtype=torch.bool)
    steps = 0
    while not bool(done.all()):
        steps += 1
        if steps > max_steps:
            s = float(torch.expm1(u[~done][0]))
            raise IntegrationError("step budget exhausted", s, float(model.sched.tau_of_sigma(s)))
        idx = (~done).nonzero().squeeze(1)
        ya, La, ua = y[idx], acc[idx], u[idx]
        ha = torch.minimum(h[idx], U - ua)
        ks_y, ks_L = [], []
        for i in range(7):
            yi = ya + sum(a * ha[:, None] * ky for a, ky in zip(_A[i], ks_y)) if i else ya
            ky, kL = _drift_and_div(model, yi, ua + _C[i] * ha, C, cond, fd_step)
            ks_y.append(ky)
            ks_L.append(kL)
        y_new = ya + ha[:, None] * sum(b * k for b, k in zip(_B5, ks_y))
        L_new = La + ha * sum(b * k for b, k in zip(_B5, ks_L))
        err_y = ha[:, None] * sum(e * k for e, k in zip(_E, ks_y))
        err_L = ha * sum(e * k for e, k in zip(_E, ks_L))
        sc_y = tol + tol * torch.maximum(ya.abs(), y_new.abs())
        sc_L = tol + tol * torch.maximum(La.abs(), L_new.abs())
        err = torch.sqrt((((err_y / sc_y) ** 2).sum(-1) + (err_L / sc_L) ** 2) / (d + 1))
        ok = err <= 1.0
        fac = torch.clamp(0.9 * err.clamp_min(1e-10) ** -0.2, 0.2, 5.0)
        h_next = ha * torch.where(ok, fac, torch.minimum(fac, torch.ones_like(fac)))
        acc_idx = idx[ok]
        y[acc_idx] = y_new[ok]
        acc[acc_idx] = L_new[ok]
        u_new = ua + ha
        finished = ok & (U - u_new <= 1e-12 * U)
        u[acc_idx] = torch.where(finished[ok], torch.full_like(u_new[ok], U), u_new[ok])
        done[idx[finished]] = True
        h[idx] = h_next
        tiny = h[idx] < 1e-14 * U
        if bool(tiny.any()):
            s = float(torch.expm1(ua[tiny][0]))
            raise IntegrationError("step size underflow", s, float(model.sched.tau_of_sigma(s)))

    var_T = 1.0 + sig_T**2
    log_prior = -0.5 * (y**2).sum(-1) / var_T - 0.5 * d * math.log(2 * math.pi * var_T)
    out = (log_prior + acc).numpy()
    return out[0] if single else out


def pf_ode_loglik(model, x, cond: int | None = None, C: torch.Tensor | None = None, tol: float = 1e-5,
                  **kw) -> np.ndarray:
    """Bits per dimension, -log p(x) / (d ln 2), from the probability-flow ODE."""
    xa = np.asarray(x, dtype=np.float64)
    d = xa.shape[-1]
    return -pf_ode_logp(model, xa, cond, C, tol=tol, **kw) / (d * math.log(2.0))


# -- set metrics --------------------------------------------------------------------

def _knn_radii(X: np.ndarray, k: int) -> np.ndarray:
    D = cdist(X, X)
    # column 0 of the sorted row is the point itself
    return np.sort(D, axis=1)[:, k]


def _coverage(ref: np.ndarray, query: np.ndarray, k: int) -> float:
    r = _knn_radii(ref, k)
    inside = (cdist(query, ref) <= r[None, :]).any(axis=1)
    return float(inside.mean())


def precision_recall(real, gen, k: int = 5) -> tuple[float, float]:
    """kNN-manifold precision (gen inside real balls) and recall (real inside gen balls)."""
    real = np.asarray(real, dtype=np.float64)
    gen = np.asarray(gen, dtype=np.float64)
    if len(real) < k + 1 or len(gen) < k + 1:
        raise ValueError(f"both sets need at least k+1={k + 1} points (got {len(real)} and {len(gen)})")
    return _coverage(real, gen, k), _coverage(gen, real, k)


def in_batch_similarity(batch) -> float:
    """Mean cosine similarity over unordered pairs."""
    X = np.asarray(batch, dtype=np.float64)
    if len(X) < 2:
        raise ValueError("in-batch similarity needs at least two samples")
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm sample in batch")
    U = X / norms[:, None]
    S = U @ U.T
    iu = np.triu_indices(len(X), k=1)
    return float(S[iu].mean())


def _check_cond(world: ToyWorld, cond: int):
    if not 0 <= cond < world.n_conditions:
        raise ValueError(f"unknown condition {cond}")


def consistency_flags(world: ToyWorld, cond: int, samples) -> np.ndarray:
    _check_cond(world, cond)
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if len(X) == 0:
        raise ValueError("no samples")
    L = np.stack([np.atleast_1d(true_log_density(world, c, X)) for c in range(world.n_conditions)], axis=1)
    return np.argmax(L, axis=1) == cond


def condition_consistency(world: ToyWorld, cond: int, samples) -> float:
    """Fraction of samples whose highest-density condition is ``cond``."""
    return float(consistency_flags(world, cond, samples).mean())


def minority_flags(world: ToyWorld, cond: int, samples) -> np.ndarray:
    _check_cond(world, cond)
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if len(X) == 0:
        raise ValueError("no samples")
    _, tags = classify_component(world, cond, X)
    return np.array([tg == MINORITY for tg in tags])


def minority_hit_rate(world: ToyWorld, cond: int, samples) -> float:
    return float(minority_flags(world, cond, samples).mean())


# -- aggregation ----------------------------------------------------------------------

METRICS = ("bpd", "true_logp", "minority", "consistency", "precision_recall", "ibs")
_PER_SAMPLE = {"bpd": "bpd", "ll_bpd": "ll_bpd", "true_logp": "true_logp", "minority": "minority_hit_rate",
               "consistency": "consistency"}


@dataclass
class EvalReport:
    rows: list[dict]
    detail: dict = field(default_factory=dict)

    def __post_init__(self):
        for r in self.rows:
            if r["n"] <= 0:
                raise ValueError(f"method {r['method']} has no samples")
            for k, val in r.items():
                if isinstance(val, float) and not math.isfinite(val):
                    raise ValueError(f"non-finite statistic {k} for method {r['method']}")

    def row(self, method: str) -> dict:
        for r in self.rows:
            if r["method"] == method:
                return r
        raise KeyError(method)

    def columns(self) -> list[str]:
        cols = []
        for r in self.rows:
            cols += [k for k in r if k not in cols]
        return cols

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.columns(), lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "detail": self.detail}, indent=2, sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def write(self, out_dir: str | Path, tag: str) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / f"report_{tag}.csv"
        json_path = out / f"report_{tag}.json"
        csv_path.write_text(self.to_csv())
        json_path.write_text(self.to_json())
        return csv_path, json_path


def bootstrap_halfwidth(values, n_boot: int = 1000, seed: int = 0, stat=np.mean) -> float:
    """Half the width of the 95% percentile bootstrap interval of ``stat``."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return 0.0
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(v), size=(n_boot, len(v)))
    boots = stat(v[idx], axis=1)
    lo, hi = np.percentile(boots, [2.5, 97.5])
    return float((hi - lo) / 2)


def _record_label(rec) -> str:
    return rec.extra.get("label", rec.method) if hasattr(rec, "extra") else rec.method


def _ibs_groups(samples: list[dict], default_size: int) -> list[np.ndarray]:
    by_key = defaultdict(list)
    for i, s in enumerate(samples):
        if "group" in s:
            by_key[(s["cond"], s["group"])].append(s["latent"])
        else:
            by_key[(s["cond"], "chunk", i)].append(s["latent"])
    groups = [np.array(v) for k, v in by_key.items() if k[1] != "chunk"]
    # ungrouped samples: consecutive chunks per condition
    loose = defaultdict(list)
    for k, v in by_key.items():
        if k[1] == "chunk":
            loose[k[0]].append(v[0])
    for c in sorted(loose):
        L = loose[c]
        groups += [np.array(L[j : j + default_size]) for j in range(0, len(L) - default_size + 1, default_size)]
    return [g for g in groups if len(g) >= 2]


def aggregate_report(records, world: ToyWorld, model=None, metrics=METRICS, k: int = 5, n_boot: int = 1000,
                     seed: int = 0, ibs_size: int = 4, real_factor: int = 1) -> EvalReport:
    """One row per method label (``record.extra['label']`` or ``record.method``).

    ``bpd`` needs ``model``; real reference sets for precision/recall are
    drawn from the world with ``real_factor`` times the generated count.
    """
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}; expected a subset of {METRICS}")
    if "bpd" in metrics and model is None:
        raise ValueError("bpd needs a model")
    grouped: dict[str, list] = defaultdict(list)
    for rec in records:
        for s in rec.samples:
            if "latent" not in s or "cond" not in s:
                raise ValueError(f"record for {rec.method}: sample missing 'latent' or 'cond'")
        grouped[_record_label(rec)].append(rec)
    if not grouped:
        raise ValueError("no run records")

    rows, detail = [], {}
    for label in grouped:
        samples = [s for rec in grouped[label] for s in rec.samples]
        X = np.array([s["latent"] for s in samples], dtype=np.float64)
        conds = np.array([s["cond"] for s in samples])
        per: dict[str, np.ndarray] = {}
        if "true_logp" in metrics:
            per["true_logp"] = np.concatenate([np.atleast_1d(true_log_density(world, int(c), X[conds == c]))
                                               for c in np.unique(conds)])
        if "minority" in metrics:
            per["minority"] = np.concatenate([minority_flags(world, int(c), X[conds == c])
                                              for c in np.unique(conds)]).astype(np.float64)
        if "consistency" in metrics:
            per["consistency"] = np.concatenate([consistency_flags(world, int(c), X[conds == c])
                                                 for c in np.unique(conds)]).astype(np.float64)
        if "bpd" in metrics:
            per["bpd"] = np.concatenate([np.atleast_1d(pf_ode_loglik(model, X[conds == c], int(c)))
                                         for c in np.unique(conds)])
            per["ll_bpd"] = -per["bpd"]
        row = {"method": label, "n": int(len(X))}
        for key, vals in per.items():
            name = _PER_SAMPLE[key]
            row[f"{name}_mean"] = float(np.mean(vals))
            row[f"{name}_hw95"] = bootstrap_halfwidth(vals, n_boot, seed)
            if key == "bpd":
                row["bpd_median"] = float(np.median(vals))
        if "precision_recall" in metrics:
            P, R, W = [], [], []
            for c in np.unique(conds):
                G = X[conds == c]
                if len(G) < k + 1:
                    continue
                real = sample_data(world, int(c), real_factor * len(G), seed=seed + 7919 * (int(c) + 1))
                p, r = precision_recall(real, G, k)
                P.append(p)
                R.append(r)
                W.append(len(G))
            if W:
                row["precision"] = float(np.average(P, weights=W))
                row["recall"] = float(np.average(R, weights=W))
        if "ibs" in metrics:
            size = getattr(grouped[label][0].config, "batch", ibs_size) if grouped[label][0].method == "diverse" \
                else ibs_size
            vals = np.array([in_batch_similarity(g) for g in _ibs_groups(samples, size)])
            if len(vals):
                row["ibs_mean"] = float(vals.mean())
                row["ibs_hw95"] = bootstrap_halfwidth(vals, n_boot, seed)
                row["ibs_groups"] = int(len(vals))
        rows.append(row)
        detail[label] = {key: v.tolist() for key, v in per.items()}
    return EvalReport(rows=rows, detail=detail)
