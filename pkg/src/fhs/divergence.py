"""H-delta-H distances, joint-risk estimates and the federated generalization bound.

Exact distances are available for 1-D threshold hypotheses, where the
symmetric-difference class is the set of intervals.  Everywhere else the
standard proxy-A-distance construction is used: train a discriminator to tell
the two samples apart and convert its held-out error into a distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import SgdConfig, Tape, Tensor, sgd_step, softmax_rows
from .datasets import LabeledDataset
from .models import ModelParams, argmax_lowest, classifier_forward, latent_numpy, predict_proba

KINDS = ("threshold1d", "linear2d", "mlp")
MIN_PROXY_SAMPLES = 20


@dataclass(frozen=True)
class HypothesisClassSpec:
    """Discriminator family for proxy distances.

    ``linear2d`` is a linear discriminator (named for the 2-D toy latents but
    valid in any dimension); ``mlp`` adds the ``hidden`` ReLU layers.
    """

    kind: str = "linear2d"
    hidden: tuple[int, ...] = (16,)
    steps: int = 300
    learning_rate: float = 0.1
    batch_size: int = 64
    train_fraction: float = 0.7

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown hypothesis kind {self.kind!r}; expected one of {KINDS}")
        if self.steps < 0 or self.batch_size < 2:
            raise ValueError("steps must be >= 0 and batch_size >= 2")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")

    @property
    def hidden_layers(self) -> tuple[int, ...]:
        return tuple(self.hidden) if self.kind == "mlp" else ()


# -- exact 1-D distance ------------------------------------------------------


def _signed_masses(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """Sorted distinct values and integer weights ``n_b * #a - n_a * #b`` at each.

    Dividing by the returned scale ``n_a * n_b`` gives ``P_a - P_b``; keeping
    the weights integral makes equal empirical measures cancel exactly.
    """
    uniq, inv = np.unique(np.concatenate([a, b]), return_inverse=True)
    count_a = np.bincount(inv[:a.size], minlength=uniq.size)
    count_b = np.bincount(inv[a.size:], minlength=uniq.size)
    return uniq, count_a * b.size - count_b * a.size, a.size * b.size


def _max_subarray(w: np.ndarray) -> tuple[float, int, int]:
    """Kadane: largest contiguous sum of ``w`` and its inclusive index range."""
    best, best_lo, best_hi = 0, 0, -1
    run, run_lo = 0, 0
    for i, x in enumerate(w.tolist()):
        if run <= 0:
            run, run_lo = x, i
        else:
            run += x
        if run > best:
            best, best_lo, best_hi = run, run_lo, i
    return best, best_lo, best_hi


def _best_interval(a: np.ndarray, b: np.ndarray) -> tuple[float, float, float, float]:
    """Interval ``(lo, hi]`` maximizing ``|P_a - P_b|``; returns (gap, lo, hi, sign)."""
    uniq, w, scale = _signed_masses(a, b)
    pos = _max_subarray(w)
    neg = _max_subarray(-w)
    gap, i, j = pos if pos[0] >= neg[0] else neg
    sign = 1.0 if pos[0] >= neg[0] else -1.0
    if j < i:
        return 0.0, 0.0, 0.0, 1.0
    lo = -math.inf if i == 0 else 0.5 * (uniq[i - 1] + uniq[i])
    hi = math.inf if j == uniq.size - 1 else 0.5 * (uniq[j] + uniq[j + 1])
    return float(gap) / scale, lo, hi, sign


def _as_1d(x, what: str) -> np.ndarray:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 1:
        raise ValueError(f"{what} must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{what} is empty")
    return arr


def exact_hdh_distance_1d(samples_a, samples_b) -> float:
    """``2 * sup_A |P_a(A) - P_b(A)|`` over intervals A (the threshold H-delta-H class)."""
    a = _as_1d(samples_a, "samples_a")
    b = _as_1d(samples_b, "samples_b")
    gap = _best_interval(a, b)[0]
    return float(min(2.0, max(0.0, 2.0 * gap)))


# -- proxy distance ----------------------------------------------------------


def _as_2d(x, what: str) -> np.ndarray:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"{what} must be a matrix, got shape {arr.shape}")
    return arr


def _split(n: int, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    cut = min(n - 1, max(1, int(round(fraction * n))))
    return np.sort(order[:cut]), np.sort(order[cut:])


def _balanced_error(pred: np.ndarray, labels: np.ndarray) -> float:
    errs = [np.mean(pred[labels == c] != c) for c in (0, 1)]
    return float(np.mean(errs))


def _init_layers(sizes: Sequence[int], rng: np.random.Generator) -> list[tuple[Tensor, Tensor]]:
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        layers.append((Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True),
                       Tensor(np.zeros(fan_out), requires_grad=True)))
    return layers


def _layers_forward(tape: Tape, layers, x: Tensor) -> Tensor:
    h = x
    for i, (w, b) in enumerate(layers):
        h = tape.add(tape.matmul(h, w), b)
        if i < len(layers) - 1:
            h = tape.relu(h)
    return h


def _layers_numpy(layers, x: np.ndarray) -> np.ndarray:
    h = x
    for i, (w, b) in enumerate(layers):
        h = h @ w.data + b.data
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h


def _train_discriminator(xa: np.ndarray, xb: np.ndarray, spec: HypothesisClassSpec,
                         rng: np.random.Generator):
    # class-balanced batches: half from each sample every step
    sizes = (xa.shape[1], *spec.hidden_layers, 2)
    layers = _init_layers(sizes, rng)
    params = [t for pair in layers for t in pair]
    half = max(1, spec.batch_size // 2)
    labels = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(half, dtype=np.int64)])
    for _ in range(spec.steps):
        ia = rng.integers(0, xa.shape[0], size=half)
        ib = rng.integers(0, xb.shape[0], size=half)
        tape = Tape()
        logits = _layers_forward(tape, layers, Tensor(np.concatenate([xa[ia], xb[ib]])))
        tape.backward(tape.cross_entropy(logits, labels))
        sgd_step(params, spec.learning_rate)
    return layers


def proxy_hdh_distance(latents_a, latents_b, spec: HypothesisClassSpec | None = None,
                       seed: int = 0) -> float:
    """Proxy distance ``2 * (1 - 2 * err)`` from a held-out a-vs-b discriminator.

    The error is class-balanced so unequal sample sizes do not bias it; the
    result is clamped to [0, 2].
    """
    spec = spec or HypothesisClassSpec()
    a = _as_2d(latents_a, "latents_a")
    b = _as_2d(latents_b, "latents_b")
    if a.shape[0] < MIN_PROXY_SAMPLES or b.shape[0] < MIN_PROXY_SAMPLES:
        raise ValueError(f"proxy distance needs >= {MIN_PROXY_SAMPLES} samples per side, "
                         f"got {a.shape[0]} and {b.shape[0]}")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"latent dims differ: {a.shape[1]} vs {b.shape[1]}")
    if spec.kind == "threshold1d" and a.shape[1] != 1:
        raise ValueError("threshold1d hypotheses need 1-D samples")
    rng = np.random.default_rng([seed, 0x5DD])
    tr_a, te_a = _split(a.shape[0], spec.train_fraction, rng)
    tr_b, te_b = _split(b.shape[0], spec.train_fraction, rng)
    test_x = np.concatenate([a[te_a], b[te_b]])
    test_y = np.concatenate([np.zeros(te_a.size, dtype=np.int64), np.ones(te_b.size, dtype=np.int64)])

    if spec.kind == "threshold1d":
        _, lo, hi, sign = _best_interval(a[tr_a, 0], b[tr_b, 0])
        inside = (test_x[:, 0] > lo) & (test_x[:, 0] <= hi)
        pred = np.where(inside, 0, 1) if sign > 0 else np.where(inside, 1, 0)
    else:
        train = np.concatenate([a[tr_a], b[tr_b]])
        mu, sd = train.mean(axis=0), train.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        layers = _train_discriminator((a[tr_a] - mu) / sd, (b[tr_b] - mu) / sd, spec, rng)
        pred = argmax_lowest(_layers_numpy(layers, (test_x - mu) / sd))
    err = _balanced_error(pred, test_y)
    return float(min(2.0, max(0.0, 2.0 * (1.0 - 2.0 * err))))


# -- risks and lambda --------------------------------------------------------


def soft_risk(probs: np.ndarray, labels: np.ndarray) -> float:
    """Absolute-error risk ``mean(0.5 * |p - onehot(y)|_1)``, i.e. ``mean(1 - p_y)``."""
    onehot = np.zeros_like(probs)
    onehot[np.arange(labels.size), labels] = 1.0
    return float(np.mean(0.5 * np.abs(probs - onehot).sum(axis=1)))


def hard_risk(probs: np.ndarray, labels: np.ndarray) -> float:
    """0/1 risk of the argmax prediction (ties to the lowest class)."""
    return float(np.mean(argmax_lowest(probs) != labels))


def _risk(kind: str):
    if kind not in ("hard", "soft"):
        raise ValueError(f"risk must be 'hard' or 'soft', got {kind!r}")
    return hard_risk if kind == "hard" else soft_risk


def _copy_template(template):
    if isinstance(template, ModelParams):
        return template.copy()
    return {k: Tensor(np.array(t.data if isinstance(t, Tensor) else t, dtype=np.float64),
                      requires_grad=True) for k, t in template.items()}


def _template_proba(model, x: np.ndarray) -> np.ndarray:
    if isinstance(model, ModelParams):
        return predict_proba(model, x)
    return softmax_rows(x @ model["W"].data + model["b"].data)


def estimate_lambda(data_k: LabeledDataset, data_k2: LabeledDataset, model_template,
                    budget: int = 300, seed: int = 0, sgd: SgdConfig | None = None,
                    risk: str = "hard") -> float:
    """Upper estimate of the joint optimal risk of two clients.

    One model, initialized from ``model_template`` (a full ``ModelParams`` on
    raw features or a linear predictor dict ``{"W", "b"}`` on latents), is
    trained for ``budget`` SGD steps on the union; the two empirical risks are
    summed.
    """
    if data_k.n == 0 or data_k2.n == 0:
        raise ValueError("estimate_lambda needs two non-empty datasets")
    sgd = sgd or SgdConfig(learning_rate=0.1, batch_size=32)
    model = _copy_template(model_template)
    params = model.parameters() if isinstance(model, ModelParams) else list(model.values())
    X = np.concatenate([data_k.features, data_k2.features])
    y = np.concatenate([data_k.labels, data_k2.labels])
    rng = np.random.default_rng([seed, 0x1A])
    for _ in range(budget):
        idx = rng.integers(0, X.shape[0], size=min(sgd.batch_size, X.shape[0]))
        tape = Tape()
        xb = Tensor(X[idx])
        if isinstance(model, ModelParams):
            logits = classifier_forward(model, xb, tape).logits
        else:
            logits = tape.add(tape.matmul(xb, model["W"]), model["b"])
        tape.backward(tape.cross_entropy(logits, y[idx]))
        sgd_step(params, sgd)
    r = _risk(risk)
    return (r(_template_proba(model, data_k.features), data_k.labels)
            + r(_template_proba(model, data_k2.features), data_k2.labels))


# -- the bound ---------------------------------------------------------------


def vc_confidence_term(m: float, d: float, delta: float, K: int = 1) -> float:
    """``sqrt(4/m * (d * ln(2 e m / d) + ln(4 K / delta)))``."""
    if not m > 0:
        raise ValueError(f"m must be > 0, got {m}")
    if not d >= 1:
        raise ValueError(f"d must be >= 1, got {d}")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    inner = d * math.log(2.0 * math.e * m / d) + math.log(4.0 * K / delta)
    return math.sqrt(max(0.0, 4.0 / m * inner))


@dataclass(frozen=True)
class BoundComponents:
    """Per-source-client terms of the bound for one target client."""

    empirical_risks: tuple[float, ...]
    distances: tuple[float, ...]
    lambdas: tuple[float, ...]
    m: float
    d: float
    delta: float
    K: int
    sample_counts: tuple[int, ...] | None = None

    def __post_init__(self):
        for name in ("empirical_risks", "distances", "lambdas"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.sample_counts is not None:
            object.__setattr__(self, "sample_counts", tuple(int(v) for v in self.sample_counts))
        lengths = {len(self.empirical_risks), len(self.distances), len(self.lambdas), self.K}
        if self.sample_counts is not None:
            lengths.add(len(self.sample_counts))
        if len(lengths) != 1:
            raise ValueError("component lists must all have length K")
        if any(not 0.0 <= r <= 1.0 for r in self.empirical_risks):
            raise ValueError("empirical risks must lie in [0, 1]")
        if any(not 0.0 <= v <= 2.0 for v in self.distances):
            raise ValueError("distances must lie in [0, 2]")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")


def theorem1_bound(c: BoundComponents) -> float:
    """Mean of ``risk + distance + lambda`` plus the confidence term.

    With ``sample_counts`` set, every pair uses its own sample count in the
    confidence term and those terms are averaged instead of using one ``m``.
    """
    body = float(np.mean(np.add(np.add(c.empirical_risks, c.distances), c.lambdas)))
    if c.sample_counts is None:
        return body + vc_confidence_term(c.m, c.d, c.delta, c.K)
    return body + float(np.mean([vc_confidence_term(m, c.d, c.delta, c.K)
                                 for m in c.sample_counts]))


def per_pair_lemma1_bound(empirical_risk: float, distance: float, lam: float, m: float,
                          d: float, delta: float, K: int = 1) -> float:
    """Single source/target pair; ``K > 1`` applies the union-bound confidence split."""
    return empirical_risk + distance + lam + vc_confidence_term(m, d, delta, K)


# -- measured bound on a federation -------------------------------------------


@dataclass(frozen=True)
class BoundRow:
    client: int
    risk: float
    mean_distance: float
    mean_lambda: float
    vc_term: float
    bound: float
    measured_risk: float
    components: BoundComponents = field(repr=False, compare=False, default=None)

    @property
    def holds(self) -> bool:
        return self.measured_risk <= self.bound


REPORT_COLUMNS = ("client", "risk", "mean_distance", "mean_lambda", "vc_term", "bound",
                  "measured_risk")


def measure_bound(global_params: ModelParams, local_params: Sequence[ModelParams],
                  client_data: Sequence[LabeledDataset],
                  eval_data: Sequence[LabeledDataset] | None = None, delta: float = 0.1,
                  spec: HypothesisClassSpec | None = None, lambda_budget: int = 300,
                  seed: int = 0, m_mode: str = "min") -> list[BoundRow]:
    """Measure every term of the bound and the global model's risk per target client.

    Distances and lambdas live in the global model's latent space, where the
    hypothesis class is the linear predictor; its parameter count is the VC
    surrogate ``d``.  ``eval_data`` (held-out per-client sets) defaults to the
    clients' own data.
    """
    if m_mode not in ("min", "per_pair"):
        raise ValueError("m_mode must be 'min' or 'per_pair'")
    K = len(client_data)
    if len(local_params) != K:
        raise ValueError("need one local model per client")
    eval_data = list(eval_data) if eval_data is not None else list(client_data)
    spec = spec or HypothesisClassSpec()
    risks = [hard_risk(predict_proba(local_params[k], client_data[k].features),
                       client_data[k].labels) for k in range(K)]
    latents = [LabeledDataset(latent_numpy(global_params, c.features), c.labels, c.n_classes)
               for c in client_data]
    d_vc = float(global_params.num_predictor_params())
    counts = [c.n for c in client_data]
    zero = {"W": np.zeros((global_params.latent_dim, global_params.n_classes)),
            "b": np.zeros(global_params.n_classes)}
    dist = np.zeros((K, K))
    lam = np.zeros((K, K))
    for i in range(K):
        for j in range(i + 1, K):
            dist[i, j] = dist[j, i] = proxy_hdh_distance(latents[i].features, latents[j].features,
                                                         spec, seed=seed * 1000 + i * K + j)
    for i in range(K):
        for j in range(K):
            if j < i:
                lam[i, j] = lam[j, i]
            else:
                lam[i, j] = estimate_lambda(latents[i], latents[j], zero, lambda_budget,
                                            seed=seed * 1000 + i * K + j)
    rows = []
    for t in range(K):
        comps = BoundComponents(risks, dist[:, t], lam[:, t], min(counts), d_vc, delta, K,
                                tuple(counts) if m_mode == "per_pair" else None)
        bound = theorem1_bound(comps)
        vc = bound - float(np.mean(np.add(np.add(comps.empirical_risks, comps.distances),
                                          comps.lambdas)))
        measured = hard_risk(predict_proba(global_params, eval_data[t].features), eval_data[t].labels)
        rows.append(BoundRow(t, float(np.mean(risks)), float(np.mean(dist[:, t])),
                             float(np.mean(lam[:, t])), vc, bound, measured, comps))
    return rows


def format_bound_report(rows: Sequence[BoundRow], d: float | None = None) -> str:
    """Whitespace-aligned text table, one line per target client."""
    lines = []
    if d is not None:
        lines.append(f"# d = {d:g} (parameter-count surrogate for the VC dimension)")
    lines.append(" ".join(REPORT_COLUMNS))
    for r in rows:
        lines.append(f"{r.client} {r.risk:.6f} {r.mean_distance:.6f} {r.mean_lambda:.6f} "
                     f"{r.vc_term:.6f} {r.bound:.6f} {r.measured_risk:.6f}")
    return "\n".join(lines) + "\n"


__all__ = [
    "HypothesisClassSpec", "BoundComponents", "BoundRow", "exact_hdh_distance_1d",
    "proxy_hdh_distance", "estimate_lambda", "vc_confidence_term", "theorem1_bound",
    "per_pair_lemma1_bound", "soft_risk", "hard_risk", "measure_bound", "format_bound_report",
    "REPORT_COLUMNS",
]
