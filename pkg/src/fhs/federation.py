"""Simulated federated protocol: FedAvg, FedEnsemble, shared-generator FedGen and FedGenP.

One round of the engine:

1. the server averages the clients' latest local models into the global model,
2. a seeded subset of ``ceil(r * K)`` clients is activated,
3. fedgenp trains one generator per active client against all local
   predictors; fedgen trains a single generator shared by everyone,
4. active clients retrain from the global model (plus generated latents) and
   upload their parameters.  Inactive clients keep their last upload,
5. the uploads are averaged again and that model is evaluated (FedEnsemble
   evaluates the local ensemble), so round ``r`` reports the model after ``r``
   rounds of training.

Before round 1 every client trains once from the shared initialization so the
server has predictors to build generators from.
"""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .autodiff import SgdConfig, ShapeError, Tape, Tensor, sgd_step
from .datasets import ClientDataset, LabeledDataset
from .models import (GeneratorParams, GrlSpec, ModelParams, argmax_lowest, classifier_forward,
                     generator_forward, generator_loss, init_generator, init_model,
                     predict_logits, predict_proba, sample_generator_batch, scheduled_grl)
from .rng import derive_seed, make_rng

log = logging.getLogger(__name__)

METHODS = ("fedavg", "fedensemble", "fedgen", "fedgenp")


@dataclass(frozen=True)
class FederationConfig:
    K: int = 20
    active_fraction: float = 1.0
    rounds: int = 100
    local_steps: int = 20
    method: str = "fedgenp"
    m_k: int = 32
    w_gen: float = 1.0
    seed: int = 0
    generator_steps: int = 200
    generator_lr: float = 0.01
    generator_batch: int = 32
    generator_hidden: int = 128
    beta: float = 0.05
    lambda_grl: float = 1.0
    grl_decay_rounds: int | None = None
    persist_generators: bool = False
    weighted_aggregation: bool = False
    threads: int = 1
    epoch_unit: str = "batch"

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ValueError("K must be a positive integer")
        if not 0 < self.active_fraction <= 1:
            raise ValueError("active_fraction must be in (0, 1]")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.local_steps < 0:
            raise ValueError("local_steps must be >= 0")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.m_k < 0:
            raise ValueError("m_k must be >= 0")
        if self.w_gen < 0 or self.beta < 0 or self.lambda_grl < 0:
            raise ValueError("w_gen, beta and lambda_grl must be >= 0")
        if self.generator_steps < 0 or self.generator_batch < 1 or not self.generator_lr > 0:
            raise ValueError("invalid generator training budget")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.epoch_unit not in ("batch", "pass"):
            raise ValueError("epoch_unit must be 'batch' or 'pass'")

    @property
    def n_active(self) -> int:
        return min(self.K, math.ceil(self.active_fraction * self.K))


@dataclass
class RoundMetrics:
    round: int
    global_accuracy: float
    global_loss: float
    per_client_accuracy: list[float]
    wall_ms: int = 0
    method: str = ""

    @property
    def mean_client_accuracy(self) -> float:
        return float(np.mean(self.per_client_accuracy)) if self.per_client_accuracy else 0.0


# -- aggregation -------------------------------------------------------------


def _exact_mean(stack: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    # Sorting along the client axis makes the summation order independent of
    # input order; offsetting by the minimum makes identical inputs exact.
    if weights is None:
        ordered = np.sort(stack, axis=0)
        base = ordered[0]
        return base + (ordered - base).sum(axis=0) / stack.shape[0]
    order = np.argsort(stack, axis=0, kind="stable")
    ordered = np.take_along_axis(stack, order, axis=0)
    w = weights.reshape((-1,) + (1,) * (stack.ndim - 1))
    w_ordered = np.take_along_axis(np.broadcast_to(w, stack.shape), order, axis=0)
    base = ordered[0]
    return base + (w_ordered * (ordered - base)).sum(axis=0) / weights.sum()


def aggregate(client_params: Sequence[ModelParams], weights=None) -> ModelParams:
    """Elementwise mean of every tensor over ``client_params``."""
    if not client_params:
        raise ValueError("aggregate needs at least one model")
    first = client_params[0]
    for p in client_params[1:]:
        if not first.same_architecture(p):
            raise ShapeError("cannot aggregate models with different architectures")
    w = None if weights is None else np.asarray(weights, dtype=np.float64)

    def avg(group: str) -> dict[str, Tensor]:
        out = {}
        for name in getattr(first, group):
            stack = np.stack([getattr(p, group)[name].data for p in client_params])
            out[name] = Tensor(_exact_mean(stack, w), requires_grad=True, name=f"{group}.{name}")
        return out

    return ModelParams(avg("representation"), avg("predictor"), first.layer_sizes,
                       first.latent_activation)


# -- client side -------------------------------------------------------------


class _BatchStream:
    """Endless mini-batches: a fresh permutation each time the data is exhausted."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self._order = np.zeros(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos >= self._order.size:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def _train_loop(data: ClientDataset, init: ModelParams, epochs: int, sgd: SgdConfig, seed: int,
                gen: GeneratorParams | None = None, m_k: int = 0, w_gen: float = 0.0,
                epoch_unit: str = "batch") -> ModelParams:
    local = data.open(data.client_id)
    if local.n == 0:
        raise ValueError(f"client {data.client_id} has no data")
    params = init.copy()
    batches = _BatchStream(local.n, sgd.batch_size, np.random.default_rng([seed, 0]))
    gen_rng = np.random.default_rng([seed, 1])
    use_gen = gen is not None and m_k > 0 and w_gen > 0
    X, y = local.features, local.labels
    steps_per_epoch = 1 if epoch_unit == "batch" else math.ceil(local.n / sgd.batch_size)
    for _ in range(epochs * steps_per_epoch):
        idx = batches.next()
        tape = Tape()
        out = classifier_forward(params, Tensor(X[idx], _copy=False), tape)
        loss = tape.cross_entropy(out.logits, y[idx])
        if use_gen:
            gb = sample_generator_batch(gen, m_k, gen_rng)
            z_gen = generator_forward(Tape(), gen, gb.labels, gb.noise, gb.trunk_noise).z.data
            gen_logits = predict_logits(tape, params.predictor, Tensor(z_gen, _copy=False))
            loss = tape.add(loss, tape.scale(tape.cross_entropy(gen_logits, gb.labels), w_gen))
        tape.backward(loss)
        sgd_step(params, sgd)
    return params


def local_train(data: ClientDataset, init: ModelParams, T: int, sgd: SgdConfig,
                seed: int, epoch_unit: str = "batch") -> ModelParams:
    """``T`` local epochs of cross-entropy SGD from ``init`` (left untouched).

    With ``epoch_unit="batch"`` an epoch is one step on the next mini-batch of
    a reshuffling stream; ``"pass"`` makes it a full sweep over the local data.
    """
    return _train_loop(data, init, T, sgd, seed, epoch_unit=epoch_unit)


def local_train_with_generator(data: ClientDataset, init: ModelParams, gen: GeneratorParams | None,
                               cfg: FederationConfig, sgd: SgdConfig, seed: int) -> ModelParams:
    """Local training where each epoch also fits ``m_k`` freshly generated latents.

    Generated latents enter after the representation, so they only shape the
    predictor.  Batch order is drawn from the same stream as :func:`local_train`.
    """
    if gen is not None and gen.latent_dim != init.latent_dim:
        raise ShapeError(f"generator latent dim {gen.latent_dim} != model {init.latent_dim}")
    if gen is not None and gen.n_classes != init.n_classes:
        raise ShapeError("generator and model disagree on the number of classes")
    return _train_loop(data, init, cfg.local_steps, sgd, seed, gen, cfg.m_k, cfg.w_gen,
                       cfg.epoch_unit)


# -- server side -------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorTraining:
    steps: int = 200
    lr: float = 0.01
    batch_size: int = 32
    hidden: int = 128
    beta: float = 0.05
    grl: GrlSpec = GrlSpec()
    noise_dim: int = 0

    @classmethod
    def from_config(cls, cfg: FederationConfig, round_index: int = 0) -> "GeneratorTraining":
        return cls(cfg.generator_steps, cfg.generator_lr, cfg.generator_batch,
                   cfg.generator_hidden, cfg.beta,
                   scheduled_grl(cfg.lambda_grl, round_index, cfg.grl_decay_rounds))


def train_generator(gen: GeneratorParams, predictors: Sequence, k: int | None,
                    budget: GeneratorTraining, rng: np.random.Generator) -> list[float]:
    """Minimize the generator objective in place; returns the objective before each step."""
    history = []
    for _ in range(budget.steps):
        batch = sample_generator_batch(gen, budget.batch_size, rng)
        tape = Tape()
        gl = generator_loss(gen, predictors, k, batch, budget.grl, budget.beta, tape)
        history.append(gl.value)
        tape.backward(gl.loss)
        sgd_step(gen, budget.lr)
    return history


def _fresh_generator(latent_dim, n_classes, seed, round_index, key, budget) -> GeneratorParams:
    return init_generator(latent_dim, n_classes, make_rng(seed, "generator-init", round_index, key),
                          hidden=budget.hidden, noise_dim=budget.noise_dim)


def train_generators_server(predictors: Sequence, latent_dim: int, n_classes: int, steps: int,
                            seed: int, budget: GeneratorTraining | None = None,
                            round_index: int = 0, clients: Sequence[int] | None = None,
                            previous: Sequence[GeneratorParams | None] | None = None
                            ) -> list[GeneratorParams | None]:
    """One generator per client, each trained against all predictors with itself as the self index.

    ``clients`` restricts training to a subset (other slots are ``None``);
    ``previous`` continues from earlier generators instead of a fresh init.
    """
    budget = replace(budget or GeneratorTraining(), steps=steps)
    K = len(predictors)
    which = range(K) if clients is None else clients
    out: list[GeneratorParams | None] = [None] * K
    for k in which:
        prior = previous[k] if previous is not None else None
        gen = prior.copy() if prior is not None else _fresh_generator(
            latent_dim, n_classes, seed, round_index, k, budget)
        train_generator(gen, predictors, k, budget, make_rng(seed, "generator-batch", round_index, k))
        out[k] = gen
    return out


def train_shared_generator(predictors: Sequence, latent_dim: int, n_classes: int, steps: int,
                           seed: int, budget: GeneratorTraining | None = None,
                           round_index: int = 0, previous: GeneratorParams | None = None
                           ) -> GeneratorParams:
    """Single generator minimizing every predictor's loss (no reversal term)."""
    budget = replace(budget or GeneratorTraining(), steps=steps)
    gen = previous.copy() if previous is not None else _fresh_generator(
        latent_dim, n_classes, seed, round_index, -1, budget)
    train_generator(gen, predictors, None, budget, make_rng(seed, "generator-batch", round_index, -1))
    return gen


# -- evaluation --------------------------------------------------------------


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    if labels.size == 0:
        return 0.0
    return float(np.mean(argmax_lowest(probs) == labels))


def nll(probs: np.ndarray, labels: np.ndarray) -> float:
    p = probs[np.arange(labels.size), labels]
    return float(-np.mean(np.log(np.maximum(p, 1e-300))))


def ensemble_proba(all_client_params: Sequence[ModelParams], x: np.ndarray) -> np.ndarray:
    if not all_client_params:
        raise ValueError("ensemble needs at least one model")
    first = all_client_params[0]
    for p in all_client_params[1:]:
        if not first.same_architecture(p):
            raise ShapeError("ensemble members have different architectures")
    return np.mean([predict_proba(p, x) for p in all_client_params], axis=0)


def fedensemble_evaluate(all_client_params: Sequence[ModelParams], test: LabeledDataset) -> float:
    """Accuracy of the probability-averaged ensemble (ties to the lowest class)."""
    return accuracy(ensemble_proba(all_client_params, test.features), test.labels)


# -- the engine --------------------------------------------------------------


def _thread_count(cfg: FederationConfig) -> int:
    cap = os.environ.get("FHS_THREADS")
    n = cfg.threads
    if cap:
        n = min(n, max(1, int(cap)))
    return n


@dataclass
class Federation:
    """Mutable server state for one simulated run."""

    cfg: FederationConfig
    clients: list[ClientDataset]
    test: LabeledDataset
    layer_sizes: tuple[int, ...]
    sgd: SgdConfig = field(default_factory=SgdConfig)
    latent_activation: str = "relu"
    locals: list[ModelParams] = field(default_factory=list)
    global_params: ModelParams | None = None
    generators: list[GeneratorParams | None] = field(default_factory=list)
    round: int = 0
    history: list[RoundMetrics] = field(default_factory=list)

    def __post_init__(self):
        if len(self.clients) != self.cfg.K:
            raise ValueError(f"config has K={self.cfg.K} but {len(self.clients)} clients were given")
        if self.layer_sizes[0] != self.test.input_dim or self.layer_sizes[-1] != self.test.n_classes:
            raise ShapeError("layer_sizes disagree with the data")
        self.generators = [None] * self.cfg.K

    def _parallel(self, fn, items):
        n = _thread_count(self.cfg)
        if n == 1 or len(items) == 1:
            return [fn(i) for i in items]
        with ThreadPoolExecutor(max_workers=n) as pool:
            return list(pool.map(fn, items))

    def initialize(self) -> None:
        cfg = self.cfg
        theta0 = init_model(self.layer_sizes, make_rng(cfg.seed, "model-init"),
                            latent_activation=self.latent_activation)
        self.global_params = theta0
        self.locals = self._parallel(
            lambda k: local_train(self.clients[k], theta0, cfg.local_steps, self.sgd,
                                  derive_seed(cfg.seed, "local", 0, k), cfg.epoch_unit),
            list(range(cfg.K)))

    def active_clients(self, round_index: int) -> list[int]:
        cfg = self.cfg
        if cfg.n_active == cfg.K:
            return list(range(cfg.K))
        rng = make_rng(cfg.seed, "active", round_index)
        return sorted(int(k) for k in rng.choice(cfg.K, size=cfg.n_active, replace=False))

    def evaluate(self, theta: ModelParams) -> tuple[float, float, list[float]]:
        if self.cfg.method == "fedensemble":
            probs = ensemble_proba(self.locals, self.test.features)
            members = self.locals
        else:
            probs = predict_proba(theta, self.test.features)
            members = None
        per_client = []
        for c in self.clients:
            own = c.open(c.client_id)
            p = ensemble_proba(members, own.features) if members else predict_proba(theta, own.features)
            per_client.append(accuracy(p, own.labels))
        return accuracy(probs, self.test.labels), nll(probs, self.test.labels), per_client

    def _uses_generator(self) -> bool:
        cfg = self.cfg
        return (cfg.method in ("fedgen", "fedgenp") and cfg.m_k > 0 and cfg.w_gen > 0
                and cfg.generator_steps >= 0)

    def run_round(self) -> RoundMetrics:
        if not self.locals:
            self.initialize()
        cfg = self.cfg
        start = time.perf_counter()
        r = self.round + 1
        weights = [c.n for c in self.clients] if cfg.weighted_aggregation else None
        theta = aggregate(self.locals, weights)
        active = self.active_clients(r)

        gens: dict[int, GeneratorParams] = {}
        if self._uses_generator():
            budget = GeneratorTraining.from_config(cfg, r)
            latent, n_classes = theta.latent_dim, theta.n_classes
            predictors = [p.predictor for p in self.locals]
            if cfg.method == "fedgenp":
                prev = self.generators if cfg.persist_generators else None
                trained = self._parallel(
                    lambda k: train_generators_server(
                        predictors, latent, n_classes, budget.steps, cfg.seed, budget, r,
                        clients=[k], previous=prev)[k],
                    active)
                gens = dict(zip(active, trained))
            else:
                prev = self.generators[0] if cfg.persist_generators else None
                shared = train_shared_generator(predictors, latent, n_classes, budget.steps,
                                                cfg.seed, budget, r, previous=prev)
                gens = {k: shared for k in active}
            for k, g in gens.items():
                self.generators[k] = g

        def client_update(k: int) -> ModelParams:
            seed = derive_seed(cfg.seed, "local", r, k)
            if k in gens:
                return local_train_with_generator(self.clients[k], theta, gens[k], cfg, self.sgd, seed)
            return local_train(self.clients[k], theta, cfg.local_steps, self.sgd, seed,
                               cfg.epoch_unit)

        for k, params in zip(active, self._parallel(client_update, active)):
            self.locals[k] = params
        self.global_params = aggregate(self.locals, weights)
        acc, loss, per_client = self.evaluate(self.global_params)
        self.round = r
        wall = int(round((time.perf_counter() - start) * 1000))
        m = RoundMetrics(r, acc, loss, per_client, wall, cfg.method)
        self.history.append(m)
        log.debug("round %d %s acc=%.4f loss=%.4f", r, cfg.method, acc, loss)
        return m

    def run(self) -> list[RoundMetrics]:
        while self.round < self.cfg.rounds:
            self.run_round()
        return self.history


def run_experiment(cfg: FederationConfig, clients: list[ClientDataset], test: LabeledDataset,
                   layer_sizes: Sequence[int], sgd: SgdConfig | None = None,
                   latent_activation: str = "relu") -> list[RoundMetrics]:
    fed = Federation(cfg, clients, test, tuple(layer_sizes), sgd or SgdConfig(),
                     latent_activation)
    return fed.run()


__all__ = [
    "FederationConfig", "RoundMetrics", "Federation", "GeneratorTraining", "METHODS",
    "aggregate", "local_train", "local_train_with_generator", "train_generator",
    "train_generators_server", "train_shared_generator", "fedensemble_evaluate",
    "ensemble_proba", "accuracy", "nll", "run_experiment",
]
