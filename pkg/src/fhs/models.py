"""Classifier ``predictor(representation(x))`` and the class-conditional latent generator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .autodiff import ShapeError, Tape, Tensor, log_softmax_rows, softmax_rows

LOGVAR_MIN = -8.0
LOGVAR_MAX = 8.0


# -- classifier --------------------------------------------------------------


@dataclass
class ModelParams:
    """Representation MLP ``input -> hidden... -> latent`` plus a linear predictor.

    ``layer_sizes`` is ``(input_dim, *hidden, latent_dim, n_classes)``.
    """

    representation: dict[str, Tensor]
    predictor: dict[str, Tensor]
    layer_sizes: tuple[int, ...]
    latent_activation: str = "relu"

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if len(self.layer_sizes) < 3:
            raise ValueError("layer_sizes needs at least (input, latent, classes)")
        n_rep = len(self.layer_sizes) - 2
        for i in range(n_rep):
            w = self.representation[f"W{i}"]
            if w.shape != (self.layer_sizes[i], self.layer_sizes[i + 1]):
                raise ShapeError(f"representation W{i} has shape {w.shape}")
        if self.predictor["W"].shape != (self.latent_dim, self.n_classes):
            raise ShapeError(f"predictor W has shape {self.predictor['W'].shape}")
        if self.latent_activation not in ("relu", "none"):
            raise ValueError(f"unknown latent_activation {self.latent_activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def latent_dim(self) -> int:
        return self.layer_sizes[-2]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_rep_layers(self) -> int:
        return len(self.layer_sizes) - 2

    def parameters(self) -> list[Tensor]:
        return list(self.representation.values()) + list(self.predictor.values())

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {f"representation.{k}": t.data for k, t in self.representation.items()}
        out.update({f"predictor.{k}": t.data for k, t in self.predictor.items()})
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            {k: t.copy() for k, t in self.representation.items()},
            {k: t.copy() for k, t in self.predictor.items()},
            self.layer_sizes, self.latent_activation,
        )

    def same_architecture(self, other: "ModelParams") -> bool:
        return (self.layer_sizes == other.layer_sizes
                and self.latent_activation == other.latent_activation)

    def num_predictor_params(self) -> int:
        return sum(t.data.size for t in self.predictor.values())

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], layer_sizes,
                    latent_activation: str = "relu") -> "ModelParams":
        rep, pred = {}, {}
        for name, arr in arrays.items():
            part, _, key = name.partition(".")
            target = rep if part == "representation" else pred if part == "predictor" else None
            if target is None:
                raise ValueError(f"unexpected tensor {name!r}")
            target[key] = Tensor(arr, requires_grad=True, name=name)
        return cls(rep, pred, tuple(layer_sizes), latent_activation)


def _uniform_layer(rng: np.random.Generator, fan_in: int, fan_out: int):
    bound = 1.0 / math.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=(fan_out,))
    return w, b


def init_model(layer_sizes: Sequence[int], rng: np.random.Generator | None = None,
               latent_activation: str = "relu", zero: bool = False) -> ModelParams:
    """Fresh classifier; uniform(+-1/sqrt(fan_in)) init, or all zeros if ``zero``."""
    sizes = tuple(int(s) for s in layer_sizes)
    if rng is None and not zero:
        raise ValueError("rng required unless zero=True")
    rep: dict[str, Tensor] = {}
    for i in range(len(sizes) - 2):
        if zero:
            w, b = np.zeros((sizes[i], sizes[i + 1])), np.zeros(sizes[i + 1])
        else:
            w, b = _uniform_layer(rng, sizes[i], sizes[i + 1])
        rep[f"W{i}"] = Tensor(w, requires_grad=True, name=f"representation.W{i}")
        rep[f"b{i}"] = Tensor(b, requires_grad=True, name=f"representation.b{i}")
    if zero:
        w, b = np.zeros((sizes[-2], sizes[-1])), np.zeros(sizes[-1])
    else:
        w, b = _uniform_layer(rng, sizes[-2], sizes[-1])
    pred = {"W": Tensor(w, requires_grad=True, name="predictor.W"),
            "b": Tensor(b, requires_grad=True, name="predictor.b")}
    return ModelParams(rep, pred, sizes, latent_activation)


class ClassifierOutput(NamedTuple):
    probs: Tensor
    logits: Tensor
    latent: Tensor


def represent(tape: Tape, params: ModelParams, x: Tensor) -> Tensor:
    h = x
    last = params.n_rep_layers - 1
    for i in range(params.n_rep_layers):
        h = tape.add(tape.matmul(h, params.representation[f"W{i}"]), params.representation[f"b{i}"])
        if i < last or params.latent_activation == "relu":
            h = tape.relu(h)
    return h


def predict_logits(tape: Tape, predictor: dict[str, Tensor], z: Tensor) -> Tensor:
    return tape.add(tape.matmul(z, predictor["W"]), predictor["b"])


def classifier_forward(params: ModelParams, x, tape: Tape | None = None) -> ClassifierOutput:
    """Class probabilities for the rows of ``x`` along with logits and latent codes."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError(f"expected [n x {params.input_dim}] input, got {x.shape}")
    tape = tape if tape is not None else Tape()
    z = represent(tape, params, x)
    logits = predict_logits(tape, params.predictor, z)
    return ClassifierOutput(tape.softmax(logits), logits, z)


def latent_numpy(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Gradient-free ``representation(x)``."""
    h = np.asarray(x, dtype=np.float64)
    last = params.n_rep_layers - 1
    for i in range(params.n_rep_layers):
        h = h @ params.representation[f"W{i}"].data + params.representation[f"b{i}"].data
        if i < last or params.latent_activation == "relu":
            h = np.maximum(h, 0.0)
    return h


def predictor_logits_numpy(predictor, z: np.ndarray) -> np.ndarray:
    pred = predictor.predictor if isinstance(predictor, ModelParams) else predictor
    return z @ pred["W"].data + pred["b"].data


def predict_proba(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return softmax_rows(predictor_logits_numpy(params, latent_numpy(params, x)))


def argmax_lowest(probs: np.ndarray) -> np.ndarray:
    """Row argmax; ties go to the lowest class index."""
    return np.argmax(probs, axis=1)


# -- gradient reversal -------------------------------------------------------


@dataclass(frozen=True)
class GrlSpec:
    lambda_grl: float = 1.0

    def __post_init__(self):
        if not self.lambda_grl >= 0:
            raise ValueError(f"lambda_grl must be >= 0, got {self.lambda_grl}")


def grl_apply(spec: GrlSpec, z: Tensor, tape: Tape) -> Tensor:
    return tape.grl(z, spec.lambda_grl)


def scheduled_grl(base: float, round_index: int, decay_rounds: int | None) -> GrlSpec:
    """Linear decay of the reversal scale to zero at ``decay_rounds`` (no decay if None)."""
    if not decay_rounds:
        return GrlSpec(base)
    return GrlSpec(base * max(0.0, 1.0 - round_index / decay_rounds))


# -- generator ---------------------------------------------------------------


@dataclass
class GeneratorParams:
    """Per-class Gaussian over the latent space, parameterized by a small MLP.

    ``trunk`` holds ``Wh, bh`` (embedding [+ trunk noise] -> hidden) and the
    two heads ``Wm, bm`` (mean) and ``Wv, bv`` (log-variance).
    """

    class_embed: Tensor
    trunk: dict[str, Tensor]
    latent_dim: int
    n_classes: int
    noise_dim: int = 0

    def __post_init__(self):
        if self.class_embed.shape[0] != self.n_classes:
            raise ShapeError("class_embed must have one row per class")
        for head in ("Wm", "Wv"):
            if self.trunk[head].shape[1] != self.latent_dim:
                raise ShapeError(f"generator head {head} must output latent_dim values")

    def parameters(self) -> list[Tensor]:
        return [self.class_embed] + list(self.trunk.values())

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {"generator.class_embed": self.class_embed.data}
        out.update({f"generator.{k}": t.data for k, t in self.trunk.items()})
        return out

    def copy(self) -> "GeneratorParams":
        return GeneratorParams(self.class_embed.copy(), {k: t.copy() for k, t in self.trunk.items()},
                               self.latent_dim, self.n_classes, self.noise_dim)


def init_generator(latent_dim: int, n_classes: int, rng: np.random.Generator,
                   hidden: int = 128, embed_dim: int | None = None,
                   noise_dim: int = 0) -> GeneratorParams:
    embed_dim = embed_dim or n_classes
    embed = Tensor(rng.standard_normal((n_classes, embed_dim)), requires_grad=True,
                   name="generator.class_embed")
    trunk = {}
    for key, fan_in, fan_out in (("h", embed_dim + noise_dim, hidden),
                                 ("m", hidden, latent_dim), ("v", hidden, latent_dim)):
        w, b = _uniform_layer(rng, fan_in, fan_out)
        trunk[f"W{key}"] = Tensor(w, requires_grad=True, name=f"generator.W{key}")
        trunk[f"b{key}"] = Tensor(b, requires_grad=True, name=f"generator.b{key}")
    return GeneratorParams(embed, trunk, latent_dim, n_classes, noise_dim)


class GeneratorOutput(NamedTuple):
    z: Tensor
    mean: Tensor
    logvar: Tensor


def _check_labels(labels: np.ndarray, n_classes: int) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")


def generator_forward(tape: Tape, gen: GeneratorParams, labels, noise,
                      trunk_noise=None) -> GeneratorOutput:
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    _check_labels(labels, gen.n_classes)
    noise = noise if isinstance(noise, Tensor) else Tensor(np.reshape(noise, (labels.size, gen.latent_dim)))
    onehot = np.zeros((labels.size, gen.n_classes))
    onehot[np.arange(labels.size), labels] = 1.0
    h = tape.matmul(Tensor(onehot, _copy=False), gen.class_embed)
    if gen.noise_dim:
        if trunk_noise is None:
            raise ValueError("generator with noise_dim > 0 needs trunk_noise")
        h = tape.concat([h, as_input(trunk_noise)], axis=1)
    h = tape.relu(tape.add(tape.matmul(h, gen.trunk["Wh"]), gen.trunk["bh"]))
    mean = tape.add(tape.matmul(h, gen.trunk["Wm"]), gen.trunk["bm"])
    logvar = tape.clamp(tape.add(tape.matmul(h, gen.trunk["Wv"]), gen.trunk["bv"]),
                        LOGVAR_MIN, LOGVAR_MAX)
    return GeneratorOutput(tape.reparameterize(mean, logvar, noise), mean, logvar)


def as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def generator_sample(gen: GeneratorParams, y, noise=None, rng_seed=None,
                     tape: Tape | None = None) -> Tensor:
    """Reparameterized latent sample(s) for label(s) ``y``.

    Missing ``noise`` (and trunk noise, if the generator takes any) is drawn
    from ``np.random.default_rng(rng_seed)``.
    """
    labels = np.atleast_1d(np.asarray(y, dtype=np.int64))
    _check_labels(labels, gen.n_classes)
    rng = np.random.default_rng(rng_seed)
    if noise is None:
        noise = rng.standard_normal((labels.size, gen.latent_dim))
    trunk_noise = rng.standard_normal((labels.size, gen.noise_dim)) if gen.noise_dim else None
    tape = tape if tape is not None else Tape()
    return generator_forward(tape, gen, labels, noise, trunk_noise).z


@dataclass
class GeneratorBatch:
    labels: np.ndarray
    noise: np.ndarray
    trunk_noise: np.ndarray | None = None

    def __len__(self) -> int:
        return int(self.labels.size)


def sample_generator_batch(gen: GeneratorParams, size: int,
                           rng: np.random.Generator) -> GeneratorBatch:
    """Labels uniform over classes plus standard-normal noise."""
    labels = rng.integers(0, gen.n_classes, size=size)
    noise = rng.standard_normal((size, gen.latent_dim))
    trunk = rng.standard_normal((size, gen.noise_dim)) if gen.noise_dim else None
    return GeneratorBatch(labels, noise, trunk)


# -- generator objective -----------------------------------------------------


def _predictor_arrays(p) -> tuple[np.ndarray, np.ndarray]:
    pred = p.predictor if isinstance(p, ModelParams) else p
    return pred["W"].data, pred["b"].data


def predictor_bank_ce(tape: Tape, z: Tensor, weights: np.ndarray, biases: np.ndarray,
                      labels: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Sum over a bank of frozen linear predictors of their mean cross-entropy on ``(z, labels)``.

    ``weights`` is ``[n_pred, latent, classes]``, ``biases`` ``[n_pred, classes]``.
    Returns the summed loss on the tape and the per-predictor terms.
    """
    n = labels.size
    if weights.shape[0] == 0:
        return tape.scale(tape.sum(z), 0.0), np.zeros(0)
    k, dim, c = weights.shape
    # one [latent x (k*classes)] matmul instead of k small ones
    w_flat = weights.transpose(1, 0, 2).reshape(dim, k * c)
    logits = (z.data @ w_flat).reshape(n, k, c).transpose(1, 0, 2) + biases[:, None, :]
    lsm = log_softmax_rows(logits)
    rows = np.arange(n)
    terms = -lsm[:, rows, labels].mean(axis=1)

    def back(g):
        d = np.exp(lsm)
        d[:, rows, labels] -= 1.0
        return ((d.transpose(1, 0, 2).reshape(n, k * c) @ w_flat.T) * (float(g) / n),)

    return tape.record("predictor_bank_ce", (z,), np.array(terms.sum()), back), terms


def kl_standard_normal(tape: Tape, mean: Tensor, logvar: Tensor) -> Tensor:
    """Batch-mean ``KL(N(mean, exp(logvar)) || N(0, I))``."""
    n, d = mean.shape
    inner = tape.sub(tape.add(tape.exp(logvar), tape.mul(mean, mean)), logvar)
    total = tape.scale(tape.sum(inner), 0.5 / n)
    return tape.add(total, Tensor(-0.5 * d))


@dataclass
class GeneratorLoss:
    """``value`` is the objective; ``loss`` is the tape scalar to differentiate.

    The self branch goes through gradient reversal, so ``loss`` carries the
    self term with a plus sign in its forward value while its gradient is
    that of ``value``.
    """

    loss: Tensor
    value: float
    other_terms: np.ndarray
    self_term: float
    kl: float = 0.0
    z: Tensor | None = field(default=None, repr=False)


def _stack_predictors(predictors) -> tuple[np.ndarray, np.ndarray]:
    arrays = [_predictor_arrays(p) for p in predictors]
    return np.stack([w for w, _ in arrays]), np.stack([b for _, b in arrays])


def generator_loss(gen: GeneratorParams, predictors: Sequence, k: int | None,
                   batch: GeneratorBatch, grl: GrlSpec = GrlSpec(), beta: float = 0.0,
                   tape: Tape | None = None) -> GeneratorLoss:
    """Other predictors' cross-entropy minus the self predictor's, on generated latents.

    ``k=None`` drops the self term and sums over every predictor (the
    shared-generator variant).  ``beta`` adds a KL penalty towards N(0, I)
    to ``loss`` only; ``value`` excludes it.
    """
    if not predictors:
        raise ValueError("generator_loss needs at least one predictor")
    weights, biases = _stack_predictors(predictors)
    if weights.shape[1] != gen.latent_dim:
        raise ShapeError(f"predictor latent dim {weights.shape[1]} != generator {gen.latent_dim}")
    if k is not None and not 0 <= k < len(predictors):
        raise IndexError(f"self index {k} out of range for {len(predictors)} predictors")
    tape = tape if tape is not None else Tape()
    out = generator_forward(tape, gen, batch.labels, batch.noise, batch.trunk_noise)
    others = [i for i in range(len(predictors)) if i != k]
    other_loss, terms = predictor_bank_ce(tape, out.z, weights[others], biases[others], batch.labels)
    loss = other_loss
    self_term = 0.0
    if k is not None:
        reversed_z = grl_apply(grl, out.z, tape)
        w_k = Tensor(weights[k], _copy=False)
        b_k = Tensor(biases[k], _copy=False)
        self_ce = tape.cross_entropy(tape.add(tape.matmul(reversed_z, w_k), b_k), batch.labels)
        self_term = self_ce.item()
        loss = tape.add(loss, self_ce)
    kl_value = 0.0
    if beta > 0:
        kl = kl_standard_normal(tape, out.mean, out.logvar)
        kl_value = kl.item()
        loss = tape.add(loss, tape.scale(kl, beta))
    value = float(terms.sum()) - grl.lambda_grl * self_term
    return GeneratorLoss(loss, value, terms, self_term, kl_value, out.z)


def mean_log_likelihood(predictor, z: np.ndarray, labels: np.ndarray) -> float:
    """Mean ``log p(label | z)`` under a linear predictor."""
    lsm = log_softmax_rows(predictor_logits_numpy(predictor, z))
    return float(lsm[np.arange(labels.size), labels].mean())
