"""TargetedMIL: a bag-conditioned VAE with a linear latent classifier.

Generative side: z_t ~ N(mu(B), diag exp(logvar(B))) where the prior
parameters come from a mean-pooled embedding of the whole bag, and
x_t = decoder(z_t) + eps with eps ~ N(0, sigma_x2 I).  Inference side: an
amortized diagonal-Gaussian encoder.  Only the target instance of each bag
(the one whose posterior mean scores highest under the linear classifier)
enters the ELBO and the bag-level cross entropy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Bag
from .numerics import Tensor, as_tensor, clip, exp, log, matmul, max_with_index, sigmoid, softplus, square

LOGVAR_MIN, LOGVAR_MAX = -8.0, 8.0
PROB_EPS = 1e-7


@dataclass
class GaussianParams:
    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        self.mean, self.log_var = as_tensor(self.mean), as_tensor(self.log_var)
        if self.mean.shape != self.log_var.shape:
            raise ValueError(f"mean {self.mean.shape} and log_var {self.log_var.shape} differ")

    @property
    def d(self) -> int:
        return self.mean.shape[-1]


def _logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _init_layer(rng, fan_in: int, fan_out: int, zero: bool = False):
    if zero:
        W = np.zeros((fan_in, fan_out))
    else:
        bound = 1.0 / math.sqrt(fan_in)
        W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return Tensor(W, requires_grad=True), Tensor(np.zeros(fan_out), requires_grad=True)


def _build_mlp(params: dict, rng, prefix: str, sizes) -> None:
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"{prefix}.{i}.W"], params[f"{prefix}.{i}.b"] = _init_layer(rng, a, b)


def _mlp(x, params: dict, prefix: str, n_layers: int):
    """Hidden stack with softplus activations; works on Tensors and arrays."""
    for i in range(n_layers):
        W, b = params[f"{prefix}.{i}.W"], params[f"{prefix}.{i}.b"]
        if isinstance(x, Tensor):
            x = softplus(matmul(x, W) + b)
        else:
            x = np.logaddexp(0.0, x @ W.data + b.data)
    return x


def _linear(x, params: dict, name: str):
    W, b = params[f"{name}.W"], params[f"{name}.b"]
    if isinstance(x, Tensor):
        return matmul(x, W) + b
    return x @ W.data + b.data


class _ParamModel:
    params: dict[str, Tensor]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


@dataclass(eq=False)
class TargetedMILModel(_ParamModel):
    m: int
    d: int = 32
    alpha: float = 1.0
    sigma_x2: float = 0.1
    enc_hidden: tuple[int, ...] = (256, 128)
    dec_hidden: tuple[int, ...] = (128, 256)
    prior_hidden: tuple[int, ...] = (128,)
    seed: int = 0
    params: dict[str, Tensor] = field(default_factory=dict, repr=False)

    kind = "targetedmil"

    def __post_init__(self):
        self.enc_hidden = tuple(int(h) for h in self.enc_hidden)
        self.dec_hidden = tuple(int(h) for h in self.dec_hidden)
        self.prior_hidden = tuple(int(h) for h in self.prior_hidden)
        if self.d < 1 or self.m < 1:
            raise ValueError("m and d must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not self.sigma_x2 > 0:
            raise ValueError("sigma_x2 must be > 0")
        if not self.params:
            self.params = self._init_params(np.random.default_rng(self.seed))

    def _init_params(self, rng) -> dict[str, Tensor]:
        p: dict[str, Tensor] = {}
        d, m = self.d, self.m
        # heads start at zero (prior = N(0, I), decoder mean 0.5) except the
        # posterior mean and the classifier: with either zero every instance
        # scores alike, the argmax target is always index 0 and selection
        # never breaks symmetry
        _build_mlp(p, rng, "enc", (m, *self.enc_hidden))
        h = self.enc_hidden[-1] if self.enc_hidden else m
        p["enc.mean.W"], p["enc.mean.b"] = _init_layer(rng, h, d)
        p["enc.logvar.W"], p["enc.logvar.b"] = _init_layer(rng, h, d, zero=True)
        _build_mlp(p, rng, "dec", (d, *self.dec_hidden))
        h = self.dec_hidden[-1] if self.dec_hidden else d
        p["dec.out.W"], p["dec.out.b"] = _init_layer(rng, h, m, zero=True)
        _build_mlp(p, rng, "prior", (m, *self.prior_hidden))
        h = self.prior_hidden[-1] if self.prior_hidden else m
        p["prior.mean.W"], p["prior.mean.b"] = _init_layer(rng, h, d, zero=True)
        p["prior.logvar.W"], p["prior.logvar.b"] = _init_layer(rng, h, d, zero=True)
        p["cls.w"] = Tensor(rng.uniform(-1.0, 1.0, d) / math.sqrt(d), requires_grad=True)
        p["cls.b"] = Tensor(np.zeros(()), requires_grad=True)
        return p

    def hyper(self) -> dict:
        return {
            "m": self.m,
            "d": self.d,
            "alpha": self.alpha,
            "sigma_x2": self.sigma_x2,
            "enc_hidden": list(self.enc_hidden),
            "dec_hidden": list(self.dec_hidden),
            "prior_hidden": list(self.prior_hidden),
            "seed": self.seed,
        }

    def instance_scores(self, instances: np.ndarray) -> np.ndarray:
        mu = encode_mean(instances, self)
        return _logistic(mu @ self.params["cls.w"].data + self.params["cls.b"].data)

    def reconstruct(self, instances: np.ndarray) -> np.ndarray:
        """Decoder mean at the posterior mean, without building a graph."""
        z = encode_mean(instances, self)
        h = _mlp(np.atleast_2d(z), self.params, "dec", len(self.dec_hidden))
        return _logistic(_linear(h, self.params, "dec.out"))


@dataclass(eq=False)
class BaselineModel(_ParamModel):
    """Instance-level MLP scorer trained through max pooling."""

    m: int
    hidden: tuple[int, ...] = (256, 128)
    seed: int = 0
    params: dict[str, Tensor] = field(default_factory=dict, repr=False)

    kind = "baseline"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.params:
            rng = np.random.default_rng(self.seed)
            p: dict[str, Tensor] = {}
            _build_mlp(p, rng, "mlp", (self.m, *self.hidden))
            p["out.W"], p["out.b"] = _init_layer(rng, self.hidden[-1] if self.hidden else self.m, 1)
            self.params = p

    def hyper(self) -> dict:
        return {"m": self.m, "hidden": list(self.hidden), "seed": self.seed}

    def logits(self, x):
        h = _mlp(x, self.params, "mlp", len(self.hidden))
        out = _linear(h, self.params, "out")
        if isinstance(out, Tensor):
            return out.sum(axis=1)
        return out[:, 0]

    def instance_scores(self, instances: np.ndarray) -> np.ndarray:
        return _logistic(self.logits(np.atleast_2d(instances)))


# ------------------------------------------------------------------ pieces


def _as_instances(bag) -> np.ndarray:
    x = bag.instances if isinstance(bag, Bag) else np.asarray(bag, dtype=np.float64)
    x = np.atleast_2d(x)
    if x.shape[0] == 0:
        raise ValueError("empty bag")
    return x


def _check_width(x, expected: int, what: str) -> None:
    width = x.shape[-1]
    if width != expected:
        raise ValueError(f"{what}: expected last dimension {expected}, got {width}")


def encode(x, model: TargetedMILModel) -> GaussianParams:
    """Posterior q(z | x) for one instance (m,) or a stack (n, m)."""
    x = as_tensor(x)
    _check_width(x, model.m, "encode")
    h = _mlp(x, model.params, "enc", len(model.enc_hidden))
    mean = _linear(h, model.params, "enc.mean")
    log_var = clip(_linear(h, model.params, "enc.logvar"), LOGVAR_MIN, LOGVAR_MAX)
    return GaussianParams(mean, log_var)


def encode_mean(instances: np.ndarray, model: TargetedMILModel) -> np.ndarray:
    x = np.asarray(instances, dtype=np.float64)
    _check_width(x, model.m, "encode")
    h = _mlp(x, model.params, "enc", len(model.enc_hidden))
    return _linear(h, model.params, "enc.mean")


def decode(z, model: TargetedMILModel) -> Tensor:
    """Decoder mean in (0, 1)."""
    z = as_tensor(z)
    _check_width(z, model.d, "decode")
    h = _mlp(z, model.params, "dec", len(model.dec_hidden))
    return sigmoid(_linear(h, model.params, "dec.out"))


def bag_prior(bag, model: TargetedMILModel) -> GaussianParams:
    """Conditional prior p(z | B) from the mean-pooled instance embeddings."""
    x = _as_instances(bag)
    _check_width(x, model.m, "bag_prior")
    emb = _mlp(Tensor(x), model.params, "prior", len(model.prior_hidden))
    pooled = emb.mean(axis=0)
    mean = _linear(pooled, model.params, "prior.mean")
    log_var = clip(_linear(pooled, model.params, "prior.logvar"), LOGVAR_MIN, LOGVAR_MAX)
    return GaussianParams(mean, log_var)


def reparam_sample(g: GaussianParams, noise) -> Tensor:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != g.mean.shape:
        raise ValueError(f"noise shape {noise.shape} != latent shape {g.mean.shape}")
    return g.mean + exp(g.log_var * 0.5) * noise


def gaussian_kl(q: GaussianParams, p: GaussianParams) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over every dimension."""
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise ValueError(f"dimension mismatch: {q.d} vs {p.d}")
    inv_var_p = exp(-p.log_var)
    terms = p.log_var - q.log_var + (exp(q.log_var) + square(q.mean - p.mean)) * inv_var_p - 1.0
    return terms.sum() * 0.5


def gaussian_log_likelihood(x, mean: Tensor, var: float) -> Tensor:
    """log N(x | mean, var * I), summed over coordinates."""
    x = np.asarray(x, dtype=np.float64)
    resid = square(mean - x)
    const = -0.5 * x.size * math.log(2.0 * math.pi * var)
    return resid.sum() * (-0.5 / var) + const


def classify(z, model_or_w, b=None) -> Tensor:
    """logistic(w . z + b); accepts a model or an explicit (w, b) pair."""
    if isinstance(model_or_w, TargetedMILModel):
        w, b = model_or_w.params["cls.w"], model_or_w.params["cls.b"]
    else:
        w, b = as_tensor(model_or_w), as_tensor(b if b is not None else 0.0)
    z = as_tensor(z)
    _check_width(z, w.shape[0], "classify")
    return sigmoid(matmul(z, w) + b)


def select_target(bag, model: TargetedMILModel) -> int:
    """Index of the instance whose posterior mean scores highest (lowest index on ties)."""
    return int(np.argmax(model.instance_scores(_as_instances(bag))))


def _bce(p: Tensor, y: int) -> Tensor:
    p = clip(p, PROB_EPS, 1.0 - PROB_EPS)
    if y:
        return -log(p)
    return -log(1.0 - p)


@dataclass
class LossBreakdown:
    recon: Tensor
    kl: Tensor
    cls: Tensor
    total: Tensor
    selected_index: int

    def floats(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("recon", "kl", "cls", "total")}


def elbo(bag, model: TargetedMILModel, noise, target: int | None = None) -> dict:
    """Single-sample ELBO for the target instance of ``bag``.

    Returns ``{"recon", "kl", "selected_index", "posterior"}``; the ELBO
    estimate is ``recon - kl``.
    """
    x = _as_instances(bag)
    t = select_target(x, model) if target is None else int(target)
    q = encode(x[t], model)
    z = reparam_sample(q, noise)
    recon = gaussian_log_likelihood(x[t], decode(z, model), model.sigma_x2)
    kl = gaussian_kl(q, bag_prior(x, model))
    return {"recon": recon, "kl": kl, "selected_index": t, "posterior": q}


def cls_loss(bag, y: int, model: TargetedMILModel, target: int | None = None, posterior=None) -> Tensor:
    """Bag-level binary cross entropy on the selected instance's posterior mean."""
    x = _as_instances(bag)
    if posterior is None:
        t = select_target(x, model) if target is None else int(target)
        posterior = encode(x[t], model)
    return _bce(classify(posterior.mean, model), int(y))


def combine_loss(recon, kl, cls, alpha: float):
    return -(recon - kl) + cls * alpha


def total_loss(bag, y: int, model: TargetedMILModel, noise, alpha: float | None = None) -> LossBreakdown:
    """-(recon - kl) + alpha * cls, with the target chosen once per call."""
    alpha = model.alpha if alpha is None else alpha
    parts = elbo(bag, model, noise)
    cls = cls_loss(bag, y, model, posterior=parts["posterior"])
    total = combine_loss(parts["recon"], parts["kl"], cls, alpha)
    return LossBreakdown(parts["recon"], parts["kl"], cls, total, parts["selected_index"])


def elbo_all_instances(bag, model: TargetedMILModel, noise) -> tuple[Tensor, Tensor]:
    """Summed (recon, kl) treating every instance of the bag as a target.

    Used for the synthetic identifiability runs, where every instance is
    generated from the bag-conditioned prior.
    """
    x = _as_instances(bag)
    q = encode(x, model)
    z = reparam_sample(q, noise)
    recon = gaussian_log_likelihood(x, decode(z, model), model.sigma_x2)
    kl = gaussian_kl(q, bag_prior(x, model))
    return recon, kl


def baseline_loss(bag, y: int, model: BaselineModel) -> tuple[Tensor, int]:
    x = _as_instances(bag)
    scores = sigmoid(model.logits(Tensor(x)))
    top, idx = max_with_index(scores)
    return _bce(top, int(y)), idx


def predict_instance_scores(bag, model) -> np.ndarray:
    return model.instance_scores(_as_instances(bag))


def predict_bag_label(scores, tau: float = 0.5) -> int:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("empty score list")
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    return int(np.any(scores >= tau))
