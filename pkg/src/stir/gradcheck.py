"""Finite-difference suites for the tape (64-bit, dropout off).

Each suite returns the worst relative error it saw.  The error for one
parameter tensor is ``max|backward - numeric| / max(max|numeric|, floor)``
where ``floor`` is 1e-3 of the largest numeric gradient in the suite, so
parameters whose gradient is many orders below the rest are not judged on
round-off alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .mining import batch_triplet_loss, distance_matrix, mine_hard_triplets
from .vit import EncoderConfig, EncoderWeights, forward_embed, forward_pair, init_weights

TINY = EncoderConfig(image_h=8, image_w=8, channels=2, patch_size=4, embed_dim=8, num_heads=2, depth=2, mlp_ratio=2.0, head_dropout=0.0)
TOLERANCE = 1e-3


@dataclass
class SuiteResult:
    name: str
    max_rel_error: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _randomized_weights(config: EncoderConfig, seed: int) -> EncoderWeights:
    """Init weights with every tensor perturbed, so no gradient is structurally zero."""
    w = init_weights(config, seed).astype(np.float64)
    rng = np.random.default_rng(seed + 1)
    for name, arr in w.params.items():
        w.params[name] = arr + rng.normal(0, 0.1, arr.shape)
    return w


def _relative_errors(analytic: dict, numeric: dict) -> float:
    scale = max(float(np.max(np.abs(g))) for g in numeric.values())
    floor = max(1e-3 * scale, 1e-12)
    worst = 0.0
    for name, num in numeric.items():
        denom = max(float(np.max(np.abs(num))), floor)
        worst = max(worst, float(np.max(np.abs(analytic[name] - num))) / denom)
    return worst


def check_parameters(loss_fn, weights: EncoderWeights, names, eps: float = 1e-5, max_entries: int | None = None, seed: int = 0) -> tuple[float, int]:
    """Compare backward() with central differences for the named parameters.

    ``loss_fn(params: dict[str, Tensor]) -> scalar Tensor``.  With ``max_entries``
    only that many randomly chosen entries per tensor are perturbed.
    """
    params = weights.tensors(names)
    ad.backward(loss_fn(params))
    analytic, numeric = {}, {}
    rng = np.random.default_rng(seed)
    checked = 0
    for name in names:
        base = weights.params[name]
        flat_idx = np.arange(base.size)
        if max_entries is not None and base.size > max_entries:
            flat_idx = np.sort(rng.choice(base.size, max_entries, replace=False))
        grad = params[name].grad if params[name].grad is not None else np.zeros_like(base)
        num = np.empty(len(flat_idx))
        for j, i in enumerate(flat_idx):
            vals = []
            for sign in (1, -1):
                pert = base.copy().reshape(-1)
                pert[i] += sign * eps
                p = {k: Tensor(v, dtype=v.dtype) for k, v in weights.params.items()}
                p[name] = Tensor(pert.reshape(base.shape), dtype=base.dtype)
                vals.append(loss_fn(p).item())
            num[j] = (vals[0] - vals[1]) / (2 * eps)
        analytic[name] = grad.reshape(-1)[flat_idx]
        numeric[name] = num
        checked += len(flat_idx)
    return _relative_errors(analytic, numeric), checked


def _images(config: EncoderConfig, n: int, rng, width_factor: int = 1) -> np.ndarray:
    return rng.uniform(0, 1, (n, config.image_h, config.image_w * width_factor, config.channels))


def suite_ops(seed: int = 0) -> SuiteResult:
    """Every differentiable op inside one composite expression, 100 random trials."""
    rng = np.random.default_rng(seed)
    worst, checked = 0.0, 0

    def f(a, b, g, bias, y):
        h = ad.layernorm(a @ b, g, bias)
        s = ad.softmax(h, axis=-1)
        z = ad.concat([ad.gelu(h), ad.sigmoid(h) * s, ad.relu(h)], axis=1)
        p = ad.sigmoid(z.mean(axis=1))
        return ad.bce_loss(p, y) + (ad.l2_normalize(z, axis=1) ** 2).mean() + ad.sqrt(ad.exp(h).sum())

    for _ in range(100):
        arrays = [rng.normal(size=s) for s in ((3, 4), (4, 5), (5,), (5,))]
        y = rng.integers(0, 2, 3)
        leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
        ad.backward(f(*leaves, y))
        for i, leaf in enumerate(leaves):

            def fi(x, i=i):
                args = [Tensor(a, dtype=np.float64) for a in arrays]
                args[i] = x
                return f(*args, y)

            num = ad.finite_diff_grad(fi, Tensor(arrays[i], dtype=np.float64), 1e-5)
            denom = max(float(np.max(np.abs(num))), 1e-8)
            worst = max(worst, float(np.max(np.abs(leaf.grad - num))) / denom)
            checked += num.size
    return SuiteResult("ops", worst, checked)


def suite_triplet(seed: int = 0, config: EncoderConfig = TINY, max_entries: int | None = None) -> SuiteResult:
    """Encoder + distance matrix + batch-hard triplet loss (triplets mined once, then held fixed)."""
    rng = np.random.default_rng(seed)
    w = _randomized_weights(config, seed)
    images = _images(config, 6, rng)
    labels = np.array([0, 0, 1, 1, 2, 2])
    base = forward_embed(w.tensors(), images, config)
    triplets = mine_hard_triplets(distance_matrix(base), labels)

    def loss(params):
        d = distance_matrix(forward_embed(params, images, config))
        return batch_triplet_loss(d, triplets, margin=10.0)  # wide margin keeps every hinge active

    err, n = check_parameters(loss, w, w.embedding_names(), max_entries=max_entries, seed=seed)
    return SuiteResult("encoder+triplet", err, n)


def suite_pair_bce(seed: int = 0, config: EncoderConfig = TINY, max_entries: int | None = None) -> SuiteResult:
    """Width-concatenated pair encoder + head + BCE, every parameter the pair path reads."""
    rng = np.random.default_rng(seed)
    w = _randomized_weights(config, seed)
    left, right = _images(config, 4, rng), _images(config, 4, rng)
    y = np.array([0, 1, 1, 0])

    def loss(params):
        return ad.bce_loss(forward_pair(params, left, right, config, train=False), y)

    err, n = check_parameters(loss, w, w.pair_names(), max_entries=max_entries, seed=seed)
    return SuiteResult("pair+bce", err, n)


def run_all(seed: int = 0, config: EncoderConfig | None = None) -> list[SuiteResult]:
    """The three suites on the tiny config, plus sampled entries on ``config`` if given."""
    results = [suite_ops(seed), suite_triplet(seed), suite_pair_bce(seed)]
    if config is not None:
        cfg64 = config if config.head_dropout == 0 else EncoderConfig(**{**config.to_dict(), "head_dropout": 0.0})
        for suite in (suite_triplet, suite_pair_bce):
            r = suite(seed, cfg64, 4)
            results.append(SuiteResult("full-size " + r.name, r.max_rel_error, r.checked))
    return results
