"""Hard-distillation expansion: add novel output rows (and optionally new
hidden units) to a trained network, freeze everything that existed before,
and train the new parameters on balanced batches of GMM generations and
jittered novel samples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gmm import GmmBank, sample
from .net import Batch, SoftmaxHead, TwoLayerNet, fit, glorot
from .optim import OptimizerState, TrainConfig, sgd_step  # noqa: F401  (re-exported)

_U64 = (1 << 64) - 1


def _check_novel(existing, novel_labels):
    novel_labels = list(novel_labels)
    clash = set(existing) & set(novel_labels)
    if clash or len(set(novel_labels)) != len(novel_labels):
        raise ValueError(f"duplicate label(s): {sorted(clash) or novel_labels}")
    return novel_labels


def expand_head(head: SoftmaxHead, novel_labels, seed=0) -> SoftmaxHead:
    """Append one trainable row per novel label; existing rows become frozen."""
    novel = _check_novel(head.labels, novel_labels)
    c, n = head.weights.shape
    r = len(novel)
    rng = np.random.default_rng(seed & _U64)
    w = np.concatenate([head.weights, glorot(rng, r, n, n, c + r)])
    b = None if head.bias is None else np.concatenate([head.bias, np.zeros(r)])
    return SoftmaxHead(head.labels + novel, w, b, frozen_rows=c)


def expand_deep(net: TwoLayerNet, novel_labels, new_features=0, seed=0) -> TwoLayerNet:
    """Expand FC2 with novel rows and FC1 with ``new_features`` hidden units.

    Every pre-existing entry is frozen. The FC2 block linking new hidden
    units to base outputs is zero, frozen, and skipped by the forward pass.
    """
    if new_features < 0:
        raise ValueError("new_features must be >= 0")
    novel = _check_novel(net.labels, novel_labels)
    p = net.params
    h, n_in = p["fc1"].shape
    c = p["fc2"].shape[0]
    r, d = len(novel), int(new_features)
    rng = np.random.default_rng(seed & _U64)
    novel_rows = glorot(rng, r, h + d, h + d, c + r)
    new_units = glorot(rng, d, n_in, n_in, h + d)

    fc1 = np.concatenate([p["fc1"], new_units])
    fc2 = np.zeros((c + r, h + d))
    fc2[:c, :h] = p["fc2"]
    fc2[c:] = novel_rows
    frozen1 = np.zeros(fc1.shape, bool)
    frozen1[:h] = True
    frozen2 = np.zeros(fc2.shape, bool)
    frozen2[:c] = True
    frozen = {"fc1": frozen1, "fc2": frozen2}
    b1 = b2 = None
    if "b1" in p:
        b1 = np.concatenate([p["b1"], np.zeros(d)])
        frozen["b1"] = np.arange(h + d) < h
    if "b2" in p:
        b2 = np.concatenate([p["b2"], np.zeros(r)])
        frozen["b2"] = np.arange(c + r) < c
    return TwoLayerNet(net.labels + novel, fc1, fc2, b1, b2, frozen, base_hidden=h, base_out=c)


@dataclass
class ExpandedModel:
    base: object
    expanded: object
    novel_labels: list

    @property
    def labels(self):
        return self.expanded.labels

    def logits(self, X):
        return self.expanded.logits(X)

    def predict(self, X):
        return self.expanded.predict(X)


def expand_model(base, novel_labels, new_features=0, seed=0) -> ExpandedModel:
    """Expand a head or two-layer network; heads ignore ``new_features``."""
    if isinstance(base, SoftmaxHead):
        if new_features:
            raise ValueError("a softmax head has no hidden layer to expand")
        expanded = expand_head(base, novel_labels, seed)
    elif isinstance(base, TwoLayerNet):
        expanded = expand_deep(base, novel_labels, new_features, seed)
    else:
        raise TypeError(f"cannot expand {type(base).__name__}")
    return ExpandedModel(base, expanded, list(novel_labels))


def augment(samples, count, scale, unit_std, rng):
    """Originals followed, per original, by ``count`` Gaussian-jittered copies.

    Jitter standard deviation is ``scale * unit_std``. Output rows are grouped
    per original: ``[x0, x0+e.., x1, x1+e.., ...]``.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("no samples to augment")
    if scale < 0:
        raise ValueError("scale must be non-negative")
    if count == 0:
        return X.copy()
    noise = rng.standard_normal((X.shape[0], count, X.shape[1])) * (scale * unit_std)
    jittered = X[:, None, :] + noise
    return np.concatenate([X[:, None, :], jittered], axis=1).reshape(-1, X.shape[1])


def make_batch(bank: GmmBank, novel_pool, b, rng, labels=None) -> Batch:
    """Balanced batch: ``b`` GMM draws per base class, ``b`` pool draws per novel class.

    Targets index into ``labels`` (default: bank labels, then pool labels).
    """
    if b < 1:
        raise ValueError("b must be >= 1")
    labels = list(bank.labels) + list(novel_pool) if labels is None else list(labels)
    pos = {lab: i for i, lab in enumerate(labels)}
    parts, targets = [], []
    for lab, model in bank.entries:
        parts.append(sample(model, b, rng))
        targets.append(np.full(b, pos[lab]))
    for lab, pool in novel_pool.items():
        pool = np.atleast_2d(pool)
        if pool.shape[0] == 0 or pool.size == 0:
            raise ValueError(f"empty novel pool for {lab!r}")
        parts.append(pool[rng.integers(pool.shape[0], size=b)])
        targets.append(np.full(b, pos[lab]))
    X = np.concatenate(parts)
    y = np.concatenate(targets)
    order = rng.permutation(len(y))
    return Batch(X[order], y[order])


def training_streams(seed):
    """Independent generators for augmentation, batches, and dropout masks."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed & _U64).spawn(3)]


def augmented_pool(bank, novel_pool, cfg, rng):
    unit = np.sqrt(bank.mean_variance())
    return {lab: augment(x, cfg.aug_per_sample, cfg.aug_scale, unit, rng) for lab, x in novel_pool.items()}


def batch_stream(bank, pool, labels, cfg, rng):
    for _ in range(cfg.iters):
        yield make_batch(bank, pool, cfg.batch_per_class, rng, labels)


def train_expansion(model: ExpandedModel, bank: GmmBank, novel_pool, cfg: TrainConfig = TrainConfig(),
                    *, masked=True, verbose=False) -> ExpandedModel:
    """Train the expansion parameters; returns a new ExpandedModel.

    ``novel_pool`` maps each novel label to its raw low-shot samples; they are
    jittered here per ``cfg``. With ``masked=False`` the update skips gradient
    dropout entirely.
    """
    base_labels = [lab for lab in model.labels if lab not in model.novel_labels]
    if list(bank.labels) != base_labels:
        raise ValueError("bank labels must match the base model labels in order")
    if set(novel_pool) != set(model.novel_labels):
        raise ValueError("novel pool labels must match the expansion labels")
    net = model.expanded.copy()
    aug_rng, batch_rng, mask_rng = training_streams(cfg.seed)
    pool = augmented_pool(bank, {lab: novel_pool[lab] for lab in model.novel_labels}, cfg, aug_rng)
    fit(net, batch_stream(bank, pool, net.labels, cfg, batch_rng), cfg,
        rng=mask_rng, masked=masked, verbose=verbose)
    return ExpandedModel(model.base, net, list(model.novel_labels))
