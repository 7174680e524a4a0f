"""Comparison methods: Nearest Class Mean, Prototype-kNN over GMM centroids,
and a soft-distillation fine-tuner that lets base parameters move."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .expand import augmented_pool, batch_stream, expand_deep, training_streams
from .features import FeatureSet, load_features, save_features
from .gmm import GmmBank, mixture_mean
from .net import TwoLayerNet, fit, log_softmax, softmax
from .optim import TrainConfig
from ._textio import FormatError

_K_RE = re.compile(r"^# prototypes k=([0-9]+)\s*$")


@dataclass(frozen=True, eq=False)
class PrototypeSet:
    labels: tuple
    prototypes: np.ndarray
    k: int = 1

    def __post_init__(self):
        protos = np.atleast_2d(np.asarray(self.prototypes, dtype=np.float64))
        labels = tuple(self.labels)
        if len(labels) != protos.shape[0] or not labels:
            raise ValueError("need one label per prototype and at least one prototype")
        counts = {lab: labels.count(lab) for lab in dict.fromkeys(labels)}
        if not 1 <= self.k <= min(counts.values()):
            raise ValueError(f"k={self.k} outside [1, {min(counts.values())}]")
        protos.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "prototypes", protos)

    @property
    def class_labels(self):
        return list(dict.fromkeys(self.labels))

    @property
    def dims(self):
        return self.prototypes.shape[1]

    def __len__(self):
        return len(self.labels)

    def _sq_dists(self, X, chunk=256):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dims:
            raise ValueError(f"dimension mismatch: got {X.shape[1]}, prototypes have {self.dims}")
        out = np.empty((X.shape[0], len(self)))
        for s in range(0, X.shape[0], chunk):
            diff = X[s:s + chunk, None, :] - self.prototypes[None, :, :]
            out[s:s + chunk] = np.einsum("npd,npd->np", diff, diff)
        return out

    def predict(self, X):
        """Majority vote among the k nearest prototypes; ties fall back to 1-NN.

        Equal distances are ordered by prototype entry order.
        """
        d2 = self._sq_dists(X)
        order = np.argsort(d2, axis=1, kind="stable")
        labels = np.array(self.labels, dtype=object)
        nearest = labels[order[:, 0]]
        if self.k == 1:
            return nearest
        out = nearest.copy()
        for i, row in enumerate(labels[order[:, : self.k]]):
            names, counts = np.unique(row.astype(str), return_counts=True)
            top = counts.max()
            if (counts == top).sum() == 1:
                out[i] = names[np.argmax(counts)]
        return out


def _pool_means(novel_pool):
    out = {}
    for lab, x in novel_pool.items():
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[0] == 0 or x.size == 0:
            raise ValueError(f"class {lab!r} has no samples")
        out[lab] = x
    return out


def ncm_build(bank: GmmBank, novel_pool) -> PrototypeSet:
    """One prototype per class: GMM mixture means for base, sample means for novel."""
    pool = _pool_means(novel_pool)
    labels = list(bank.labels) + list(pool)
    protos = [mixture_mean(m) for _, m in bank.entries] + [x.mean(axis=0) for x in pool.values()]
    return PrototypeSet(tuple(labels), np.array(protos), k=1)


def pknn_build(bank: GmmBank, novel_pool) -> PrototypeSet:
    """Every GMM centroid of each base class plus every raw novel sample.

    ``k`` is the smallest per-class prototype count.
    """
    pool = _pool_means(novel_pool)
    labels, blocks = [], []
    for lab, model in bank.entries:
        labels += [lab] * model.mixtures
        blocks.append(model.means)
    for lab, x in pool.items():
        labels += [lab] * x.shape[0]
        blocks.append(x)
    counts = [labels.count(lab) for lab in dict.fromkeys(labels)]
    return PrototypeSet(tuple(labels), np.concatenate(blocks), k=min(counts))


def ncm_classify(protos: PrototypeSet, v):
    d2 = protos._sq_dists(np.atleast_2d(v))[0]
    return protos.labels[int(np.argmin(d2))]


def pknn_classify(protos: PrototypeSet, v):
    return protos.predict(np.atleast_2d(v))[0]


def save_prototypes(protos: PrototypeSet, path):
    fs = FeatureSet(protos.dims, protos.labels, protos.prototypes)
    save_features(fs, path, comments=[f"prototypes k={protos.k}"])


def load_prototypes(path) -> PrototypeSet:
    fs = load_features(path)
    k = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            m = _K_RE.match(line.rstrip("\n"))
            if m:
                k = int(m.group(1))
                break
    if k is None:
        raise FormatError(f"{path}: missing '# prototypes k=' line")
    try:
        return PrototypeSet(fs.labels, fs.vectors, k)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


# -- soft distillation ---------------------------------------------------------

@dataclass(frozen=True)
class SoftDisConfig(TrainConfig):
    lam: float = 1.0
    temperature: float = 2.0

    def __post_init__(self):
        super().__post_init__()
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


def distillation_kl(student_logits, teacher_logits, temperature):
    """Mean KL(teacher || student) of temperature-softened distributions."""
    lq_t = log_softmax(np.asarray(teacher_logits) / temperature)
    lq_s = log_softmax(np.asarray(student_logits) / temperature)
    return float(np.mean(np.sum(np.exp(lq_t) * (lq_t - lq_s), axis=1)))


def distillation_term(teacher, n_base, lam, temperature):
    """Objective hook ``(batch, logits) -> (loss, dlogits)`` for
    ``lam * T^2 * KL(teacher || student)`` over the base outputs."""

    def term(batch, z):
        dz = np.zeros_like(z)
        if lam == 0:
            return 0.0, dz
        zt = teacher.logits(batch.inputs)[:, :n_base]
        zs = z[:, :n_base]
        kl = distillation_kl(zs, zt, temperature)
        q_s = softmax(zs / temperature)
        q_t = softmax(zt / temperature)
        dz[:, :n_base] = lam * temperature * (q_s - q_t) / len(batch)
        return lam * temperature**2 * kl, dz

    return term


def soft_dis_init(base_net: TwoLayerNet, novel_labels, new_features=0, seed=0) -> TwoLayerNet:
    """Expanded copy of ``base_net`` with every parameter trainable."""
    net = expand_deep(base_net, novel_labels, new_features, seed)
    net.frozen = {k: np.zeros_like(m) for k, m in net.frozen.items()}
    net.base_hidden = net.hidden_dims
    return net


def soft_dis_train(base_net: TwoLayerNet, bank: GmmBank, novel_pool, cfg: SoftDisConfig = SoftDisConfig(),
                   *, masked=False, new_features=0, verbose=False) -> TwoLayerNet:
    """Fine-tune all FC1/FC2 weights of an expanded copy on cross-entropy plus
    distillation toward the frozen ``base_net``."""
    if list(bank.labels) != list(base_net.labels):
        raise ValueError("bank labels must match the base model labels in order")
    novel_labels = list(novel_pool)
    net = soft_dis_init(base_net, novel_labels, new_features, cfg.seed)
    aug_rng, batch_rng, mask_rng = training_streams(cfg.seed)
    pool = augmented_pool(bank, novel_pool, cfg, aug_rng)
    term = distillation_term(base_net, len(base_net.labels), cfg.lam, cfg.temperature)
    fit(net, batch_stream(bank, pool, net.labels, cfg, batch_rng), cfg,
        rng=mask_rng, masked=masked, verbose=verbose, extra=term)
    return net
