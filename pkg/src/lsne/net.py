"""Softmax linear head and a two-layer (FC1 -> ReLU -> FC2) network, with
analytic cross-entropy gradients and block-structured forward passes that
keep frozen base outputs bit-exact after expansion."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from ._textio import FormatError, as_float_array, dump_json, load_json, write_text
from .features import FeatureSet
from .optim import OptimizerState, TrainLog, base_train_config, sgd_step


def glorot(rng, rows, cols, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(rows, cols))


def softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets``."""
    lp = log_softmax(logits)
    return float(-np.mean(lp[np.arange(len(targets)), targets]))


def _affine_blocks(X, W, b, split):
    """``X @ W.T + b`` computed as two row blocks split at ``split``.

    The first block is evaluated with exactly the operand shapes the
    pre-expansion layer had, so its result is bitwise reproducible.
    """
    if 0 < split < W.shape[0]:
        head = X @ W[:split].T
        tail = X @ W[split:].T
        if b is not None:
            head = head + b[:split]
            tail = tail + b[split:]
        return np.concatenate([head, tail], axis=1)
    out = X @ W.T
    return out if b is None else out + b


def _ce_dlogits(z, batch, extra):
    n = len(batch)
    loss = cross_entropy(z, batch.targets)
    dz = softmax(z)
    dz[np.arange(n), batch.targets] -= 1.0
    dz /= n
    if extra is not None:
        extra_loss, extra_dz = extra(batch, z)
        loss += extra_loss
        dz += extra_dz
    return loss, dz


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets differ in length")

    def __len__(self):
        return len(self.targets)


class _Classifier:
    labels: list

    def logits(self, X):
        raise NotImplementedError

    def predict_index(self, X):
        return np.argmax(self.logits(np.atleast_2d(X)), axis=1)

    def predict(self, X):
        idx = self.predict_index(X)
        return np.array(self.labels, dtype=object)[idx]

    def label_indices(self, labels):
        pos = {lab: i for i, lab in enumerate(self.labels)}
        try:
            return np.array([pos[lab] for lab in labels], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"label {exc.args[0]!r} not in model") from None

    def copy(self):
        return copy.deepcopy(self)


class SoftmaxHead(_Classifier):
    """Linear softmax layer; the first ``frozen_rows`` rows are immutable."""

    def __init__(self, labels, weights, bias=None, frozen_rows=0):
        self.labels = list(labels)
        w = np.array(weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != len(self.labels):
            raise ValueError("weights must have one row per label")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("duplicate labels")
        self.params = {"w": w}
        if bias is not None:
            b = np.array(bias, dtype=np.float64).reshape(-1)
            if b.shape != (w.shape[0],):
                raise ValueError("bias length must match rows")
            self.params["b"] = b
        if not 0 <= frozen_rows <= w.shape[0]:
            raise ValueError("frozen_rows out of range")
        self.frozen_rows = int(frozen_rows)

    @classmethod
    def init(cls, labels, in_dims, rng, bias=False):
        c = len(labels)
        w = glorot(rng, c, in_dims, in_dims, c)
        return cls(labels, w, np.zeros(c) if bias else None)

    @property
    def weights(self):
        return self.params["w"]

    @property
    def bias(self):
        return self.params.get("b")

    @property
    def in_dims(self):
        return self.weights.shape[1]

    def trainable(self):
        out = {}
        for k, v in self.params.items():
            mask = np.ones(v.shape, dtype=bool)
            mask[: self.frozen_rows] = False
            out[k] = mask
        return out

    def n_trainable(self):
        return int(sum(m.sum() for m in self.trainable().values()))

    def logits(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.in_dims:
            raise ValueError(f"dimension mismatch: got {X.shape[-1]}, head expects {self.in_dims}")
        single = X.ndim == 1
        out = _affine_blocks(np.atleast_2d(X), self.weights, self.bias, self.frozen_rows)
        return out[0] if single else out

    def loss_and_grad(self, batch, extra=None):
        """Mean cross-entropy and its gradient; frozen rows get exact zeros.

        ``extra(batch, logits) -> (loss, dlogits)`` adds a term to the objective.
        """
        z = self.logits(batch.inputs)
        loss, dz = _ce_dlogits(z, batch, extra)
        grads = {"w": dz.T @ batch.inputs}
        if "b" in self.params:
            grads["b"] = dz.sum(axis=0)
        for g in grads.values():
            g[: self.frozen_rows] = 0.0
        return loss, grads


def head_logits(head: SoftmaxHead, v):
    return head.logits(v)


def ce_grad_head(head: SoftmaxHead, batch: Batch):
    return head.loss_and_grad(batch)[1]


class TwoLayerNet(_Classifier):
    """FC1 -> ReLU -> FC2.

    ``base_hidden``/``base_out`` mark the pre-expansion block: output rows
    ``< base_out`` are computed from hidden units ``< base_hidden`` only.
    Frozen masks flag per-entry immutability.
    """

    def __init__(self, labels, fc1, fc2, b1=None, b2=None, frozen=None, base_hidden=None, base_out=None):
        self.labels = list(labels)
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("duplicate labels")
        fc1 = np.array(fc1, dtype=np.float64)
        fc2 = np.array(fc2, dtype=np.float64)
        if fc1.ndim != 2 or fc2.ndim != 2 or fc2.shape[1] != fc1.shape[0] or fc2.shape[0] != len(self.labels):
            raise ValueError("layer shapes do not chain")
        self.params = {"fc1": fc1, "fc2": fc2}
        if b1 is not None:
            self.params["b1"] = np.array(b1, dtype=np.float64).reshape(fc1.shape[0])
        if b2 is not None:
            self.params["b2"] = np.array(b2, dtype=np.float64).reshape(fc2.shape[0])
        frozen = dict(frozen or {})
        self.frozen = {k: np.array(frozen.get(k, np.zeros(v.shape, bool)), dtype=bool) for k, v in self.params.items()}
        for k, v in self.params.items():
            if self.frozen[k].shape != v.shape:
                raise ValueError(f"frozen mask for {k} has wrong shape")
        self.base_hidden = fc1.shape[0] if base_hidden is None else int(base_hidden)
        self.base_out = fc2.shape[0] if base_out is None else int(base_out)

    @classmethod
    def init(cls, labels, in_dims, hidden, rng, bias=False):
        c = len(labels)
        fc1 = glorot(rng, hidden, in_dims, in_dims, hidden)
        fc2 = glorot(rng, c, hidden, hidden, c)
        return cls(labels, fc1, fc2, np.zeros(hidden) if bias else None, np.zeros(c) if bias else None)

    @property
    def in_dims(self):
        return self.params["fc1"].shape[1]

    @property
    def hidden_dims(self):
        return self.params["fc1"].shape[0]

    def trainable(self):
        return {k: ~m for k, m in self.frozen.items()}

    def n_trainable(self):
        return int(sum(m.sum() for m in self.trainable().values()))

    def forward(self, X):
        """Return (pre-activation, hidden, logits) for a batch."""
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.in_dims:
            raise ValueError(f"dimension mismatch: got {X.shape[-1]}, net expects {self.in_dims}")
        X = np.atleast_2d(X)
        p = self.params
        fc1, b1, fc2, b2 = p["fc1"], p.get("b1"), p["fc2"], p.get("b2")
        H0, C0 = self.base_hidden, self.base_out
        if H0 < fc1.shape[0]:
            # new hidden units feed only the novel rows of fc2
            pre_base = X @ fc1[:H0].T
            pre_new = X @ fc1[H0:].T
            if b1 is not None:
                pre_base = pre_base + b1[:H0]
                pre_new = pre_new + b1[H0:]
            pre = np.concatenate([pre_base, pre_new], axis=1)
            hidden = np.maximum(pre, 0.0)
            base = np.maximum(pre_base, 0.0) @ np.ascontiguousarray(fc2[:C0, :H0]).T
            if b2 is not None:
                base = base + b2[:C0]
            if C0 < fc2.shape[0]:
                novel = hidden @ fc2[C0:].T
                if b2 is not None:
                    novel = novel + b2[C0:]
                base = np.concatenate([base, novel], axis=1)
            return pre, hidden, base
        pre = X @ fc1.T
        if b1 is not None:
            pre = pre + b1
        hidden = np.maximum(pre, 0.0)
        return pre, hidden, _affine_blocks(hidden, fc2, b2, C0)

    def logits(self, X):
        single = np.ndim(X) == 1
        z = self.forward(X)[2]
        return z[0] if single else z

    def backward(self, X, pre, hidden, dlogits):
        p = self.params
        grads = {"fc2": dlogits.T @ hidden}
        if "b2" in p:
            grads["b2"] = dlogits.sum(axis=0)
        dpre = (dlogits @ p["fc2"]) * (pre > 0)
        grads["fc1"] = dpre.T @ X
        if "b1" in p:
            grads["b1"] = dpre.sum(axis=0)
        for k, g in grads.items():
            g[self.frozen[k]] = 0.0
        return grads

    def loss_and_grad(self, batch, extra=None):
        pre, hidden, z = self.forward(batch.inputs)
        loss, dz = _ce_dlogits(z, batch, extra)
        return loss, self.backward(batch.inputs, pre, hidden, dz)


def two_layer_forward(net: TwoLayerNet, v):
    pre, hidden, logits = net.forward(v)
    if np.ndim(v) == 1:
        return hidden[0], logits[0]
    return hidden, logits


def ce_grad_two_layer(net: TwoLayerNet, batch: Batch):
    return net.loss_and_grad(batch)[1]


def fit(model, batches, cfg, *, rng=None, masked=False, verbose=False, extra=None):
    """Run momentum SGD over an iterable of Batch objects; updates ``model`` in place."""
    state = OptimizerState.zeros_like(model.params)
    trainable = model.trainable()
    log = TrainLog()
    for it, batch in enumerate(batches):
        loss, grads = model.loss_and_grad(batch, extra)
        log.record(it, loss, verbose)
        sgd_step(model.params, state, grads, cfg, rng, trainable=trainable, masked=masked)
    return log


def shuffled_batches(X, y, batch_size, iters, rng):
    """Mini-batches from repeated shuffled passes over (X, y)."""
    n = len(y)
    done = 0
    while done < iters:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            if done >= iters:
                return
            idx = order[start:start + batch_size]
            yield Batch(X[idx], y[idx])
            done += 1


def _check_train_labels(features, labels):
    labels = list(features.label_set if labels is None else labels)
    if len(labels) < 2:
        raise ValueError("training needs at least two labels")
    present = set(features.labels)
    missing = [lab for lab in labels if lab not in present]
    if missing:
        raise ValueError(f"no samples for label(s) {missing}")
    return labels


def _training_arrays(features, labels):
    keep = np.isin(features.label_array(), labels)
    pos = {lab: i for i, lab in enumerate(labels)}
    X = features.vectors[keep]
    y = np.array([pos[lab] for lab in np.asarray(features.labels, dtype=object)[keep]], dtype=np.int64)
    return X, y


def train_base(features: FeatureSet, hidden=32, labels=None, cfg=None, *, verbose=False) -> TwoLayerNet:
    """Train a TwoLayerNet from random init on ``features`` (optionally a label subset)."""
    cfg = base_train_config() if cfg is None else cfg
    labels = _check_train_labels(features, labels)
    X, y = _training_arrays(features, labels)
    rng = np.random.default_rng(cfg.seed)
    net = TwoLayerNet.init(labels, features.dims, hidden, rng)
    batches = shuffled_batches(X, y, cfg.batch_per_class * len(labels), cfg.iters, rng)
    fit(net, batches, cfg, verbose=verbose)
    return net


def train_head(features: FeatureSet, labels=None, cfg=None, *, verbose=False) -> SoftmaxHead:
    """Softmax regression on ``features`` with the same optimizer as train_base."""
    cfg = base_train_config() if cfg is None else cfg
    labels = _check_train_labels(features, labels)
    X, y = _training_arrays(features, labels)
    rng = np.random.default_rng(cfg.seed)
    head = SoftmaxHead.init(labels, features.dims, rng)
    batches = shuffled_batches(X, y, cfg.batch_per_class * len(labels), cfg.iters, rng)
    fit(head, batches, cfg, verbose=verbose)
    return head


# -- model files ---------------------------------------------------------------

def model_to_dict(model):
    if isinstance(model, SoftmaxHead):
        return {
            "format": "lsne-model",
            "version": 1,
            "kind": "head",
            "labels": model.labels,
            "dims": {"in": model.in_dims, "out": len(model.labels)},
            "weights": {"w": model.weights, "b": model.bias},
            "frozen": {"rows": model.frozen_rows},
        }
    if isinstance(model, TwoLayerNet):
        p = model.params
        return {
            "format": "lsne-model",
            "version": 1,
            "kind": "two-layer",
            "labels": model.labels,
            "dims": {
                "in": model.in_dims,
                "hidden": model.hidden_dims,
                "out": len(model.labels),
                "base_hidden": model.base_hidden,
                "base_out": model.base_out,
            },
            "weights": {"fc1": p["fc1"], "b1": p.get("b1"), "fc2": p["fc2"], "b2": p.get("b2")},
            "frozen": {k: m.astype(int) for k, m in model.frozen.items()},
        }
    raise TypeError(f"cannot serialize {type(model).__name__}")


def format_model(model) -> str:
    return dump_json(model_to_dict(model)) + "\n"


def save_model(model, path):
    write_text(path, format_model(model))


def model_from_dict(doc, where="model"):
    try:
        labels = [str(lab) for lab in doc["labels"]]
        dims, weights, frozen = doc["dims"], doc["weights"], doc["frozen"]
        c = len(labels)
        if doc["kind"] == "head":
            n = int(dims["in"])
            w = as_float_array(weights["w"], (c, n), f"{where}: w")
            b = None if weights.get("b") is None else as_float_array(weights["b"], (c,), f"{where}: b")
            return SoftmaxHead(labels, w, b, frozen_rows=int(frozen["rows"]))
        if doc["kind"] == "two-layer":
            n, h = int(dims["in"]), int(dims["hidden"])
            shapes = {"fc1": (h, n), "b1": (h,), "fc2": (c, h), "b2": (c,)}
            arrs = {
                k: as_float_array(weights[k], s, f"{where}: {k}")
                for k, s in shapes.items()
                if weights.get(k) is not None
            }
            masks = {}
            for k in arrs:
                m = np.array(frozen.get(k, np.zeros(shapes[k], int)))
                if m.shape != shapes[k] or not np.isin(m, (0, 1)).all():
                    raise FormatError(f"{where}: frozen mask {k} malformed")
                masks[k] = m.astype(bool)
            return TwoLayerNet(labels, arrs["fc1"], arrs["fc2"], arrs.get("b1"), arrs.get("b2"), masks,
                               dims.get("base_hidden"), dims.get("base_out"))
        raise FormatError(f"{where}: unknown model kind {doc['kind']!r}")
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{where}: missing or malformed field ({exc})") from None
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{where}: {exc}") from None


def load_model(path):
    return model_from_dict(load_json(path, "lsne-model"), where=str(path))
