"""Per-class diagonal-covariance Gaussian mixtures used as a compact memory of
base-class features."""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._textio import FormatError, as_float_array, dump_json, load_json, write_text

LOG_2PI = math.log(2.0 * math.pi)
_U64 = (1 << 64) - 1


@dataclass(frozen=True)
class EmConfig:
    mixtures: int = 20
    max_iters: int = 200
    rel_tol: float = 1e-6
    variance_floor: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.mixtures < 1:
            raise ValueError("mixtures must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        if not self.variance_floor > 0:
            raise ValueError("variance_floor must be positive")


@dataclass(frozen=True, eq=False)
class DiagGmm:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    # set when the data had fewer points than requested mixtures
    degraded: bool = False
    log_likelihoods: tuple = field(default=(), repr=False)

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        mu = np.atleast_2d(np.array(self.means, dtype=np.float64))
        var = np.atleast_2d(np.array(self.variances, dtype=np.float64))
        if mu.shape != var.shape or mu.shape[0] != w.shape[0] or w.size == 0:
            raise ValueError("inconsistent mixture shapes")
        for arr in (w, mu, var):
            if not np.all(np.isfinite(arr)):
                raise ValueError("mixture parameters must be finite")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if np.any(var <= 0):
            raise ValueError("variances must be positive")
        for arr in (w, mu, var):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def dims(self):
        return self.means.shape[1]

    @property
    def mixtures(self):
        return self.weights.shape[0]

    def __eq__(self, other):
        if not isinstance(other, DiagGmm):
            return NotImplemented
        return all(
            np.array_equal(a, b)
            for a, b in ((self.weights, other.weights), (self.means, other.means), (self.variances, other.variances))
        )

    __hash__ = None


def _component_log_densities(X, means, variances):
    """(n, M) array of log N(x_n | mu_m, diag var_m)."""
    diff = X[:, None, :] - means[None, :, :]
    quad = np.einsum("nmd,md->nm", diff * diff, 1.0 / variances)
    log_det = np.sum(np.log(variances), axis=1)
    return -0.5 * (X.shape[1] * LOG_2PI + log_det[None, :] + quad)


def _component_log_densities_fast(X, means, variances):
    """Same as _component_log_densities via matrix products; for EM inner loops."""
    prec = 1.0 / variances
    quad = (X * X) @ prec.T - 2.0 * (X @ (means * prec).T) + np.sum(means * means * prec, axis=1)[None, :]
    np.maximum(quad, 0.0, out=quad)
    log_det = np.sum(np.log(variances), axis=1)
    return -0.5 * (X.shape[1] * LOG_2PI + log_det[None, :] + quad)


def _logsumexp(a, axis):
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    out = np.log(np.sum(np.exp(a - amax), axis=axis, keepdims=True)) + amax
    return np.squeeze(out, axis=axis)


def _log_weights(weights):
    with np.errstate(divide="ignore"):
        return np.log(weights)


def log_pdf(model: DiagGmm, v):
    """Mixture log density at ``v`` (a vector, or an ``(n, N)`` array)."""
    X = np.asarray(v, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != model.dims:
        raise ValueError(f"dimension mismatch: got {X.shape[1]}, model has {model.dims}")
    comp = _component_log_densities(X, model.means, model.variances) + _log_weights(model.weights)[None, :]
    out = _logsumexp(comp, axis=1)
    return float(out[0]) if single else out


def mixture_mean(model: DiagGmm):
    return model.weights @ model.means


def mixture_variance(model: DiagGmm):
    """Per-coordinate variance of the mixture (law of total variance)."""
    mean = mixture_mean(model)
    second = model.weights @ (model.variances + model.means**2)
    return second - mean**2


def sample(model: DiagGmm, n, rng):
    if n < 0:
        raise ValueError("sample count must be non-negative")
    if n == 0:
        return np.empty((0, model.dims))
    comps = rng.choice(model.mixtures, size=n, p=model.weights)
    noise = rng.standard_normal((n, model.dims))
    return model.means[comps] + np.sqrt(model.variances[comps]) * noise


def _kmeanspp(X, m, rng):
    n = X.shape[0]
    centers = [int(rng.integers(n))]
    d2 = np.sum((X - X[centers[0]]) ** 2, axis=1)
    for _ in range(1, m):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centers.append(idx)
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return X[centers].copy()


def _initial_params(X, m, floor, rng):
    centers = _kmeanspp(X, m, rng)
    d2 = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    assign = np.argmin(d2, axis=1)
    overall_var = np.maximum(X.var(axis=0), floor)
    counts = np.zeros(m)
    means = centers.copy()
    variances = np.tile(overall_var, (m, 1))
    for j in range(m):
        members = X[assign == j]
        if len(members):
            counts[j] = len(members)
            means[j] = members.mean(axis=0)
            variances[j] = np.maximum(members.var(axis=0), floor)
        else:
            # empty cell: keep the seed point with a unit pseudo-count
            counts[j] = 1.0
    return counts / counts.sum(), means, variances


def _m_step(X, resp, prev_means, prev_vars, floor):
    nk = resp.sum(axis=0)
    weights = nk / nk.sum()
    alive = nk > 1e-300
    means = prev_means.copy()
    variances = prev_vars.copy()
    for j in np.flatnonzero(alive):
        r = resp[:, j]
        means[j] = (r @ X) / nk[j]
        diff = X - means[j]
        variances[j] = (r @ (diff * diff)) / nk[j]
    np.maximum(variances, floor, out=variances)
    return weights, means, variances


def fit_em(data, cfg: EmConfig = EmConfig()) -> DiagGmm:
    """Maximum-likelihood diagonal GMM fitted by EM.

    Initialization is k-means++ seeding followed by one hard assignment pass.
    Iteration stops after ``cfg.max_iters`` M-steps or once the mean
    log-likelihood improves by less than ``rel_tol`` (relative). When there
    are fewer points than mixtures, the mixture count shrinks to the number
    of points and the returned model has ``degraded=True``.
    """
    X = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if X.shape[0] == 0 or X.size == 0:
        raise ValueError("cannot fit a mixture to empty data")
    if not np.all(np.isfinite(X)):
        raise ValueError("data must be finite")
    n = X.shape[0]
    m = cfg.mixtures
    degraded = False
    if n < m:
        warnings.warn(f"only {n} points for {m} mixtures; using {n}", RuntimeWarning, stacklevel=2)
        m, degraded = n, True
    floor = cfg.variance_floor
    rng = np.random.default_rng(cfg.seed & _U64)

    weights, means, variances = _initial_params(X, m, floor, rng)
    history = []
    for _ in range(cfg.max_iters):
        comp = _component_log_densities_fast(X, means, variances) + _log_weights(weights)[None, :]
        norm = _logsumexp(comp, axis=1)
        ll = float(norm.mean())
        if history and ll - history[-1] < cfg.rel_tol * abs(history[-1]):
            history.append(ll)
            break
        history.append(ll)
        resp = np.exp(comp - norm[:, None])
        weights, means, variances = _m_step(X, resp, means, variances, floor)
    else:
        comp = _component_log_densities_fast(X, means, variances) + _log_weights(weights)[None, :]
        history.append(float(_logsumexp(comp, axis=1).mean()))
    return DiagGmm(weights, means, variances, degraded=degraded, log_likelihoods=tuple(history))


def label_seed(seed, label):
    """Per-class seed: ``seed`` XOR a stable 64-bit hash of the label."""
    h = int.from_bytes(hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest(), "little")
    return (int(seed) & _U64) ^ h


@dataclass(frozen=True, eq=False)
class GmmBank:
    dims: int
    entries: tuple  # ((label, DiagGmm), ...)

    def __post_init__(self):
        entries = tuple((str(lab), model) for lab, model in self.entries)
        labels = [lab for lab, _ in entries]
        if len(set(labels)) != len(labels):
            raise ValueError("duplicate labels in bank")
        for lab, model in entries:
            if model.dims != self.dims:
                raise ValueError(f"class {lab!r} has dims {model.dims}, bank has {self.dims}")
        object.__setattr__(self, "entries", entries)

    @property
    def labels(self):
        return [lab for lab, _ in self.entries]

    def __getitem__(self, label):
        for lab, model in self.entries:
            if lab == label:
                return model
        raise KeyError(label)

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        if not isinstance(other, GmmBank):
            return NotImplemented
        return self.dims == other.dims and self.entries == other.entries

    __hash__ = None

    def mean_variance(self):
        """Average of every stored variance entry; sets the jitter scale."""
        return float(np.mean(np.concatenate([m.variances.ravel() for _, m in self.entries])))

    def scalar_count(self):
        return sum(m.weights.size + m.means.size + m.variances.size for _, m in self.entries)


def fit_bank(sets, cfg: EmConfig = EmConfig()) -> GmmBank:
    """Fit one mixture per label; ``sets`` maps label -> (n, N) array."""
    entries = []
    dims = None
    for label, data in sets.items():
        data = np.atleast_2d(np.asarray(data, dtype=np.float64))
        if data.shape[0] == 0:
            raise ValueError(f"class {label!r} has no samples")
        dims = data.shape[1] if dims is None else dims
        class_cfg = EmConfig(cfg.mixtures, cfg.max_iters, cfg.rel_tol, cfg.variance_floor, label_seed(cfg.seed, label))
        entries.append((label, fit_em(data, class_cfg)))
    if dims is None:
        raise ValueError("no classes supplied")
    return GmmBank(dims, tuple(entries))


def bank_to_dict(bank: GmmBank):
    return {
        "format": "lsne-gmm-bank",
        "version": 1,
        "dims": bank.dims,
        "classes": [
            {"label": lab, "weights": m.weights, "means": m.means, "variances": m.variances}
            for lab, m in bank.entries
        ],
    }


def format_bank(bank: GmmBank) -> str:
    return dump_json(bank_to_dict(bank)) + "\n"


def save_bank(bank: GmmBank, path):
    write_text(path, format_bank(bank))


def bank_from_dict(doc, where="bank"):
    try:
        dims = int(doc["dims"])
        entries = []
        for i, cls in enumerate(doc["classes"]):
            w = np.asarray(cls["weights"], dtype=np.float64)
            m = w.shape[0] if w.ndim == 1 else -1
            what = f"{where}: class {i}"
            weights = as_float_array(cls["weights"], (m,), what + " weights")
            means = as_float_array(cls["means"], (m, dims), what + " means")
            variances = as_float_array(cls["variances"], (m, dims), what + " variances")
            entries.append((cls["label"], DiagGmm(weights, means, variances)))
        return GmmBank(dims, tuple(entries))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{where}: missing or malformed field ({exc})") from None
    except ValueError as exc:
        raise FormatError(f"{where}: {exc}") from None


def load_bank(path) -> GmmBank:
    return bank_from_dict(load_json(path, "lsne-gmm-bank"), where=str(path))
