"""Label propagation: PCA-reduced dense features plus a per-pixel classifier.

Pixels that the corrected 2D labels leave UNKNOWN are filled with the
classifier's argmax; labelled pixels are never overwritten.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .scene_io import UNKNOWN, ArityError, FormatError, Frame, LabelImage

PCA_DIM = 64
PE_BANDS = 4
PE_DIM = 6 * PE_BANDS

_PCA_MAGIC = b"PPCA"
_PCA_VERSION = 1


class RankDeficientWarning(UserWarning):
    pass


@dataclass
class PcaModel:
    mean: np.ndarray  # (F,)
    basis: np.ndarray  # (k, F), orthonormal rows
    explained: np.ndarray  # (k,) variance along each row

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.shape[-1] != self.mean.shape[0]:
            raise ArityError(f"feature dim {x.shape[-1]} != PCA input dim {self.mean.shape[0]}")
        return (x.astype(np.float64) - self.mean) @ self.basis.T


def _orient(v: np.ndarray) -> np.ndarray:
    return v if v[np.argmax(np.abs(v))] >= 0 else -v


def _complement(basis: list[np.ndarray], dim: int) -> np.ndarray:
    """Next unit vector orthogonal to ``basis``, from the standard axes in order."""
    for i in range(dim):
        v = np.zeros(dim)
        v[i] = 1.0
        for b in basis:
            v -= (b @ v) * b
        n = np.linalg.norm(v)
        if n > 1e-6:
            v /= n
            for b in basis:  # second pass for orthogonality to rounding
                v -= (b @ v) * b
            return v / np.linalg.norm(v)
    raise RuntimeError("no orthogonal complement left")


def fit_pca(
    samples: np.ndarray,
    n_components: int = PCA_DIM,
    tol: float = 1e-7,
    max_iter: int = 1000,
    seed: int = 0,
) -> PcaModel:
    """Top principal directions by deflated power iteration."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("samples must be (n, F)")
    n, f = x.shape
    if n < n_components or f < n_components:
        raise ValueError(f"need at least {n_components} samples of dimension >= {n_components}, got {x.shape}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / n
    scale = max(float(np.trace(cov)), np.finfo(float).tiny)
    rng = np.random.default_rng(seed)

    basis: list[np.ndarray] = []
    var: list[float] = []
    work = cov.copy()
    for _ in range(n_components):
        v = rng.standard_normal(f)
        for b in basis:
            v -= (b @ v) * b
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = work @ v
            for b in basis:  # keep the iterate inside the deflated subspace
                w -= (b @ w) * b
            nw = np.linalg.norm(w)
            if nw <= 1e-12 * scale:
                lam = 0.0
                break
            w /= nw
            done = min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol
            v = w
            lam = nw
            if done:
                break
        if lam <= 1e-12 * scale:
            break
        v = _orient(v)
        lam = float(v @ cov @ v)
        basis.append(v)
        var.append(lam)
        work -= lam * np.outer(v, v)

    if len(basis) < n_components:
        warnings.warn(
            f"feature covariance has rank {len(basis)} < {n_components}; padding with zero-variance directions",
            RankDeficientWarning,
            stacklevel=2,
        )
        while len(basis) < n_components:
            basis.append(_orient(_complement(basis, f)))
            var.append(0.0)
    return PcaModel(mean, np.array(basis), np.array(var))


def positional_encoding(points: np.ndarray, bands: int = PE_BANDS) -> np.ndarray:
    """sin/cos of each coordinate at frequencies pi * 2^k, k < bands; (N, 6 * bands)."""
    p = np.asarray(points, dtype=np.float64)
    freq = np.pi * 2.0 ** np.arange(bands)
    ang = p[:, :, None] * freq  # (N, 3, bands)
    return np.concatenate([np.sin(ang).reshape(len(p), -1), np.cos(ang).reshape(len(p), -1)], axis=1)


def backproject(frame: Frame, depth: np.ndarray | None = None) -> np.ndarray:
    """World point per pixel, (H*W, 3); pixels without depth map to the origin."""
    d = frame.depth if depth is None else depth
    h, w = frame.height, frame.width
    col, row = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    z = np.asarray(d, dtype=np.float64).reshape(-1)
    xc = (col.reshape(-1) - frame.cx) / frame.fx * z
    yc = (row.reshape(-1) - frame.cy) / frame.fy * z
    pc = np.stack([xc, yc, z], axis=1)
    return (pc - frame.translation) @ frame.rotation


def pixel_inputs(frame: Frame, pca: PcaModel, use_pe: bool = True) -> np.ndarray:
    """Classifier input per pixel: reduced feature, plus position encoding when depth exists."""
    if frame.features is None:
        raise ValueError(f"frame {frame.frame_id} has no features")
    feats = pca.transform(np.asarray(frame.features).reshape(-1, frame.features.shape[-1]))
    if not use_pe:
        return feats
    if frame.depth is None:
        return np.concatenate([feats, np.zeros((len(feats), PE_DIM))], axis=1)
    return np.concatenate([feats, positional_encoding(backproject(frame))], axis=1)


# --------------------------------------------------------------------------
# Classifier


@dataclass
class PointClassifier:
    class_ids: np.ndarray  # (K,) class id per output
    layers: list[tuple[np.ndarray, np.ndarray]]  # [(W (out, in), b (out,))], ReLU between
    mu: np.ndarray  # input standardisation
    sigma: np.ndarray
    active: np.ndarray  # (K,) bool, classes that had training pixels
    history: list[float] = field(default_factory=list)  # training loss after each epoch

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ArityError(f"classifier expects {self.in_dim} inputs, got {x.shape[-1]}")
        h = (x - self.mu) / self.sigma
        for i, (w, b) in enumerate(self.layers):
            h = h @ w.T + b
            if i < len(self.layers) - 1:
                h = np.maximum(h, 0.0)
        return np.where(self.active, h, -np.inf)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        z = self.logits(x)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(class id, max softmax probability) per row."""
        p = self.predict_proba(x)
        k = np.argmax(p, axis=1)
        return self.class_ids[k], p[np.arange(len(p)), k]


def _forward(layers, x):
    acts = [x]
    h = x
    for i, (w, b) in enumerate(layers):
        h = h @ w.T + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def loss_and_grad(layers, x: np.ndarray, y: np.ndarray, active: np.ndarray | None = None):
    """Mean cross-entropy over rows and its gradient for every (W, b).

    ``y`` holds output indices. Inactive outputs are excluded from the softmax.
    """
    acts = _forward(layers, x)
    z = acts[-1]
    if active is not None:
        z = np.where(active, z, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(x)
    loss = -float(logp[np.arange(n), y].mean())
    d = np.exp(logp)
    d[np.arange(n), y] -= 1.0
    d /= n
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads[i] = (d.T @ acts[i], d.sum(axis=0))
        if i > 0:
            d = (d @ w) * (acts[i] > 0)
    return loss, grads


def train_classifier(
    x: np.ndarray,
    labels: np.ndarray,
    class_ids,
    epochs: int = 50,
    lr: float = 0.1,
    batch: int = 4096,
    depth: int = 0,
    hidden: int = 64,
    seed: int = 0,
) -> PointClassifier:
    """Mini-batch gradient descent on masked cross-entropy.

    ``labels`` are class ids per row; UNKNOWN rows are ignored.
    """
    class_ids = np.asarray(sorted(int(c) for c in class_ids if c != UNKNOWN), dtype=np.int64)
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    keep = labels != UNKNOWN
    x, labels = x[keep], labels[keep]
    lut = {c: i for i, c in enumerate(class_ids.tolist())}
    known = np.isin(labels, class_ids)
    x, labels = x[known], labels[known]
    y = np.array([lut[int(c)] for c in labels], dtype=np.int64) if len(labels) else np.zeros(0, np.int64)
    counts = np.bincount(y, minlength=len(class_ids))
    active = counts > 0
    for c in class_ids[~active]:
        warnings.warn(f"class {int(c)} has no labelled pixels; excluded from training", stacklevel=2)
    if not active.any():
        raise ValueError("no labelled pixels to train on")

    mu = x.mean(axis=0)
    sigma = x.std(axis=0)
    sigma = np.where(sigma > 1e-12, sigma, 1.0)
    xs = (x - mu) / sigma

    rng = np.random.default_rng(seed)
    dims = [x.shape[1]] + [hidden] * depth + [len(class_ids)]
    layers = []
    for i in range(len(dims) - 1):
        if i < len(dims) - 2:
            w = rng.standard_normal((dims[i + 1], dims[i])) * np.sqrt(2.0 / dims[i])
        else:
            w = np.zeros((dims[i + 1], dims[i]))
        layers.append((w, np.zeros(dims[i + 1])))

    history = []
    n = len(xs)
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch):
            idx = order[s : s + batch]
            _, grads = loss_and_grad(layers, xs[idx], y[idx], active)
            layers = [(w - lr * gw, b - lr * gb) for (w, b), (gw, gb) in zip(layers, grads)]
        history.append(loss_and_grad(layers, xs, y, active)[0])
    return PointClassifier(class_ids, layers, mu, sigma, active, history)


def propagate(
    classifier: PointClassifier,
    x: np.ndarray,
    labels: LabelImage,
) -> tuple[LabelImage, np.ndarray]:
    """Fill UNKNOWN pixels with the classifier's argmax; returns labels and confidence."""
    h, w = labels.shape
    if len(x) != h * w:
        raise ArityError(f"{len(x)} feature rows for a {w}x{h} label image")
    pred, conf = classifier.predict(x)
    cls = labels.class_id.reshape(-1).copy()
    conf = conf.astype(np.float32)
    unknown = cls == UNKNOWN
    cls[unknown] = pred[unknown]
    conf[~unknown] = 1.0
    score = None if labels.score is None else labels.score.copy()
    return LabelImage(labels.instance_id.copy(), cls.reshape(h, w).astype(np.uint32), score), conf.reshape(h, w)


def sample_rows(n_total: int, n_max: int, seed: int) -> np.ndarray:
    """Sorted deterministic subset of row indices."""
    if n_total <= n_max:
        return np.arange(n_total)
    return np.sort(np.random.default_rng(seed).choice(n_total, n_max, replace=False))


def propagate_frames(
    frames: list[Frame],
    labels: dict[str, LabelImage],
    pca_dim: int = PCA_DIM,
    pca_samples: int = 50_000,
    train_pixels: int = 200_000,
    use_pe: bool = True,
    epochs: int = 50,
    lr: float = 0.1,
    batch: int = 4096,
    depth: int = 0,
    seed: int = 0,
    features: Callable[[Frame], np.ndarray] | None = None,
) -> tuple[dict[str, LabelImage], dict[str, np.ndarray], PcaModel, PointClassifier]:
    """Fit PCA and the classifier on all frames, then fill every frame.

    ``features(frame)`` supplies the (H, W, F) feature map when frames do not
    carry one, so large feature sets can be streamed from disk.
    """
    get = features or (lambda f: f.features)

    def with_feats(f: Frame) -> Frame:
        return f if f.features is not None else f.with_(features=get(f))

    per = max(1, pca_samples // max(len(frames), 1))
    picks = []
    for k, f in enumerate(frames):
        fe = np.asarray(get(f))
        fe = fe.reshape(-1, fe.shape[-1])
        picks.append(fe[sample_rows(len(fe), per, seed + k)])
    pca = fit_pca(np.concatenate(picks), pca_dim, seed=seed)

    per = max(1, train_pixels // max(len(frames), 1))
    xs, ys, class_ids = [], [], set()
    for k, f in enumerate(frames):
        x = pixel_inputs(with_feats(f), pca, use_pe)
        lab = labels[f.frame_id].class_id.reshape(-1)
        rows = np.flatnonzero(lab != UNKNOWN)
        rows = rows[sample_rows(len(rows), per, seed + 7919 * (k + 1))]
        xs.append(x[rows])
        ys.append(lab[rows])
        class_ids.update(np.unique(lab[rows]).tolist())
    clf = train_classifier(np.concatenate(xs), np.concatenate(ys), class_ids, epochs, lr, batch, depth, seed=seed)
    out, conf = {}, {}
    for f in frames:
        out[f.frame_id], conf[f.frame_id] = propagate(clf, pixel_inputs(with_feats(f), pca, use_pe), labels[f.frame_id])
    return out, conf, pca, clf


def save_pca(path, pca: PcaModel) -> None:
    k, f = pca.basis.shape
    body = pca.mean.astype("<f8").tobytes() + pca.basis.astype("<f8").tobytes() + pca.explained.astype("<f8").tobytes()
    Path(path).write_bytes(_PCA_MAGIC + struct.pack("<III", _PCA_VERSION, k, f) + body)


def load_pca(path) -> PcaModel:
    data = Path(path).read_bytes()
    if data[:4] != _PCA_MAGIC:
        raise FormatError(f"{path}: not a PCA file")
    version, k, f = struct.unpack_from("<III", data, 4)
    if version != _PCA_VERSION:
        raise FormatError(f"{path}: PCA version {version}, expected {_PCA_VERSION}")
    if len(data) != 16 + 8 * (f + k * f + k):
        raise FormatError(f"{path}: payload does not match {k}x{f}")
    arr = np.frombuffer(data, dtype="<f8", offset=16)
    return PcaModel(arr[:f].copy(), arr[f : f + k * f].reshape(k, f).copy(), arr[f + k * f :].copy())
