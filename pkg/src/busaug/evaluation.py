"""Evaluation: feature extractors, FID, the downstream classifier, metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import LABELS, Manifest
from .diffusion import TrainConfig
from .tensorfile import write_tensors, read_tensors
from .util import image_key


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Feature extractors


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Deterministic bilinear resample of a square grayscale image."""
    h, w = image.shape
    if (h, w) == (size, size):
        return image
    ys = (np.arange(size) + 0.5) * h / size - 0.5
    xs = (np.arange(size) + 0.5) * w / size - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    a = image[np.ix_(y0, x0)]
    b = image[np.ix_(y0, x1)]
    c = image[np.ix_(y1, x0)]
    d = image[np.ix_(y1, x1)]
    return (a * (1 - wy) * (1 - wx) + b * (1 - wy) * wx
            + c * wy * (1 - wx) + d * wy * wx)


class RandomConvFeatures:
    """Frozen seeded random convolutional feature extractor (the default).

    Three strided conv+SiLU stages followed by per-channel mean and standard
    deviation pooling. No pretrained weights; fixed-seed init and NumPy's
    stable reduction order make it deterministic across platforms, so FID
    comparisons within a run are meaningful.
    """

    deterministic = True

    def __init__(self, feature_dim: int = 64, input_size: int = 64, seed: int = 977):
        if feature_dim < 2 or feature_dim % 2:
            raise EvalError("feature_dim must be an even integer >= 2")
        self.name = f"random-conv-{feature_dim}d-s{seed}"
        self.feature_dim = feature_dim
        self.input_size = input_size
        c = feature_dim // 2
        store = nn.ParamStore(dtype="float64")
        rng = np.random.default_rng(seed)
        self._convs = [
            nn.Conv2d(store, "c1", 1, max(c // 4, 4), rng, stride=2),
            nn.Conv2d(store, "c2", max(c // 4, 4), max(c // 2, 4), rng, stride=2),
            nn.Conv2d(store, "c3", max(c // 2, 4), c, rng, stride=2),
        ]
        self._act = nn.SiLU("act")

    def extract(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 2:
            images = images[None]
        x = np.stack([resize_bilinear(im, self.input_size) for im in images])[:, None]
        for conv in self._convs:
            x = self._act.forward(conv.forward(x))
        mean = x.mean(axis=(2, 3))
        std = np.sqrt(x.var(axis=(2, 3)) + 1e-12)
        return np.concatenate([mean, std], axis=1)


class ClassifierFeatures:
    """Penultimate pooled features of a trained classifier."""

    deterministic = True

    def __init__(self, classifier: "ClassifierModel"):
        self.classifier = classifier
        self.name = "classifier-penultimate"
        self.feature_dim = classifier.feature_dim
        self.input_size = classifier.arch.image_size

    def extract(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 2:
            images = images[None]
        x = np.stack([resize_bilinear(im, self.input_size) for im in images])
        return self.classifier.features(x).astype(np.float64)


FEATURE_FILE_FORMAT = "feature-file"


class PrecomputedFeatures:
    """Features loaded from a file, keyed by image content identity.

    Admits externally produced features (e.g. true Inception-v3 vectors):
    the key for an image is ``busaug.util.image_key`` of its 8-bit pixels.
    """

    deterministic = True

    def __init__(self, path):
        meta, tensors = read_tensors(path, expect_kind=FEATURE_FILE_FORMAT)
        self.name = meta["extractor_name"]
        self.feature_dim = int(meta["feature_dim"])
        self.path = str(path)
        self._table = tensors

    def extract(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 2:
            images = images[None]
        rows = []
        for im in images:
            key = image_key(im)
            if key not in self._table:
                raise EvalError(f"feature file {self.path} is missing image key {key}")
            rows.append(self._table[key])
        return np.stack(rows)


def write_feature_file(path, extractor_name: str, features_by_key: dict[str, np.ndarray]) -> None:
    dims = {v.shape[-1] for v in features_by_key.values()}
    if len(dims) != 1:
        raise EvalError(f"inconsistent feature dimensions: {sorted(dims)}")
    meta = {"extractor_name": extractor_name, "feature_dim": int(dims.pop())}
    write_tensors(path, FEATURE_FILE_FORMAT, meta,
                  {k: np.asarray(v, dtype=np.float64) for k, v in features_by_key.items()})


def dump_features(path, images: np.ndarray, extractor) -> None:
    """Extract and store features keyed by image identity."""
    feats = extract_features(images, extractor)
    keys = [image_key(im) for im in np.asarray(images)]
    write_feature_file(path, extractor.name, dict(zip(keys, feats)))


def extract_features(images, extractor) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    if images.shape[0] < 1:
        raise EvalError("need at least one image")
    feats = extractor.extract(images)
    return np.asarray(feats, dtype=np.float64)


# ---------------------------------------------------------------------------
# FID


@dataclass
class FIDStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int


def fid_stats(features: np.ndarray) -> FIDStats:
    """Gaussian fit of a feature matrix: column means and unbiased covariance."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise EvalError(f"need an (n >= 2, d) feature matrix, got shape {features.shape}")
    mu = features.mean(axis=0)
    centered = features - mu
    sigma = centered.T @ centered / (features.shape[0] - 1)
    sigma = (sigma + sigma.T) / 2.0
    return FIDStats(mu=mu, sigma=sigma, n=features.shape[0])


def matrix_sqrt_psd(m: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    The input is symmetrized; eigenvalues in [-1e-6, 0) are treated as
    round-off and clamped to zero, anything lower is rejected.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise EvalError(f"need a square matrix, got shape {m.shape}")
    asym = np.max(np.abs(m - m.T)) if m.size else 0.0
    if asym > 1e-6 * (1.0 + np.max(np.abs(m))):
        raise EvalError(f"matrix is not symmetric within tolerance (max asymmetry {asym:.3e})")
    sym = (m + m.T) / 2.0
    w, v = np.linalg.eigh(sym)
    scale = max(1.0, float(w[-1])) if w.size else 1.0
    if w[0] < -1e-6 * scale:
        raise EvalError(f"matrix is not PSD within tolerance (min eigenvalue {w[0]:.3e})")
    w = np.clip(w, 0.0, None)
    s = (v * np.sqrt(w)) @ v.T
    return (s + s.T) / 2.0


def fid(a: FIDStats, b: FIDStats) -> float:
    """Fréchet distance between two feature Gaussians (lower is better).

    Uses the symmetrized product sqrt(sqrt(Sa) Sb sqrt(Sa)) for stability;
    tiny negative totals from round-off are clamped to zero.
    """
    if a.mu.shape != b.mu.shape:
        raise EvalError(f"feature dimensions differ: {a.mu.shape} vs {b.mu.shape}")
    sqrt_a = matrix_sqrt_psd(a.sigma)
    cross = matrix_sqrt_psd(sqrt_a @ b.sigma @ sqrt_a)
    diff = a.mu - b.mu
    value = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * np.trace(cross))
    if value < -1e-6:
        raise EvalError(f"FID evaluated to {value}, below the round-off tolerance")
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# Classifier


@dataclass(frozen=True)
class ClassifierArch:
    image_size: int = 64
    base_channels: int = 12
    num_classes: int = 3
    groups: int = 4
    dtype: str = "float32"


class _BasicBlock:
    def __init__(self, store, name, c_in, c_out, stride, groups, rng):
        self.conv1 = nn.Conv2d(store, f"{name}.conv1", c_in, c_out, rng, stride=stride)
        self.norm1 = nn.GroupNorm(store, f"{name}.norm1", min(groups, c_out), c_out)
        self.act1 = nn.ReLU(f"{name}.act1")
        self.conv2 = nn.Conv2d(store, f"{name}.conv2", c_out, c_out, rng)
        self.norm2 = nn.GroupNorm(store, f"{name}.norm2", min(groups, c_out), c_out)
        self.act_out = nn.ReLU(f"{name}.act_out")
        self.proj = None
        if stride != 1 or c_in != c_out:
            self.proj = nn.Conv2d(store, f"{name}.proj", c_in, c_out, rng, k=1, pad=0,
                                  stride=stride)

    def forward(self, x, cache):
        h = self.conv1.forward(x, cache)
        h = self.norm1.forward(h, cache)
        h = self.act1.forward(h, cache)
        h = self.conv2.forward(h, cache)
        h = self.norm2.forward(h, cache)
        shortcut = self.proj.forward(x, cache) if self.proj else x
        return self.act_out.forward(h + shortcut, cache)

    def backward(self, dy, cache, grads):
        dsum = self.act_out.backward(dy, cache, grads)
        dh = self.norm2.backward(dsum, cache, grads)
        dh = self.conv2.backward(dh, cache, grads)
        dh = self.act1.backward(dh, cache, grads)
        dh = self.norm1.backward(dh, cache, grads)
        dx = self.conv1.backward(dh, cache, grads)
        dx += self.proj.backward(dsum, cache, grads) if self.proj else dsum
        return dx


class ClassifierModel:
    """Reduced ResNet-style 3-way classifier for toy-resolution images.

    Eight weighted layers: strided stem, three residual stages (two convs
    each), and the linear head. Group normalization keeps inference free of
    batch statistics, so outputs are deterministic sample by sample.
    """

    def __init__(self, arch: ClassifierArch = ClassifierArch(), seed: int = 0):
        self.arch = arch
        self.store = nn.ParamStore(dtype=arch.dtype)
        rng = np.random.default_rng(seed)
        c = arch.base_channels
        self.stem = nn.Conv2d(self.store, "stem", 1, c, rng, stride=2)
        self.stem_norm = nn.GroupNorm(self.store, "stem.norm", min(arch.groups, c), c)
        self.stem_act = nn.ReLU("stem.act")
        self.block1 = _BasicBlock(self.store, "stage1", c, c, 1, arch.groups, rng)
        self.block2 = _BasicBlock(self.store, "stage2", c, 2 * c, 2, arch.groups, rng)
        self.block3 = _BasicBlock(self.store, "stage3", 2 * c, 4 * c, 2, arch.groups, rng)
        self.fc = nn.Linear(self.store, "fc", 4 * c, arch.num_classes, rng)
        self.feature_dim = 4 * c

    def _prepare(self, x):
        x = np.asarray(x, dtype=self.store.dtype)
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x[:, None]
        return x

    def _trunk(self, x, cache):
        h = self.stem.forward(x, cache)
        h = self.stem_norm.forward(h, cache)
        h = self.stem_act.forward(h, cache)
        h = self.block1.forward(h, cache)
        h = self.block2.forward(h, cache)
        h = self.block3.forward(h, cache)
        if cache is not None:
            cache["pool.hw"] = h.shape[2:]
        return nn.global_avg_pool(h)

    def features(self, x) -> np.ndarray:
        return self._trunk(self._prepare(x), cache=None)

    def forward(self, x) -> np.ndarray:
        return self.fc.forward(self._trunk(self._prepare(x), cache=None))

    def forward_train(self, x):
        cache: dict = {}
        pooled = self._trunk(self._prepare(x), cache)
        return self.fc.forward(pooled, cache), cache

    def backward(self, dlogits, cache):
        grads: dict = {}
        dpooled = self.fc.backward(np.asarray(dlogits, dtype=self.store.dtype), cache, grads)
        dh = nn.global_avg_pool_backward(dpooled, cache["pool.hw"])
        dh = self.block3.backward(dh, cache, grads)
        dh = self.block2.backward(dh, cache, grads)
        dh = self.block1.backward(dh, cache, grads)
        dh = self.stem_act.backward(dh, cache, grads)
        dh = self.stem_norm.backward(dh, cache, grads)
        self.stem.backward(dh, cache, grads)
        return grads

    def predict_proba(self, images) -> np.ndarray:
        return nn.softmax(np.asarray(self.forward(images), dtype=np.float64))


def train_classifier(manifest: Manifest, config: TrainConfig,
                     arch: ClassifierArch | None = None) -> ClassifierModel:
    """Cross-entropy training on the train split with seeded flip augmentation.

    Train-time augmentation is a horizontal flip with probability 0.5 (plus
    the [-1, 1] normalization applied at load). Deterministic for a fixed
    config seed.
    """
    train = manifest.subset("train")
    counts = manifest.class_counts("train")
    missing = [lab.value for lab in LABELS if counts[lab] == 0]
    if missing:
        raise EvalError(f"train split is missing class(es): {missing}")
    if arch is None:
        arch = ClassifierArch(image_size=manifest.image_size)
    model = ClassifierModel(arch, seed=config.seed)
    images = np.stack([manifest.load_image(s) for s in train]).astype(model.store.dtype)
    labels = np.array([LABELS.index(s.label) for s in train])
    n = images.shape[0]
    rng = np.random.default_rng(config.seed)
    opt = nn.Adam(model.store, config.learning_rate, selector=config.trainable_selector)
    batches = max(n // config.batch_size, 1)
    bs = min(config.batch_size, n)
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        flips = rng.random(n) < 0.5
        for b in range(batches):
            idx = perm[b * bs : (b + 1) * bs]
            batch = images[idx].copy()
            batch[flips[idx]] = batch[flips[idx]][:, :, ::-1]
            logits, cache = model.forward_train(batch)
            _, dlogits = nn.cross_entropy(np.asarray(logits, dtype=np.float64), labels[idx])
            grads = model.backward(dlogits, cache)
            opt.step(grads)
    return model


CLASSIFIER_FORMAT = "classifier-checkpoint"


def save_classifier(model: ClassifierModel, path) -> None:
    from dataclasses import asdict

    write_tensors(path, CLASSIFIER_FORMAT, {"arch": asdict(model.arch)},
                  model.store.copy_values())


def load_classifier(path) -> ClassifierModel:
    meta, tensors = read_tensors(path, expect_kind=CLASSIFIER_FORMAT)
    model = ClassifierModel(ClassifierArch(**meta["arch"]), seed=0)
    for name, value in tensors.items():
        model.store.set(name, value)
    return model


def evaluate_split(model: ClassifierModel, manifest: Manifest, split: str = "val",
                   batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities and integer labels for one split, in manifest order."""
    subset = manifest.subset(split)
    if not subset:
        raise EvalError(f"manifest has no samples in split {split!r}")
    labels = np.array([LABELS.index(s.label) for s in subset])
    probs = []
    for start in range(0, len(subset), batch_size):
        chunk = subset[start : start + batch_size]
        images = np.stack([manifest.load_image(s) for s in chunk])
        probs.append(model.predict_proba(images))
    return np.concatenate(probs), labels


# ---------------------------------------------------------------------------
# Classification metrics


@dataclass
class MetricsReport:
    accuracy: float
    f1_macro: float
    auc_roc_ovr_macro: float
    ppv_macro: float
    recall_macro: float
    fid: float | None
    per_class: dict
    confusion: list[list[int]]
    flags: list[str] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "f1_score": self.f1_macro,
            "auc_roc": self.auc_roc_ovr_macro,
            "ppv": self.ppv_macro,
            "recall": self.recall_macro,
            "fid": self.fid,
            "per_class": self.per_class,
            "confusion_matrix": self.confusion,
            "flags": self.flags,
            "metadata": self.metadata,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            accuracy=d["accuracy"],
            f1_macro=d["f1_score"],
            auc_roc_ovr_macro=d["auc_roc"],
            ppv_macro=d["ppv"],
            recall_macro=d["recall"],
            fid=d["fid"],
            per_class=d["per_class"],
            confusion=d["confusion_matrix"],
            flags=list(d.get("flags", [])),
            metadata=dict(d.get("metadata", {})),
        )


def _binary_auc_trapezoid(scores: np.ndarray, positives: np.ndarray) -> float:
    """ROC area by trapezoidal integration; tied scores form single ROC
    points, which credits ties at half weight."""
    order = np.argsort(-scores, kind="stable")
    scores = scores[order]
    positives = positives[order]
    distinct = np.nonzero(np.diff(scores))[0]
    boundaries = np.concatenate([distinct, [scores.size - 1]])
    tps = np.cumsum(positives)[boundaries]
    fps = (boundaries + 1) - tps
    tpr = np.concatenate([[0.0], tps / tps[-1]])
    fpr = np.concatenate([[0.0], fps / fps[-1]])
    return float(np.trapezoid(tpr, fpr))


def compute_metrics(probs: np.ndarray, labels: np.ndarray,
                    fid_value: float | None = None,
                    metadata: dict | None = None) -> MetricsReport:
    """Accuracy, macro F1/PPV/recall, and macro one-vs-rest AUC from softmax
    probabilities.

    Ties in argmax resolve to the lowest class index. Per-class ratios with
    zero denominators contribute 0 to the macro average and set a flag; AUC
    for a class without both positives and negatives is skipped with a flag.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[1] != len(LABELS):
        raise EvalError(f"probs must be (n, {len(LABELS)}), got {probs.shape}")
    if probs.shape[0] < 1:
        raise EvalError("need at least one sample")
    if np.max(np.abs(probs.sum(axis=1) - 1.0)) > 1e-6:
        raise EvalError("probability rows must sum to 1 within 1e-6")
    if labels.shape != (probs.shape[0],) or np.any((labels < 0) | (labels >= len(LABELS))):
        raise EvalError("labels must be class indices in {0, 1, 2}")

    preds = np.argmax(probs, axis=1)  # ties -> lowest index
    k = len(LABELS)
    confusion = np.zeros((k, k), dtype=int)
    for t, p in zip(labels, preds):
        confusion[t, p] += 1
    accuracy = float(np.trace(confusion) / confusion.sum())

    flags: list[str] = []
    per_class: dict = {}
    ppvs, recalls, f1s, aucs = [], [], [], []
    for c, label in enumerate(LABELS):
        tp = int(confusion[c, c])
        fp = int(confusion[:, c].sum() - tp)
        fn = int(confusion[c, :].sum() - tp)
        if tp + fp == 0:
            ppv = 0.0
            flags.append(f"ppv_undefined:{label.value}")
        else:
            ppv = tp / (tp + fp)
        if tp + fn == 0:
            recall = 0.0
            flags.append(f"recall_undefined:{label.value}")
        else:
            recall = tp / (tp + fn)
        if ppv + recall == 0.0:
            f1 = 0.0
            if tp + fp + fn > 0:
                flags.append(f"f1_undefined:{label.value}")
        else:
            f1 = 2.0 * ppv * recall / (ppv + recall)
        positives = labels == c
        n_pos = int(positives.sum())
        if n_pos == 0 or n_pos == labels.size:
            auc = None
            flags.append(f"auc_skipped:{label.value}")
        else:
            auc = _binary_auc_trapezoid(probs[:, c], positives.astype(np.float64))
            aucs.append(auc)
        ppvs.append(ppv)
        recalls.append(recall)
        f1s.append(f1)
        per_class[label.value] = {"ppv": ppv, "recall": recall, "f1": f1, "auc": auc}

    return MetricsReport(
        accuracy=accuracy,
        f1_macro=float(np.mean(f1s)),
        auc_roc_ovr_macro=float(np.mean(aucs)) if aucs else 0.0,
        ppv_macro=float(np.mean(ppvs)),
        recall_macro=float(np.mean(recalls)),
        fid=fid_value,
        per_class=per_class,
        confusion=confusion.tolist(),
        flags=flags,
        metadata=metadata or {},
    )
