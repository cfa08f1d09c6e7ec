"""Segmentation metrics, pixel-rejection curves, ensembles and t-tests."""
import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import ShapeError
from .net import count_submodels
from .tensor import no_grad
from .uncertainty import UncertaintyMap, sample_mean

CAMVID_GRID = tuple(round(0.025 * i, 4) for i in range(9))   # 0 .. 20 %
TVUS_GRID = tuple(round(0.005 * i, 4) for i in range(11))    # 0 .. 5 %


@dataclass
class ConfusionMatrix:
    counts: np.ndarray   # [C, C], rows = truth, cols = prediction
    ignored: int = 0

    @property
    def total(self):
        return int(self.counts.sum())


def confusion_matrix(pred, truth, num_classes, ignore_index=255):
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if pred.shape != truth.shape:
        raise ShapeError("prediction and truth sizes differ", {"pixels": (pred.size, truth.size)})
    keep = truth != ignore_index
    t, p = truth[keep].astype(np.int64), pred[keep].astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= num_classes or p.min() < 0 or p.max() >= num_classes):
        raise ValueError(f"labels outside [0, {num_classes})")
    counts = np.bincount(t * num_classes + p, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes), int((~keep).sum()))


def per_class_iou(cm):
    """IoU per class; NaN where the class is absent from truth and prediction."""
    c = np.asarray(cm.counts if isinstance(cm, ConfusionMatrix) else cm, dtype=np.float64)
    if c.sum() == 0:
        raise ValueError("confusion matrix has no counted pixels")
    tp = np.diag(c)
    union = c.sum(axis=0) + c.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)


def miou(cm):
    return float(np.nanmean(per_class_iou(cm)))


def dice(pred_mask, true_mask):
    a, b = _binary_pair(pred_mask, true_mask)
    denom = a.sum() + b.sum()
    return 1.0 if denom == 0 else 2.0 * np.logical_and(a, b).sum() / denom


def jaccard(pred_mask, true_mask):
    a, b = _binary_pair(pred_mask, true_mask)
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else np.logical_and(a, b).sum() / union


def _binary_pair(a, b):
    a, b = np.asarray(a).astype(bool), np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ShapeError("mask shapes differ", {"shape": (a.shape, b.shape)})
    return a, b


def pixel_accuracy(pred, truth, ignore_index=255):
    pred, truth = np.asarray(pred), np.asarray(truth)
    keep = truth != ignore_index
    return float((pred[keep] == truth[keep]).mean()) if keep.any() else 1.0


def make_metric(name, num_classes, ignore_index=255, foreground=1):
    """Return ``f(pred, truth) -> float`` over flat pixel arrays.

    ``dice`` and ``jaccard`` score the ``foreground`` class against the rest.
    """
    if name == "miou":
        return lambda p, t: miou(confusion_matrix(p, t, num_classes, ignore_index))
    if name == "accuracy":
        return lambda p, t: pixel_accuracy(p, t, ignore_index)
    if name in ("dice", "jaccard"):
        fn = dice if name == "dice" else jaccard

        def score(p, t):
            keep = t != ignore_index
            return fn(p[keep] == foreground, t[keep] == foreground)
        return score
    raise ValueError(f"unknown metric {name!r}")


# --------------------------------------------------------------- rejection


@dataclass
class RejectionCurve:
    fractions: list
    scores: list
    metric_name: str
    rejected: list = None

    def to_rows(self):
        return [(f, s) for f, s in zip(self.fractions, self.scores)]


def _check_fractions(fractions):
    fr = [float(f) for f in fractions]
    if any(f < 0 or f >= 1 for f in fr):
        raise ValueError("rejection fractions must lie in [0, 1)")
    if any(b <= a for a, b in zip(fr, fr[1:])):
        raise ValueError("rejection fractions must be strictly increasing")
    if not fr or fr[0] != 0.0:
        raise ValueError("rejection fractions must start at 0")
    return fr


def _resolve_metric(metric, pred, truth):
    if callable(metric):
        return metric, getattr(metric, "__name__", "custom")
    k = int(max(pred.max(), truth[truth != 255].max() if (truth != 255).any() else 0)) + 1
    return make_metric(metric, k), metric


def rejection_order(u):
    """Pixel indices by descending uncertainty, ties by ascending index."""
    return np.argsort(-np.asarray(u, dtype=np.float64).reshape(-1), kind="stable")


def pixel_rejection_curve(pred_labels, true_labels, u_norm, fractions=CAMVID_GRID, metric="miou",
                          per_image=False):
    """Metric on the pixels left after dropping the most uncertain fraction.

    Pooled by default: ``floor(f * total_pixels)`` pixels are removed across
    all inputs.  With ``per_image`` the leading axis indexes images and each
    image loses ``floor(f * pixels_per_image)`` before pooling the remainder.
    """
    u = np.asarray(getattr(u_norm, "values", u_norm), dtype=np.float64)
    if isinstance(u_norm, UncertaintyMap) and not u_norm.normalized:
        raise ValueError("pixel rejection expects a normalised uncertainty map")
    if u.size and (u.min() < -1e-6 or u.max() > 1 + 1e-6):
        raise ValueError("pixel rejection expects uncertainty in [0, 1]")
    pred, truth = np.asarray(pred_labels), np.asarray(true_labels)
    if not (pred.shape == truth.shape == u.shape):
        raise ShapeError("pred, truth and uncertainty shapes differ",
                         {"pred": (pred.shape, truth.shape), "u": (u.shape, truth.shape)})
    fr = _check_fractions(fractions)
    score, name = _resolve_metric(metric, pred, truth)
    if per_image:
        groups = [(pred[i].reshape(-1), truth[i].reshape(-1), rejection_order(u[i])) for i in range(len(pred))]
    else:
        groups = [(pred.reshape(-1), truth.reshape(-1), rejection_order(u))]
    scores, rejected = [], []
    for f in fr:
        keep_p, keep_t, n_rej = [], [], 0
        for p, t, order in groups:
            k = math.floor(f * p.size)
            keep = np.ones(p.size, dtype=bool)
            keep[order[:k]] = False
            keep_p.append(p[keep])
            keep_t.append(t[keep])
            n_rej += k
        scores.append(float(score(np.concatenate(keep_p), np.concatenate(keep_t))))
        rejected.append(n_rej)
    return RejectionCurve(fr, scores, name, rejected)


def random_rejection_baseline(pred, truth, fractions=CAMVID_GRID, seed=0, metric="miou"):
    """Same protocol with a uniformly random pixel ranking."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    rng = np.random.default_rng(seed)
    u = rng.permutation(pred.size).reshape(pred.shape) / max(1, pred.size - 1)
    curve = pixel_rejection_curve(pred, truth, u, fractions, metric)
    curve.metric_name = f"{curve.metric_name}_random"
    return curve


def write_curves_csv(path, curves):
    """One ``fraction`` column plus one column per curve, full precision."""
    fr = curves[0].fractions
    for c in curves:
        if c.fractions != fr:
            raise ValueError("curves disagree on the fraction grid")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fraction"] + [c.metric_name for c in curves])
        for i, f in enumerate(fr):
            w.writerow([repr(f)] + [repr(c.scores[i]) for c in curves])


# ---------------------------------------------------------------- ensembles


def _topology(net):
    d = net.descriptor()
    cfg = {k: v for k, v in d["config"].items() if k != "seed"}
    return cfg, d["bank_sizes"], d["params"]


def vanilla_ensemble_predict(nets, x):
    """Mean softmax and variance map over K independently trained nets."""
    if not nets:
        raise ValueError("need at least one ensemble member")
    ref = _topology(nets[0])
    for k, net in enumerate(nets):
        if count_submodels(net) != 1:
            raise ValueError(f"ensemble member {k} has stochastic banks; vanilla members need M = 1")
        if _topology(net) != ref:
            raise ValueError(f"ensemble member {k} topology differs from member 0")
    x = np.asarray(getattr(x, "data", x))
    single = x.ndim == 3
    xb = x[None] if single else x
    with no_grad():
        probs = np.stack([net.predict_proba(xb, (0,) * net.num_banks) for net in nets])
    if single:
        probs = probs[:, 0]
    mean = sample_mean(probs)
    var = ((probs - mean) ** 2).mean(axis=0).mean(axis=-3)
    return mean, UncertaintyMap(var, "variance")


# ----------------------------------------------------------------- t-test


@dataclass
class TTestResult:
    t: float
    p: float
    df: int
    degenerate: bool = False

    def __iter__(self):
        return iter((self.t, self.p))


def paired_t_test(scores_a, scores_b):
    """Two-sided paired t-test; zero-variance differences give a degenerate result (NaN p)."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired t-test needs two equal-length 1-D score lists")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0 or not np.isfinite(sd):
        return TTestResult(math.nan, math.nan, n - 1, degenerate=True)
    t = d.mean() / (sd / math.sqrt(n))
    p = 2.0 * stats.t.sf(abs(t), n - 1)
    return TTestResult(float(t), float(p), n - 1)
