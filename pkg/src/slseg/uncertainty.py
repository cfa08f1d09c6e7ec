"""Monte-Carlo predictive distribution over sampled sub-models."""
from dataclasses import dataclass

import numpy as np

from .net import sample_selection

DEFAULT_SAMPLES = 50
KINDS = ("variance", "entropy")


def sample_mean(probs):
    """Mean over axis 0, anchored on the first sample.

    Identical samples reproduce the first one bit-exactly, which a plain
    ``sum / T`` does not guarantee.
    """
    first = probs[0]
    return first + (probs - first).mean(axis=0)


@dataclass
class PredictionSampleStack:
    probs: np.ndarray   # [T, N, C, H, W] (or [T, C, H, W] for a single image)
    masks: list

    def __post_init__(self):
        if self.probs.shape[0] < 1:
            raise ValueError("a sample stack needs T >= 1")

    @property
    def num_samples(self):
        return self.probs.shape[0]

    def mean(self):
        return sample_mean(self.probs)


@dataclass
class UncertaintyMap:
    values: np.ndarray  # [..., H, W], nonnegative
    kind: str
    normalized: bool = False


def mc_predict(net, x, T=DEFAULT_SAMPLES, rng=None):
    """Average softmax outputs over ``T`` independently sampled masks.

    ``x`` is [N, C_in, H, W] or a single [C_in, H, W] image; the returned mean
    has the matching leading shape.  The mask is shared across the batch.
    """
    if T < 1:
        raise ValueError(f"need T >= 1 samples, got {T}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    x = np.asarray(getattr(x, "data", x))
    single = x.ndim == 3
    if single:
        x = x[None]
    probs, masks = [], []
    for _ in range(T):
        mask = sample_selection(rng, net)
        p = net.predict_proba(x, mask)
        probs.append(p[0] if single else p)
        masks.append(mask)
    stack = PredictionSampleStack(np.stack(probs), masks)
    return stack.mean(), stack


def variance_map(stack):
    """Population variance over samples, averaged over classes."""
    if stack.num_samples < 2:
        raise ValueError("variance needs at least T = 2 samples")
    p = stack.probs
    var = ((p - sample_mean(p)) ** 2).mean(axis=0)
    return UncertaintyMap(var.mean(axis=-3), "variance")


def entropy_map(mean_probs):
    """Predictive entropy ``-sum_c p_c ln p_c`` with ``0 ln 0 = 0``."""
    p = np.asarray(mean_probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    # clip -0.0 / rounding noise from one-hot pixels
    return UncertaintyMap(np.maximum(terms.sum(axis=-3), 0.0), "entropy")


def normalize_uncertainty(umap):
    """Min-max rescale each H x W map to [0, 1]; constant maps become zeros."""
    v = np.asarray(umap.values, dtype=np.float64)
    flat = v.reshape((-1,) + v.shape[-2:])
    lo = flat.min(axis=(1, 2), keepdims=True)
    hi = flat.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    out = np.where(span > 0, (flat - lo) / np.where(span > 0, span, 1.0), 0.0)
    return UncertaintyMap(out.reshape(v.shape), umap.kind, normalized=True)


def uncertainty_from_stack(stack, kind="variance"):
    if kind == "variance":
        return variance_map(stack)
    if kind == "entropy":
        return entropy_map(stack.mean())
    raise ValueError(f"unknown uncertainty kind {kind!r}; expected one of {KINDS}")
