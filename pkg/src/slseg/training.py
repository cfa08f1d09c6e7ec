"""Two-stage training under stochastic layer selection.

Stage 1 samples one mask per step and minimises plain cross-entropy.
Stage 2 first estimates per-pixel uncertainty by MC sampling with frozen
weights, then minimises the uncertainty-weighted loss on a fresh mask.
Only parameters on the sampled path (plus unbanked layers) are updated.

Randomness is keyed on ``(seed, global_step)``, so a step always draws the
same batch and mask regardless of which stage runs it.
"""
import csv
import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import NumericalError
from .net import sample_selection
from .uncertainty import mc_predict, normalize_uncertainty, uncertainty_from_stack


@dataclass
class TrainConfig:
    stage1_steps: int = 400
    stage2_steps: int = 100
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 4
    T_train: int = 4
    seed: int = 0
    uncertainty_kind: str = "variance"
    weight_floor: float = 1.0
    ignore_index: int = 255
    checkpoint_every: int = 0
    stage2_lr_scale: float = 1.0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.stage2_steps > 0 and self.T_train < 2:
            raise ValueError("T_train must be >= 2 when stage 2 runs")
        if self.uncertainty_kind not in ("variance", "entropy"):
            raise ValueError(f"unknown uncertainty kind {self.uncertainty_kind!r}")

    @classmethod
    def from_total(cls, total_steps, stage1_fraction=0.8, **kw):
        s1 = int(round(total_steps * stage1_fraction))
        return cls(stage1_steps=s1, stage2_steps=total_steps - s1, **kw)


@dataclass
class StepRecord:
    step: int
    stage: int
    loss: float
    mask: str
    wall_time: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, rec):
        if self.records:
            last = self.records[-1]
            if rec.step <= last.step:
                raise ValueError("train log steps must increase")
            if rec.stage < last.stage:
                raise ValueError("train log cannot return to an earlier stage")
        self.records.append(rec)

    def extend(self, other):
        for rec in other.records:
            self.append(rec)
        return self

    @property
    def losses(self):
        return [r.loss for r in self.records]

    def to_csv(self, path, include_time=False):
        cols = ["step", "stage", "loss", "mask"] + (["wall_time"] if include_time else [])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.records:
                row = [r.step, r.stage, repr(float(r.loss)), r.mask]
                if include_time:
                    row.append(repr(r.wall_time))
                w.writerow(row)


class SGD:
    """SGD with heavy-ball momentum: ``v = mu*v + g; p -= lr*v``.

    Velocity buffers live per parameter and are touched only when that
    parameter is stepped.
    """

    def __init__(self, lr, momentum=0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity = {}

    def step(self, params):
        lr = np.asarray(self.lr, dtype=np.float64)
        for p in params:
            g = p.grad
            v = self.velocity.get(id(p))
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[id(p)] = v.astype(p.dtype, copy=False)
            if self.lr != 0:
                p.data -= (lr * v).astype(p.dtype)


def pixel_uncertainty_loss(logits, labels, u_norm, weight_floor=1.0, ignore_index=255):
    """Mean over non-ignored pixels of ``(weight_floor + u) * CE``.

    ``u_norm`` ([N, H, W] in [0, 1], or an
    :class:`~slseg.uncertainty.UncertaintyMap`) is a constant weight.
    """
    u = np.asarray(getattr(u_norm, "values", u_norm), dtype=np.float64)
    if u.size and (u.max() > 1 + 1e-6 or u.min() < -1e-6):
        raise ValueError(f"uncertainty map must be normalised to [0, 1] (range {u.min():.4g}..{u.max():.4g})")
    return T.weighted_cross_entropy(logits, labels, weight_floor + u, ignore_index)


def _step_rng(seed, step, stream=0):
    return np.random.default_rng([seed, step, stream])


def _batch(rng, n, batch_size):
    if batch_size >= n:
        return rng.permutation(n)
    return rng.choice(n, size=batch_size, replace=False)


def _update(net, opt, mask, loss, step):
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericalError("non-finite loss", step)
    net.zero_grad()
    loss.backward()
    opt.step(net.active_parameters(mask))
    return value


def _emit_checkpoint(net, cfg, step, checkpoint_fn):
    if checkpoint_fn is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
        checkpoint_fn(net, step + 1)


def train_stage1(net, images, labels, cfg, optimizer=None, start_step=0, steps=None, checkpoint_fn=None):
    """Cross-entropy training with one freshly sampled mask per step."""
    images, labels = np.asarray(images), np.asarray(labels)
    if len(images) == 0:
        raise ValueError("empty dataset")
    opt = optimizer or SGD(cfg.lr, cfg.momentum)
    steps = cfg.stage1_steps if steps is None else steps
    dtype = net.parameters()[0].dtype
    log = TrainLog()
    for step in range(start_step, start_step + steps):
        t0 = time.perf_counter()
        rng = _step_rng(cfg.seed, step)
        idx = _batch(rng, len(images), cfg.batch_size)
        mask = sample_selection(rng, net)
        x = T.Tensor(images[idx].astype(dtype))
        loss = T.cross_entropy(net.forward(x, mask), labels[idx], cfg.ignore_index)
        value = _update(net, opt, mask, loss, step)
        log.append(StepRecord(step, 1, value, str(mask), time.perf_counter() - t0))
        _emit_checkpoint(net, cfg, step, checkpoint_fn)
    net.trained_stage1 = True
    return log


def batch_uncertainty(net, x, cfg, rng):
    """Normalised per-image uncertainty [N, H, W] from ``cfg.T_train`` MC passes."""
    _, stack = mc_predict(net, x, cfg.T_train, rng)
    return normalize_uncertainty(uncertainty_from_stack(stack, cfg.uncertainty_kind)).values


def train_stage2(net, images, labels, cfg, optimizer=None, start_step=None, steps=None,
                 force=False, uncertainty_fn=None, checkpoint_fn=None):
    """Uncertainty-weighted training.

    ``uncertainty_fn(net, x, cfg, rng)`` overrides the MC estimate (tests use
    it to pin the weights).  Refuses an untrained net unless ``force``.
    """
    if cfg.T_train < 2:
        raise ValueError("stage 2 needs T_train >= 2")
    if not (net.trained_stage1 or force):
        raise RuntimeError("stage 2 expects a stage-1 trained net; pass force=True to override")
    images, labels = np.asarray(images), np.asarray(labels)
    if len(images) == 0:
        raise ValueError("empty dataset")
    opt = optimizer or SGD(cfg.lr * cfg.stage2_lr_scale, cfg.momentum)
    start_step = cfg.stage1_steps if start_step is None else start_step
    steps = cfg.stage2_steps if steps is None else steps
    estimate = uncertainty_fn or batch_uncertainty
    dtype = net.parameters()[0].dtype
    log = TrainLog()
    for step in range(start_step, start_step + steps):
        t0 = time.perf_counter()
        rng = _step_rng(cfg.seed, step)
        idx = _batch(rng, len(images), cfg.batch_size)
        x = T.Tensor(images[idx].astype(dtype))
        u = estimate(net, x.data, cfg, _step_rng(cfg.seed, step, stream=1))
        mask = sample_selection(rng, net)
        loss = pixel_uncertainty_loss(net.forward(x, mask), labels[idx], u, cfg.weight_floor, cfg.ignore_index)
        value = _update(net, opt, mask, loss, step)
        log.append(StepRecord(step, 2, value, str(mask), time.perf_counter() - t0))
        _emit_checkpoint(net, cfg, step, checkpoint_fn)
    return log


def train(net, images, labels, cfg, checkpoint_fn=None):
    """Both stages with a shared optimiser; returns the combined log."""
    opt = SGD(cfg.lr, cfg.momentum)
    log = train_stage1(net, images, labels, cfg, optimizer=opt, checkpoint_fn=checkpoint_fn)
    if cfg.stage2_steps > 0:
        opt.lr = cfg.lr * cfg.stage2_lr_scale
        log.extend(train_stage2(net, images, labels, cfg, optimizer=opt, checkpoint_fn=checkpoint_fn))
    return log


# ------------------------------------------------------------- config files


def parse_config(text):
    """Parse flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"config line {lineno}: empty key")
        out[key] = value
    return out


def coerce(value, like):
    """Convert a config string to the type of the default ``like``."""
    if isinstance(like, bool):
        v = value.lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if "," in value or isinstance(like, tuple):
        return tuple(int(v) for v in value.split(",") if v.strip())
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def split_config(values, net_defaults, train_defaults):
    """Route flat keys to NetConfig / TrainConfig field dicts."""
    net_fields = {f.name: getattr(net_defaults, f.name) for f in dataclasses.fields(net_defaults)}
    train_fields = {f.name: getattr(train_defaults, f.name) for f in dataclasses.fields(train_defaults)}
    net_kw, train_kw = {}, {}
    for key, value in values.items():
        if key in train_fields:
            train_kw[key] = coerce(value, train_fields[key]) if isinstance(value, str) else value
        elif key.startswith("net.") and key[4:] in net_fields:
            name = key[4:]
            net_kw[name] = coerce(value, net_fields[name]) if isinstance(value, str) else value
        elif key in net_fields:
            net_kw[key] = coerce(value, net_fields[key]) if isinstance(value, str) else value
        else:
            raise ValueError(f"unknown config key {key!r}")
    return net_kw, train_kw
