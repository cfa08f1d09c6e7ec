"""Encoder-decoder segmentation net with stochastic layer banks.

A :class:`LayerBank` holds ``M`` interchangeable candidates.  One
:class:`SelectionMask` picks a candidate at each of the ``L`` banks, so a
single parameter set realises ``prod(M_i)`` sub-models.

Topology (``depth = len(widths) - 1``)::

    enc_0 -> pool -> enc_1 -> ... -> enc_depth
    -> up, concat(skip) -> dec_{depth-1} -> ... -> dec_0 -> head (1x1 conv)

Blocks are indexed ``0..2*depth`` in that order; the head has index
``2*depth + 1``.  ``bank_level="block"`` makes each banked block one bank,
``bank_level="conv"`` makes every conv unit inside it a separate bank.
"""
import dataclasses
import itertools
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import FormatError, ShapeError, VersionError

MAX_ENUMERATION = 4096
UINT64_MAX = 2 ** 64 - 1


class Param(T.Tensor):
    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    def named_parameters(self, prefix=""):
        raise NotImplementedError

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def active_parameters(self, choices):
        """Parameters used by a forward pass consuming ``choices`` (an iterator)."""
        raise NotImplementedError

    def banks(self):
        return []


class ConvUnit(Module):
    """conv -> (group norm) -> relu; with ``plain=True`` just the conv."""

    def __init__(self, c_in, c_out, k, rng, dtype, norm=True, plain=False):
        std = np.sqrt(2.0 / (c_in * k * k))
        self.k = k
        self.plain = plain
        self.norm = norm and not plain
        self.weight = Param((rng.standard_normal((c_out, c_in, k, k)) * std).astype(dtype))
        self.bias = Param(np.zeros(c_out, dtype=dtype))
        if self.norm:
            self.gamma = Param(np.ones(c_out, dtype=dtype))
            self.beta = Param(np.zeros(c_out, dtype=dtype))

    def named_parameters(self, prefix=""):
        out = [(prefix + "weight", self.weight), (prefix + "bias", self.bias)]
        if self.norm:
            out += [(prefix + "gamma", self.gamma), (prefix + "beta", self.beta)]
        return out

    def active_parameters(self, choices):
        return self.parameters()

    def __call__(self, x, choices):
        h = T.conv2d(x, self.weight, self.bias, stride=1, pad=self.k // 2)
        if self.plain:
            return h
        if self.norm:
            h = T.group_norm(h, self.gamma, self.beta)
        return T.relu(h)


class Sequential(Module):
    def __init__(self, layers):
        self.layers = list(layers)

    def named_parameters(self, prefix=""):
        out = []
        for i, layer in enumerate(self.layers):
            out += layer.named_parameters(f"{prefix}{i}.")
        return out

    def active_parameters(self, choices):
        out = []
        for layer in self.layers:
            out += layer.active_parameters(choices)
        return out

    def banks(self):
        return [b for layer in self.layers for b in layer.banks()]

    def __call__(self, x, choices):
        for layer in self.layers:
            x = layer(x, choices)
        return x


class LayerBank(Module):
    """M candidates with identical signatures; the mask picks one per pass."""

    def __init__(self, candidates, position_id=0):
        if not candidates:
            raise ValueError("a LayerBank needs at least one candidate")
        self.candidates = list(candidates)
        self.position_id = position_id

    @property
    def size(self):
        return len(self.candidates)

    def named_parameters(self, prefix=""):
        out = []
        for j, cand in enumerate(self.candidates):
            out += cand.named_parameters(f"{prefix}c{j}.")
        return out

    def active_parameters(self, choices):
        return self.candidates[next(choices)].active_parameters(choices)

    def banks(self):
        return [self]

    def __call__(self, x, choices):
        return self.candidates[next(choices)](x, choices)


@dataclass(frozen=True)
class SelectionMask:
    choices: tuple
    seed: object = None

    def __post_init__(self):
        object.__setattr__(self, "choices", tuple(int(c) for c in self.choices))

    def __len__(self):
        return len(self.choices)

    def __iter__(self):
        return iter(self.choices)

    def __str__(self):
        return "".join(str(c) for c in self.choices) if all(c < 10 for c in self.choices) \
            else "-".join(str(c) for c in self.choices)


@dataclass
class NetConfig:
    in_channels: int = 1
    num_classes: int = 3
    widths: tuple = (8, 16)
    convs_per_block: int = 1
    kernel_size: int = 3
    bank_size: object = 2          # int, or one entry per bank
    bank_level: str = "block"      # "block" | "conv"
    bank_blocks: object = "encdec"  # "encdec" | "all" | "none" | list of block indices
    norm: str = "group"            # "group" | "none"
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if isinstance(self.bank_size, (list, tuple)):
            self.bank_size = tuple(int(m) for m in self.bank_size)
        if isinstance(self.bank_blocks, (list, tuple)):
            self.bank_blocks = tuple(int(b) for b in self.bank_blocks)
        if not self.widths:
            raise ValueError("widths must be non-empty")
        if self.bank_level not in ("block", "conv"):
            raise ValueError(f"bank_level must be 'block' or 'conv', got {self.bank_level!r}")
        if self.norm not in ("group", "none"):
            raise ValueError(f"norm must be 'group' or 'none', got {self.norm!r}")

    @property
    def depth(self):
        return len(self.widths) - 1

    def banked_block_ids(self):
        n_blocks = 2 * self.depth + 1
        if self.bank_blocks == "encdec":
            return tuple(range(n_blocks))
        if self.bank_blocks == "all":
            return tuple(range(n_blocks + 1))
        if self.bank_blocks == "none":
            return ()
        ids = tuple(sorted(set(self.bank_blocks)))
        if any(i < 0 or i > n_blocks for i in ids):
            raise ValueError(f"bank block index out of range [0, {n_blocks}]: {ids}")
        return ids

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        for key in ("bank_size", "bank_blocks"):
            if isinstance(d[key], tuple):
                d[key] = list(d[key])
        return d


class StochasticSegNet(Module):
    def __init__(self, config=None, **overrides):
        cfg = dataclasses.replace(config, **overrides) if config else NetConfig(**overrides)
        self.config = cfg
        self.num_classes = cfg.num_classes
        rng = np.random.default_rng(cfg.seed)
        dtype = np.dtype(cfg.dtype)
        norm = cfg.norm == "group"
        banked = set(cfg.banked_block_ids())
        n_bank_slots = self._count_bank_slots(cfg, banked)
        sizes = self._resolve_sizes(cfg.bank_size, n_bank_slots)
        size_iter = iter(sizes)
        pos = itertools.count()

        def unit(c_in, c_out, k=cfg.kernel_size, plain=False):
            return ConvUnit(c_in, c_out, k, rng, dtype, norm=norm, plain=plain)

        def block_units(c_in, c_out):
            chans = [c_in] + [c_out] * cfg.convs_per_block
            return [(chans[i], chans[i + 1]) for i in range(cfg.convs_per_block)]

        def build_block(idx, c_in, c_out):
            pairs = block_units(c_in, c_out)
            if idx not in banked:
                return Sequential(unit(a, b) for a, b in pairs)
            if cfg.bank_level == "block":
                m = next(size_iter)
                return LayerBank([Sequential(unit(a, b) for a, b in pairs) for _ in range(m)], next(pos))
            layers = []
            for a, b in pairs:
                m = next(size_iter)
                layers.append(LayerBank([unit(a, b) for _ in range(m)], next(pos)))
            return Sequential(layers)

        w = cfg.widths
        d = cfg.depth
        self.encoder, self.decoder = [], []
        c_in = cfg.in_channels
        for i in range(d + 1):
            self.encoder.append(build_block(i, c_in, w[i]))
            c_in = w[i]
        for j in range(d):
            level = d - 1 - j
            self.decoder.append(build_block(d + 1 + j, w[level + 1] + w[level], w[level]))
        head_idx = 2 * d + 1
        if head_idx in banked:
            m = next(size_iter)
            self.head = LayerBank([unit(w[0], cfg.num_classes, k=1, plain=True) for _ in range(m)], next(pos))
        else:
            self.head = unit(w[0], cfg.num_classes, k=1, plain=True)
        self.trained_stage1 = False

    @staticmethod
    def _count_bank_slots(cfg, banked):
        head_idx = 2 * cfg.depth + 1
        per_block = 1 if cfg.bank_level == "block" else cfg.convs_per_block
        return sum(1 if i == head_idx else per_block for i in banked)

    @staticmethod
    def _resolve_sizes(bank_size, n):
        if isinstance(bank_size, (list, tuple)):
            if len(bank_size) != n:
                raise ValueError(f"bank_size lists {len(bank_size)} entries but the net has {n} banks")
            sizes = list(bank_size)
        else:
            sizes = [int(bank_size)] * n
        if any(m < 1 for m in sizes):
            raise ValueError(f"every bank needs M >= 1, got {sizes}")
        return sizes

    # ----------------------------------------------------------- structure

    def _slots(self):
        return self.encoder + self.decoder + [self.head]

    def named_parameters(self, prefix=""):
        out = []
        d = self.config.depth
        for i, b in enumerate(self.encoder):
            out += b.named_parameters(f"enc{i}.")
        for j, b in enumerate(self.decoder):
            out += b.named_parameters(f"dec{d - 1 - j}.")
        out += self.head.named_parameters("head.")
        return out

    def banks(self):
        return [b for slot in self._slots() for b in slot.banks()]

    @property
    def bank_sizes(self):
        return tuple(b.size for b in self.banks())

    @property
    def num_banks(self):
        return len(self.banks())

    def _choices(self, mask):
        mask = mask if isinstance(mask, SelectionMask) else SelectionMask(tuple(mask))
        L = self.num_banks
        if len(mask) != L:
            raise ShapeError("selection mask length does not match the number of banks", {"L": (len(mask), L)})
        for i, (c, m) in enumerate(zip(mask.choices, self.bank_sizes)):
            if not 0 <= c < m:
                raise ValueError(f"mask entry {i} = {c} outside [0, {m})")
        return iter(mask.choices)

    def active_parameters(self, mask):
        choices = self._choices(mask)
        out = []
        for slot in self._slots():
            out += slot.active_parameters(choices)
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # ------------------------------------------------------------- forward

    def forward(self, x, mask):
        """Logits [N, num_classes, H, W] of the sub-model picked by ``mask``."""
        x = T.as_tensor(x)
        if x.data.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError("input must be [N, C_in, H, W]",
                             {"C_in": (x.shape[1] if x.data.ndim == 4 else None, self.config.in_channels)})
        d = self.config.depth
        step = 2 ** d
        if x.shape[2] % step or x.shape[3] % step:
            raise ShapeError(f"input spatial dims must be multiples of {step}",
                             {"H": (x.shape[2], f"k*{step}"), "W": (x.shape[3], f"k*{step}")})
        choices = self._choices(mask)
        skips = []
        h = x
        for i, block in enumerate(self.encoder):
            h = block(h, choices)
            if i < d:
                skips.append(h)
                h = T.avg_pool2d(h, 2)
        for block in self.decoder:
            h = T.nearest_upsample(h, 2)
            h = T.concat_channels(h, skips.pop())
            h = block(h, choices)
        return self.head(h, choices)

    __call__ = forward

    def predict_proba(self, x, mask):
        with T.no_grad():
            return T.softmax_channels(self.forward(x, mask)).data

    def descriptor(self):
        return {
            "config": self.config.to_dict(),
            "bank_sizes": list(self.bank_sizes),
            "params": [[name, list(p.shape)] for name, p in self.named_parameters()],
        }

    def copy(self):
        twin = StochasticSegNet(self.config)
        for (_, dst), (_, src) in zip(twin.named_parameters(), self.named_parameters()):
            dst.data[...] = src.data
        twin.trained_stage1 = self.trained_stage1
        return twin


# ------------------------------------------------------------------ selection


def sample_selection(rng, net):
    """Draw one candidate index per bank, uniformly and independently."""
    seed = None
    if not isinstance(rng, np.random.Generator):
        seed = rng
        rng = np.random.default_rng(rng)
    sizes = np.asarray(net.bank_sizes, dtype=np.int64)
    if sizes.size == 0:
        return SelectionMask((), seed)
    return SelectionMask(tuple(rng.integers(0, sizes)), seed)


def count_submodels(net):
    total = 1
    for m in net.bank_sizes:
        total *= m
    if total > UINT64_MAX:
        raise OverflowError(f"sub-model count {total} exceeds the unsigned 64-bit range")
    return total


def count_parameters(net):
    return int(sum(p.size for p in net.parameters()))


def enumerate_selections(net):
    """All masks in lexicographic order; refuses nets above 4096 sub-models."""
    n = count_submodels(net)
    if n > MAX_ENUMERATION:
        raise ValueError(f"refusing to enumerate {n} sub-models (limit {MAX_ENUMERATION})")
    return [SelectionMask(c) for c in itertools.product(*(range(m) for m in net.bank_sizes))]


# ----------------------------------------------------------------- checkpoint

MAGIC = b"SLSN"
VERSION = 1


def save_checkpoint(net, path, meta=None):
    """Write ``net`` in the SLSN format.

    Layout: ``b"SLSN"``, u16 version, u32 descriptor length, UTF-8 JSON
    descriptor (config, bank sizes, parameter names/shapes, meta), then all
    parameters as little-endian float32 in declaration order.
    """
    desc = net.descriptor()
    desc["meta"] = dict(meta or {}, trained_stage1=net.trained_stage1)
    blob = json.dumps(desc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(blob)))
        fh.write(blob)
        for p in net.parameters():
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Return ``(net, meta)`` from an SLSN file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise FormatError("not an SLSN checkpoint (bad magic)", 0)
    if len(raw) < 10:
        raise FormatError("truncated SLSN header", len(raw))
    version, n = struct.unpack_from("<HI", raw, 4)
    if version != VERSION:
        raise VersionError(f"unsupported SLSN version {version} (expected {VERSION})", 4)
    if len(raw) < 10 + n:
        raise FormatError("truncated SLSN descriptor", len(raw))
    try:
        desc = json.loads(raw[10:10 + n].decode("utf-8"))
        net = StochasticSegNet(NetConfig(**desc["config"]))
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad SLSN descriptor: {exc}", 10) from None
    expected = [[name, list(p.shape)] for name, p in net.named_parameters()]
    if desc.get("params") != expected:
        raise FormatError("SLSN parameter table does not match the rebuilt topology", 10)
    offset = 10 + n
    for _, p in net.named_parameters():
        nbytes = 4 * p.size
        if offset + nbytes > len(raw):
            raise FormatError("truncated SLSN parameter payload", len(raw))
        vals = np.frombuffer(raw, dtype="<f4", count=p.size, offset=offset).reshape(p.shape)
        p.data[...] = vals.astype(p.dtype)
        offset += nbytes
    if offset != len(raw):
        raise FormatError("trailing bytes after SLSN payload", offset)
    meta = desc.get("meta", {})
    net.trained_stage1 = bool(meta.get("trained_stage1", False))
    return net, meta
