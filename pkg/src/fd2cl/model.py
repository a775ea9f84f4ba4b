"""Frozen shared encoder, per-domain low-rank adapters, fusion and classifier.

The encoder is a two-block MLP on flattened images standing in for a large
pretrained backbone. Each domain owns one adapter per encoder block; the
effective weight of a block is ``W + (alpha / r) * A @ B`` with ``B`` starting
at zero.
"""
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import numcore as nc
from .domains import Domain, ImageView, PhaseGate, make_views
from .errors import ConfigError, DimensionError, FormatError
from .numcore import Tensor
from .rng import ANCHORS, MODEL_INIT, Stream

CHECKPOINT_MAGIC = b"FD2CL\x00\x00\x01"
DOMAINS = (Domain.SPATIAL, Domain.WAVELET, Domain.FOURIER)
ANCHOR_MAX_COS = 0.2


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 3
    height: int = 32
    width: int = 32
    feature_dim: int = 64
    hidden_dim: int = 256
    head_dim: int = 128
    rank: int = 4
    alpha: float = 16.0
    dropout: float = 0.5
    gate_scale: float = 0.1

    @property
    def input_dim(self):
        return self.channels * self.height * self.width


class LoraAdapter:
    """Low-rank delta for one ``m x n`` weight."""

    def __init__(self, a, b, rank, alpha, name):
        self.rank = rank
        self.alpha = alpha
        self.A = Tensor(a, requires_grad=True, name=f"{name}.A")
        self.B = Tensor(b, requires_grad=True, name=f"{name}.B")

    @property
    def scaling(self):
        return self.alpha / self.rank

    def delta(self):
        return self.scaling * (self.A.data @ self.B.data)


class Model:
    def __init__(self, cfg, seed):
        self.cfg = cfg
        self.seed = seed
        rs = Stream(seed, MODEL_INIT)
        p, h1, d, h2, r = cfg.input_dim, cfg.hidden_dim, cfg.feature_dim, cfg.head_dim, cfg.rank

        self.enc_w1 = Tensor(rs.normal((p, h1)) / np.sqrt(p), name="encoder.W1")
        self.enc_b1 = Tensor(np.zeros(h1), name="encoder.b1")
        self.enc_w2 = Tensor(rs.normal((h1, d)) / np.sqrt(h1), name="encoder.W2")
        self.enc_b2 = Tensor(np.zeros(d), name="encoder.b2")

        self.adapters = {}
        for dom in DOMAINS:
            self.adapters[dom] = (
                LoraAdapter(rs.normal((p, r)) / np.sqrt(p), np.zeros((r, h1)), r, cfg.alpha,
                            f"adapter.{dom.value}.block1"),
                LoraAdapter(rs.normal((h1, r)) / np.sqrt(h1), np.zeros((r, d)), r, cfg.alpha,
                            f"adapter.{dom.value}.block2"),
            )

        self.gate = PhaseGate(cfg.height, cfg.width, scale=cfg.gate_scale)

        self.head_w1 = Tensor(rs.normal((3 * d, h2)) / np.sqrt(3 * d), requires_grad=True, name="head.W1")
        self.head_b1 = Tensor(np.zeros(h2), requires_grad=True, name="head.b1")
        self.head_w2 = Tensor(np.zeros((h2, 1)), requires_grad=True, name="head.W2")
        self.head_b2 = Tensor(np.zeros(1), requires_grad=True, name="head.b2")

        t_real, t_fake = make_anchors(seed, d)
        self.anchor_real = Tensor(t_real, name="anchors.real")
        self.anchor_fake = Tensor(t_fake, name="anchors.fake")

    # ------------------------------------------------------------ parameter sets

    def adapter_params(self):
        out = []
        for dom in DOMAINS:
            for ad in self.adapters[dom]:
                out += [ad.A, ad.B]
        return out

    def ewc_params(self):
        """Frequency gate and classifier head: the set anchored by EWC."""
        return self.gate.parameters() + [self.head_w1, self.head_b1, self.head_w2, self.head_b2]

    def trainable(self):
        return self.adapter_params() + self.ewc_params()

    def frozen(self):
        return [self.enc_w1, self.enc_b1, self.enc_w2, self.enc_b2, self.anchor_real, self.anchor_fake]

    def state_dict(self):
        return OrderedDict((t.name, t.data) for t in self.frozen() + self.trainable())

    def load_state_dict(self, state):
        tensors = {t.name: t for t in self.frozen() + self.trainable()}
        if set(state) != set(tensors):
            missing = sorted(set(tensors) - set(state))
            extra = sorted(set(state) - set(tensors))
            raise FormatError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, arr in state.items():
            if tuple(arr.shape) != tensors[name].shape:
                raise FormatError(f"tensor {name}: shape {arr.shape} != {tensors[name].shape}")
            tensors[name].data = np.array(arr, dtype=np.float64)

    def census(self):
        """``(name, shape, trainable)`` for every tensor in the model."""
        return [(t.name, tuple(t.shape), t.requires_grad) for t in self.frozen() + self.trainable()]

    def anchors(self):
        return self.anchor_real.data, self.anchor_fake.data

    # ------------------------------------------------------------ forward pieces

    def encode_branch(self, view):
        """Frozen encoder with the adapters of ``view.domain`` active."""
        try:
            ad1, ad2 = self.adapters[Domain(view.domain)]
        except (KeyError, ValueError):
            raise ConfigError(f"unknown domain tag {view.domain!r}") from None
        x = view.pixels
        x = nc.reshape(x, (x.shape[0], -1))
        if x.shape[1] != self.cfg.input_dim:
            raise DimensionError(f"flattened view has width {x.shape[1]}, encoder expects {self.cfg.input_dim}")
        h = nc.add(nc.matmul(x, self.enc_w1), self.enc_b1)
        h = nc.add(h, nc.scale(nc.matmul(nc.matmul(x, ad1.A), ad1.B), ad1.scaling))
        h = nc.gelu(h)
        f = nc.add(nc.matmul(h, self.enc_w2), self.enc_b2)
        return nc.add(f, nc.scale(nc.matmul(nc.matmul(h, ad2.A), ad2.B), ad2.scaling))

    def classify(self, f_cls, train=False, mask=None):
        """Logit per sample; sigmoid(logit) is the probability of "fake"."""
        if f_cls.shape[1] != 3 * self.cfg.feature_dim:
            raise DimensionError(f"classifier input width {f_cls.shape[1]} != {3 * self.cfg.feature_dim}")
        h = nc.gelu(nc.add(nc.matmul(f_cls, self.head_w1), self.head_b1))
        if train and self.cfg.dropout > 0:
            if mask is None:
                raise ValueError("train mode needs a dropout mask")
            h = nc.mul(h, Tensor(mask / (1.0 - self.cfg.dropout)))
        z = nc.add(nc.matmul(h, self.head_w2), self.head_b2)
        return nc.reshape(z, (z.shape[0],))

    def draw_mask(self, stream, batch_size):
        return stream.bernoulli(1.0 - self.cfg.dropout, (batch_size, self.cfg.head_dim))

    def forward(self, batch, train=False, mask=None, with_freq=True):
        """Return ``(logits, f_align_hat)`` for a ``B x C x H x W`` batch."""
        xs, xw, xf = make_views(batch, self.gate, with_freq=with_freq)
        f_s = self.encode_branch(ImageView(xs, Domain.SPATIAL))
        if with_freq:
            f_w = self.encode_branch(ImageView(xw, Domain.WAVELET))
            f_f = self.encode_branch(ImageView(xf, Domain.FOURIER))
            f_cls = fuse_cls(f_s, f_w, f_f)
            f_align = fuse_align(f_s, f_w, f_f)
        else:
            blank = Tensor(np.zeros(f_s.shape))
            f_cls = fuse_cls(f_s, blank, blank)
            f_align = nc.l2_normalize_rows(f_s)
        return self.classify(f_cls, train=train, mask=mask), f_align


def make_anchors(seed, dim):
    """Two seeded unit vectors with ``|cos| < ANCHOR_MAX_COS``."""
    rs = Stream(seed, ANCHORS)
    t_real = rs.normal(dim)
    t_real /= np.linalg.norm(t_real)
    while True:
        t_fake = rs.normal(dim)
        t_fake /= np.linalg.norm(t_fake)
        if abs(t_real @ t_fake) < ANCHOR_MAX_COS:
            return t_real, t_fake


def fuse_cls(f_s, f_w, f_f):
    """Concatenate branch features in (spatial, wavelet, fourier) order."""
    if not (f_s.shape == f_w.shape == f_f.shape):
        raise DimensionError(f"branch shapes differ: {f_s.shape}, {f_w.shape}, {f_f.shape}")
    return nc.concat([f_s, f_w, f_f], axis=1)


def fuse_align(f_s, f_w, f_f):
    """Mean of the three branch features, L2-normalised per row."""
    return nc.l2_normalize_rows(nc.mean_of([f_s, f_w, f_f]))


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, model, meta=None):
    state = model.state_dict()
    header = {
        "format": "FD2CL",
        "version": 1,
        "model": asdict(model.cfg),
        "seed": model.seed,
        "meta": meta or {},
        "tensors": [{"name": k, "shape": list(v.shape), "dtype": "<f8"} for k, v in state.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in state.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path):
    """Return ``(header, {name: array})``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    if len(raw) < 16:
        raise FormatError("truncated header length", offset=8)
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}", offset=16) from None
    pos = 16 + hlen
    tensors = OrderedDict()
    for entry in header["tensors"]:
        if entry["dtype"] != "<f8":
            raise FormatError(f"unsupported dtype {entry['dtype']}", offset=pos)
        n = int(np.prod(entry["shape"])) * 8
        if pos + n > len(raw):
            raise FormatError(f"payload of {entry['name']} truncated", offset=pos)
        tensors[entry["name"]] = np.frombuffer(raw[pos:pos + n], dtype="<f8").reshape(entry["shape"]).copy()
        pos += n
    if pos != len(raw):
        raise FormatError("trailing bytes after last tensor", offset=pos)
    return header, tensors


def load_checkpoint(path):
    header, tensors = read_checkpoint(path)
    model = Model(ModelConfig(**header["model"]), header["seed"])
    model.load_state_dict(tensors)
    return model, header
