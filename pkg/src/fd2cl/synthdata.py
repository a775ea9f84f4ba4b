"""Seeded synthetic face-like images, forgery artifacts and perturbations.

Real images are a smooth radial luminance field, a few Gaussian "identity"
blobs and low-amplitude bilinear noise. Fake images are the real image of the
same index with one artifact family applied. All generators are pure
functions of ``(spec, index)``.
"""
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigError, DataError, FormatError
from .rng import FAKE, PERTURB, REAL, RNG_ID, Stream

DATA_MAGIC = b"FD2DS\x00\x00\x01"
IMAGE_SHAPE = (3, 32, 32)
SPLITS = ("train", "val", "test")
ARTIFACT_KINDS = ("HighFreqCheckerboard", "PhaseJitter", "BlendBoundary", "SpectralSlope")
PERTURB_KINDS = ("BlockDropout", "GridShuffle", "GaussianNoise", "MedianBlur")
PERTURB_LEVELS = {
    "BlockDropout": (0.1, 0.2, 0.3, 0.4),
    "GridShuffle": (2, 4, 8, 12),
    "GaussianNoise": (0.01, 0.02, 0.04, 0.08),
    "MedianBlur": (3, 5, 7, 9),
}
DROPOUT_BLOCK = 4
# salt separating the donor identity of a blend from the real sample itself
_DONOR_SALT = 0x5A5A5A5A
# counter slot reserved for task-level draws (fingerprints, tints, box sizes)
_TASK_SLOT = 1 << 62


@dataclass
class RealSpec:
    seed: int = 1000
    blobs: int = 5
    smoothness: float = 2.0  # noise lattice has round(8 / smoothness) cells per side


@dataclass
class ArtifactSpec:
    kind: str = "HighFreqCheckerboard"
    strength: float = 0.1


@dataclass
class TaskSpec:
    task_id: int = 0
    name: str = "task0"
    real: RealSpec = field(default_factory=RealSpec)
    artifact: ArtifactSpec = field(default_factory=ArtifactSpec)
    counts: dict = field(default_factory=lambda: {"train": 256, "val": 64, "test": 128})
    fake_budget: int | None = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.real, dict):
            self.real = RealSpec(**self.real)
        if isinstance(self.artifact, dict):
            self.artifact = ArtifactSpec(**self.artifact)
        if self.artifact.kind not in ARTIFACT_KINDS:
            raise ConfigError(f"artifact.kind: unknown artifact kind {self.artifact.kind!r}")
        for name in SPLITS:
            if name not in self.counts:
                raise ConfigError(f"counts.{name} missing")

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------- helpers

def _coords(h, w):
    yy, xx = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    return yy, xx


def _bilinear_matrix(n_out, n_in):
    """``n_out x n_in`` interpolation matrix mapping lattice values onto pixel centres."""
    pos = (np.arange(n_out) + 0.5) / n_out * (n_in - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] = frac
    return m


def _smooth_field(stream, channels, h, w, cells):
    grid = stream.normal((channels, cells + 1, cells + 1))
    my = _bilinear_matrix(h, cells + 1)
    mx = _bilinear_matrix(w, cells + 1)
    return np.einsum("ij,cjk,lk->cil", my, grid, mx)


def highfreq_energy_fraction(img):
    """Share of (mean-removed) spectral energy beyond half the Nyquist frequency."""
    img = np.asarray(img, dtype=np.float64)
    x = img - img.mean(axis=(-2, -1), keepdims=True)
    spec = np.abs(np.fft.fft2(x)) ** 2
    h, w = img.shape[-2:]
    fy = np.abs(np.fft.fftfreq(h))[:, None]
    fx = np.abs(np.fft.fftfreq(w))[None, :]
    mask = np.maximum(fy, fx) > 0.25
    total = spec.sum()
    return float(spec[..., mask].sum() / total) if total > 0 else 0.0


# ---------------------------------------------------------------- generators

def gen_real(spec, index, shape=IMAGE_SHAPE):
    c, h, w = shape
    rs = Stream(spec.real.seed, REAL, index)
    yy, xx = _coords(h, w)
    cy, cx = rs.range(0.35, 0.65, 2)
    base = rs.range(0.45, 0.65)
    fall = rs.range(0.6, 1.2)
    lum = base - 0.5 * fall * ((yy - cy) ** 2 + (xx - cx) ** 2)
    tone = np.array([rs.range(0.9, 1.1), rs.range(0.75, 0.9), rs.range(0.6, 0.8)])[:c]
    img = lum[None] * tone[:, None, None]
    for _ in range(spec.real.blobs):
        by, bx = rs.range(0.2, 0.8, 2)
        sigma = rs.range(0.05, 0.12)
        amp = rs.range(-0.2, 0.2)
        chroma = rs.range(0.7, 1.3, c)
        bump = np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2.0 * sigma * sigma))
        img = img + amp * chroma[:, None, None] * bump[None]
    cells = max(2, int(round(8.0 / spec.real.smoothness)))
    img = img + 0.03 * _smooth_field(rs, c, h, w, cells)
    return np.clip(img, 0.0, 1.0)


def _phase_field(stream, h, w, strength):
    """Hermitian-consistent random phase offsets on the rfft2 grid.

    Bins that are their own conjugate (DC and the Nyquist row/column) hold
    real coefficients, so their offset is pinned to 0.
    """
    noise = stream.normal((h, w))
    theta = strength * np.angle(np.fft.rfft2(noise))
    rows = [0] + ([h // 2] if h % 2 == 0 else [])
    cols = [0] + ([w // 2] if w % 2 == 0 else [])
    theta[np.ix_(rows, cols)] = 0.0
    return theta


def _band_fingerprint(stream, h, w, lo, hi):
    """Unit-RMS real pattern whose energy sits in the radial band ``[lo, hi)`` cycles/pixel."""
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    radius = np.sqrt(fy ** 2 + fx ** 2)
    band = (radius >= lo) & (radius < hi)
    coef = stream.normal((h, w // 2 + 1)) + 1j * stream.normal((h, w // 2 + 1))
    pattern = np.fft.irfft2(np.where(band, coef * radius, 0.0), s=(h, w))
    return pattern / np.sqrt(np.mean(pattern ** 2))


def fingerprint(spec, shape=IMAGE_SHAPE):
    """Task-level trace shared by every fake of the task (C x H x W, or None)."""
    c, h, w = shape
    kind = spec.artifact.kind
    ts = Stream(spec.seed, FAKE, _TASK_SLOT)
    gains = ts.range(0.7, 1.3, c)
    if kind == "HighFreqCheckerboard":
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        mix = ts.range(0.0, 0.5)
        pattern = (1.0 - mix) * (-1.0) ** (ii + jj) + mix * (-1.0) ** ii
    elif kind == "SpectralSlope":
        pattern = _band_fingerprint(ts, h, w, 0.15, 0.35)
    else:
        return None
    return gains[:, None, None] * pattern[None]


def gen_fake(spec, index, shape=IMAGE_SHAPE):
    """The real image of ``index`` carrying the task's artifact.

    HighFreqCheckerboard and SpectralSlope add a task-level fingerprint (a
    period-2 up-sampling grid, resp. a mid-band pattern) at a per-sample
    amplitude; PhaseJitter shifts the Fourier phase by a task-level field plus
    a smaller per-sample one; BlendBoundary pastes a tinted, offset donor face
    into a box around the face centre.
    """
    kind = spec.artifact.kind
    s = float(spec.artifact.strength)
    if kind not in ARTIFACT_KINDS:
        raise ConfigError(f"unknown artifact kind {kind!r}")
    real = gen_real(spec, index, shape)
    if s == 0.0:
        return real
    c, h, w = shape
    rs = Stream(spec.seed, FAKE, index)

    if kind in ("HighFreqCheckerboard", "SpectralSlope"):
        amp = s * rs.range(0.75, 1.25)
        out = real + amp * fingerprint(spec, shape)
    elif kind == "PhaseJitter":
        theta = _phase_field(Stream(spec.seed, FAKE, _TASK_SLOT), h, w, s) + _phase_field(rs, h, w, 0.25 * s)
        out = np.fft.irfft2(np.fft.rfft2(real) * np.exp(1j * theta)[None], s=(h, w))
    else:  # BlendBoundary
        y0, x0, y1, x1 = blend_box(spec, index, shape)
        donor = gen_real(spec, index ^ _DONOR_SALT, shape)
        ts = Stream(spec.seed, FAKE, _TASK_SLOT)
        tint = 1.0 + ts.range(-0.25, 0.25, c) + rs.range(-0.05, 0.05, c)
        offset = np.where(ts.uniform(c) < 0.5, -1.0, 1.0) * ts.range(0.06, 0.12, c)
        donor = np.clip(donor * tint[:, None, None] + offset[:, None, None], 0.0, 1.0)
        out = real.copy()
        out[:, y0:y1, x0:x1] = (1.0 - s) * real[:, y0:y1, x0:x1] + s * donor[:, y0:y1, x0:x1]
        return out
    return np.clip(out, 0.0, 1.0)


def blend_box(spec, index, shape=IMAGE_SHAPE):
    """``(y0, x0, y1, x1)`` of the blended region of a BlendBoundary fake.

    The box size is fixed per task; its position jitters by up to 2 pixels
    around the image centre.
    """
    _, h, w = shape
    ts = Stream(spec.seed, FAKE, _TASK_SLOT)
    bh = int(ts.integers(h // 4) + h // 3)
    bw = int(ts.integers(w // 4) + w // 3)
    rs = Stream(spec.seed, FAKE, index ^ _DONOR_SALT)
    y0 = (h - bh) // 2 + int(rs.integers(5)) - 2
    x0 = (w - bw) // 2 + int(rs.integers(5)) - 2
    return y0, x0, y0 + bh, x0 + bw


# ---------------------------------------------------------------- perturbations

def perturb(image, kind, level, seed):
    """Apply perturbation ``kind`` at intensity ``level`` (0 = untouched)."""
    if kind not in PERTURB_KINDS:
        raise ConfigError(f"unknown perturbation {kind!r}")
    if level not in range(5):
        raise ConfigError(f"perturbation level must be 0..4, got {level}")
    img = np.array(image, dtype=np.float64)
    if level == 0:
        return img
    param = PERTURB_LEVELS[kind][level - 1]
    rs = Stream(seed, PERTURB, PERTURB_KINDS.index(kind) * 16 + level)
    c, h, w = img.shape
    if kind == "BlockDropout":
        gh, gw = h // DROPOUT_BLOCK, w // DROPOUT_BLOCK
        n_drop = int(round(param * gh * gw))
        for b in rs.permutation(gh * gw)[:n_drop]:
            by, bx = divmod(int(b), gw)
            img[:, by * DROPOUT_BLOCK:(by + 1) * DROPOUT_BLOCK, bx * DROPOUT_BLOCK:(bx + 1) * DROPOUT_BLOCK] = 0.0
        return img
    if kind == "GridShuffle":
        return _grid_shuffle(img, int(param), rs)
    if kind == "GaussianNoise":
        return np.clip(img + param * rs.normal(img.shape), 0.0, 1.0)
    return kernels.median_filter(img, int(param))


def _grid_shuffle(img, p, rs):
    # sides not divisible by p are edge-padded first and cropped back afterwards
    c, h, w = img.shape
    ph, pw = -(-h // p) * p, -(-w // p) * p
    padded = np.pad(img, ((0, 0), (0, ph - h), (0, pw - w)), mode="edge")
    gh, gw = ph // p, pw // p
    patches = padded.reshape(c, gh, p, gw, p).transpose(1, 3, 0, 2, 4).reshape(gh * gw, c, p, p)
    patches = patches[rs.permutation(gh * gw)]
    out = patches.reshape(gh, gw, c, p, p).transpose(2, 0, 3, 1, 4).reshape(c, ph, pw)
    return out[:, :h, :w].copy()


# ---------------------------------------------------------------- datasets

@dataclass
class Dataset:
    spec: TaskSpec
    images: np.ndarray  # N x C x H x W float32
    labels: np.ndarray  # uint8, 1 = fake
    splits: np.ndarray  # uint8, index into SPLITS

    def split(self, name):
        sel = self.splits == SPLITS.index(name)
        return self.images[sel].astype(np.float64), self.labels[sel].astype(np.int64)

    def __len__(self):
        return int(self.labels.size)


def sample_plan(spec):
    """``(index, label, split)`` for every kept sample, in storage order.

    Sample indices run consecutively over the train, val and test ranges and
    alternate real/fake. Fakes in the train split beyond ``fake_budget`` are
    dropped.
    """
    plan = []
    start = 0
    for split_id, name in enumerate(SPLITS):
        n_fake_kept = 0
        for k in range(start, start + int(spec.counts[name])):
            label = k % 2
            if label == 1 and name == "train" and spec.fake_budget is not None:
                if n_fake_kept >= spec.fake_budget:
                    continue
                n_fake_kept += 1
            plan.append((k, label, split_id))
        start += int(spec.counts[name])
    return plan


def generate_dataset(spec, shape=IMAGE_SHAPE):
    plan = sample_plan(spec)
    images = np.empty((len(plan),) + tuple(shape), dtype=np.float32)
    for n, (k, label, _) in enumerate(plan):
        images[n] = gen_fake(spec, k, shape) if label else gen_real(spec, k, shape)
    labels = np.array([p[1] for p in plan], dtype=np.uint8)
    splits = np.array([p[2] for p in plan], dtype=np.uint8)
    return Dataset(spec, images, labels, splits)


def _record_dtype(shape):
    return np.dtype([("label", "u1"), ("split", "u1"), ("pixels", "<f4", (int(np.prod(shape)),))])


def _counts(ds):
    out = {}
    for i, name in enumerate(SPLITS):
        sel = ds.splits == i
        out[name] = {"real": int(np.sum(ds.labels[sel] == 0)), "fake": int(np.sum(ds.labels[sel] == 1))}
    return out


def write_dataset(ds, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shape = ds.images.shape[1:]
    rec = np.empty(len(ds), dtype=_record_dtype(shape))
    rec["label"] = ds.labels
    rec["split"] = ds.splits
    rec["pixels"] = ds.images.reshape(len(ds), -1)
    payload = rec.tobytes()
    with open(directory / "data.bin", "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(struct.pack("<I", len(ds)))
        fh.write(payload)
    manifest = {
        "format": "FD2DS",
        "version": 1,
        "spec": ds.spec.to_dict(),
        "image_shape": list(shape),
        "n_samples": len(ds),
        "counts": _counts(ds),
        "rng": RNG_ID,
        "crc32": zlib.crc32(payload),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_dataset(directory):
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest.json unreadable: {exc.msg}", offset=exc.pos) from None
    raw = (directory / "data.bin").read_bytes()
    if raw[:8] != DATA_MAGIC:
        raise FormatError("bad dataset magic", offset=0)
    if len(raw) < 12:
        raise FormatError("truncated sample count", offset=8)
    (count,) = struct.unpack("<I", raw[8:12])
    if count != manifest.get("n_samples"):
        raise FormatError(f"data.bin holds {count} samples, manifest says {manifest.get('n_samples')}", offset=8)
    shape = tuple(manifest["image_shape"])
    dtype = _record_dtype(shape)
    expected = 12 + count * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(f"data.bin is {len(raw)} bytes, expected {expected}", offset=min(len(raw), expected))
    payload = raw[12:]
    if zlib.crc32(payload) != manifest.get("crc32"):
        raise FormatError("payload CRC32 mismatch", offset=12)
    rec = np.frombuffer(payload, dtype=dtype)
    bad = np.flatnonzero((rec["label"] > 1) | (rec["split"] > 2))
    if bad.size:
        raise FormatError(f"invalid label/split in record {bad[0]}", offset=12 + int(bad[0]) * dtype.itemsize)
    ds = Dataset(TaskSpec(**manifest["spec"]), rec["pixels"].reshape((count,) + shape).copy(),
                 rec["label"].copy(), rec["split"].copy())
    if _counts(ds) != manifest.get("counts"):
        raise FormatError("per-split counts disagree with manifest", offset=12)
    return ds


def require_range(images):
    if images.min() < 0.0 or images.max() > 1.0:
        raise DataError("pixels outside [0, 1]")
