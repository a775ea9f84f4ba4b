"""Spatial, wavelet and Fourier input views, and their batch alignment.

Images are ``(..., H, W)`` arrays; a batch is ``B x C x H x W``. The wavelet
view is a fixed linear projection (no parameters). The Fourier view carries a
learnable phase gate, so it is built as a recorded tape operation.
"""
import enum
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DimensionError
from .numcore import Tensor, as_tensor, emit

ALIGN_EPS = 1e-8


class Domain(str, enum.Enum):
    SPATIAL = "spatial"
    WAVELET = "wavelet"
    FOURIER = "fourier"


@dataclass
class ImageView:
    pixels: Tensor
    domain: Domain


def _check_even(x):
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise DimensionError(f"Haar transform needs even height and width, got {h}x{w}")


def haar_dwt2(img):
    """One level of the orthonormal 2-D Haar transform over the last two axes.

    Returns ``(LL, LH, HL, HH)``, each half the size along both axes.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim < 2:
        raise DimensionError("haar_dwt2 needs at least 2 dimensions")
    _check_even(img)
    return kernels.haar_forward(img)


def haar_idwt2(ll, lh, hl, hh):
    return kernels.haar_inverse(ll, lh, hl, hh)


def wavelet_highfreq_view(img):
    """Reconstruct ``img`` from its detail bands only (LL zeroed)."""
    ll, lh, hl, hh = haar_dwt2(img)
    return haar_idwt2(np.zeros_like(ll), lh, hl, hh)


class PhaseGate:
    """Learnable additive phase shift ``scale * tanh(gain)`` per rfft frequency.

    One ``H x (W//2 + 1)`` plane is shared by every channel. On the columns that
    hold their own conjugates (DC and, for even W, Nyquist) the shift is
    antisymmetrised over ``u -> -u`` so the modulated spectrum stays Hermitian
    and the reconstruction stays real; this pins the DC phase shift to 0.
    """

    def __init__(self, height, width, scale=0.1, dtype=np.float64):
        self.height = height
        self.width = width
        self.gain = Tensor(np.zeros((height, width // 2 + 1), dtype=dtype), requires_grad=True, name="gate.gain")
        self.scale = Tensor(np.array([scale], dtype=dtype), requires_grad=True, name="gate.scale")

    def parameters(self):
        return [self.gain, self.scale]

    def _self_conjugate_columns(self):
        cols = [0]
        if self.width % 2 == 0:
            cols.append(self.width // 2)
        return cols

    def _antisym(self, plane):
        out = plane.copy()
        mirror = (-np.arange(self.height)) % self.height
        for v in self._self_conjugate_columns():
            out[:, v] = 0.5 * (plane[:, v] - plane[mirror, v])
        return out

    def phase_shift(self):
        """The effective per-frequency shift added to the phase."""
        return self._antisym(self.scale.data[0] * np.tanh(self.gain.data))


def fourier_phase_view(img, gate):
    """Phase-modulated reconstruction: irfft2(|X| exp(i(phase + shift))).

    ``img`` is treated as data (no gradient flows to it); gradients flow to
    the gate's ``gain`` and ``scale``.
    """
    x = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float64)
    h, w = x.shape[-2:]
    if (h, w) != (gate.height, gate.width):
        raise DimensionError(f"gate is {gate.height}x{gate.width}, image is {h}x{w}")
    th = np.tanh(gate.gain.data)
    s = gate.scale.data[0]
    shift = gate._antisym(s * th)
    spec = np.fft.rfft2(x)
    rotated = spec * np.exp(1j * shift)
    out = np.fft.irfft2(rotated, s=(h, w))

    weight = np.full(shift.shape, 2.0)
    weight[:, gate._self_conjugate_columns()] = 1.0

    def backward(g):
        gspec = np.fft.rfft2(g)
        per = -np.imag(rotated * np.conj(gspec))
        q = per.reshape(-1, *shift.shape).sum(axis=0) * weight / (h * w)
        g_raw = gate._antisym(q)  # the antisymmetriser is its own adjoint
        return g_raw * s * (1.0 - th * th), np.array([np.sum(g_raw * th)])

    return emit(out, (gate.gain, gate.scale), backward)


def hermitian_residual(img, gate):
    """Largest imaginary part of the full complex inverse FFT of the modulated spectrum.

    Diagnostic for the real-output guarantee; the fast path discards this part.
    """
    x = np.asarray(img, dtype=np.float64)
    h, w = x.shape[-2:]
    full = np.fft.fft2(x) * np.exp(1j * _full_plane(gate.phase_shift(), h, w))
    return float(np.max(np.abs(np.fft.ifft2(full).imag)))


def _full_plane(half, h, w):
    full = np.zeros((h, w))
    wr = w // 2 + 1
    full[:, :wr] = half
    u = (-np.arange(h)) % h
    for v in range(wr, w):
        full[:, v] = -half[u, w - v]
    return full


def align_to_spatial(z, s, eps=ALIGN_EPS):
    """Shift and rescale ``z`` so its batch mean/std equal those of ``s``.

    Statistics are scalars over every element of the batch (population std)
    and act as constants in the backward pass. When ``std(z) <= eps`` only the
    mean shift is applied.
    """
    z = as_tensor(z)
    s = s.data if isinstance(s, Tensor) else np.asarray(s)
    if z.shape[0] < 2 or s.shape[0] < 2:
        raise DimensionError("alignment needs a batch of at least 2 samples")
    mu_z, sd_z = z.data.mean(), z.data.std()
    mu_s, sd_s = s.mean(), s.std()
    if sd_z <= eps:
        return emit(z.data - mu_z + mu_s, (z,), lambda g: (g,))
    ratio = sd_s / sd_z
    return emit((z.data - mu_z) / sd_z * sd_s + mu_s, (z,), lambda g: (g * ratio,))


def make_views(batch, gate, with_freq=True):
    """Return ``(xS, xW', xF')`` for a ``B x C x H x W`` batch.

    With ``with_freq=False`` the two frequency views are skipped and returned
    as None.
    """
    batch = np.asarray(batch.data if isinstance(batch, Tensor) else batch, dtype=np.float64)
    if batch.shape[0] < 2:
        raise DimensionError("make_views needs a batch of at least 2 samples")
    xs = Tensor(batch)
    if not with_freq:
        return xs, None, None
    xw = align_to_spatial(Tensor(wavelet_highfreq_view(batch)), batch)
    xf = align_to_spatial(fourier_phase_view(batch, gate), batch)
    return xs, xw, xf
