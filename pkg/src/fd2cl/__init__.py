"""Desk-scale continual deepfake detection with multi-domain features.

Numpy reference implementation: a small autodiff core, spatial/wavelet/Fourier
views, a LoRA-adapted frozen encoder, class-aware EWC with an orthogonal
gradient constraint, synthetic forgery task families and continual metrics.
"""

__version__ = "0.1.0"
