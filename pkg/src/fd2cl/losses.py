"""Training objective: BCE + EWC + orthogonality + anchor alignment."""
from dataclasses import asdict, dataclass

import numpy as np

from . import numcore as nc
from .errors import ContractError, StateError
from .numcore import Tensor

UNIT_TOL = 1e-6


@dataclass
class LossBreakdown:
    bce: float
    ewc: float
    orth: float
    align: float
    total: float
    lambda_ewc: float
    lambda_orth: float
    lambda_align: float

    def composed(self):
        return self.bce + self.lambda_ewc * self.ewc + self.lambda_orth * self.orth + self.lambda_align * self.align

    def check(self, tol=1e-9):
        if abs(self.total - self.composed()) > tol * max(1.0, abs(self.total)):
            raise StateError(f"loss composition broken: total={self.total!r} composed={self.composed()!r}")

    def as_dict(self):
        return asdict(self)


def bce_loss(logits, labels):
    return nc.bce_with_logits(logits, labels)


def ewc_penalty(params, snapshot, f_real, f_fake):
    """``sum_i (F_real[i] + F_fake[i]) * (theta_i - theta*_i)**2`` over named tensors.

    ``params`` is a list of named Tensors; ``snapshot``, ``f_real`` and
    ``f_fake`` map the same names to arrays of the same shapes.
    """
    names = [p.name for p in params]
    for label, table in (("snapshot", snapshot), ("F_real", f_real), ("F_fake", f_fake)):
        if set(table) != set(names):
            raise StateError(f"{label} covers {sorted(table)}, parameters are {sorted(names)}")
    total = None
    for p in params:
        weight = f_real[p.name] + f_fake[p.name]
        if np.shape(weight) != p.shape or np.shape(snapshot[p.name]) != p.shape:
            raise StateError(f"shape mismatch for {p.name}")
        term = nc.weighted_sq_dist(p, snapshot[p.name], weight)
        total = term if total is None else nc.add(total, term)
    return total if total is not None else Tensor(np.zeros(1))


def align_loss(f_align, labels, anchors):
    """``1 - mean_i <f_i, t_{y_i}>`` for unit rows ``f_align`` and anchors ``(t_real, t_fake)``."""
    norms = np.sqrt(np.sum(f_align.data ** 2, axis=1))
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ContractError("align_loss needs unit-norm rows")
    t_real, t_fake = anchors
    y = np.asarray(labels).reshape(-1)
    targets = np.where(y[:, None] == 1, t_fake[None, :], t_real[None, :])
    return nc.affine(nc.mean_all(nc.row_dot(f_align, targets)), -1.0, 1.0)


def cos2(g, h):
    g = np.ravel(g)
    h = np.ravel(h)
    gg = float(g @ g)
    hh = float(h @ h)
    if gg == 0.0 or hh == 0.0:
        return 0.0
    d = float(g @ h)
    return d * d / (gg * hh)


def orth_loss(current_grads, cache):
    """Mean squared cosine between adapter gradients and the cached directions.

    ``current_grads`` maps tensor names to gradients (held constant by the
    caller); ``cache`` maps names to cached unit directions. Names absent from
    the cache are skipped; an empty cache gives 0.
    """
    vals = [cos2(current_grads[name], direction)
            for name, direction in cache.items() if name in current_grads]
    return float(np.mean(vals)) if vals else 0.0
