"""Class-aware EWC, orthogonal gradient constraint and the task-sequential loop."""
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .errors import DataError, EvaluationError, NumericalAbort, StateError
from .losses import LossBreakdown, align_loss, bce_loss, ewc_penalty, orth_loss
from .metrics import TaskMatrix, accuracy, auc, select_threshold
from .numcore import Tape
from .rng import TRAIN, Stream

log = logging.getLogger(__name__)

PROJ_NORM_FLOOR = 1e-12


@dataclass
class TrainConfig:
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    eval_batch_size: int = 64
    epochs: int = 15
    lambda_ewc: float = 22000.0
    lambda_orth: float = 0.1
    lambda_align: float = 0.5
    tau_start: float = 0.2
    tau_end: float = 0.1
    fisher_mode: str = "running-mean"
    cache_mode: str = "blend"
    use_ewc: bool = True
    use_ogc: bool = True
    use_align: bool = True
    use_freq: bool = True


# ---------------------------------------------------------------- state

@dataclass
class FisherInfo:
    real: dict
    fake: dict
    task: int
    n_tasks: int = 1


@dataclass
class GradCache:
    """Unit directions per adapter tensor name.

    In "blend" mode each entry holds one direction; in "basis" mode it holds
    an orthonormal list grown by Gram-Schmidt.
    """

    directions: dict = field(default_factory=dict)
    count: int = 0
    mode: str = "blend"

    def __bool__(self):
        return bool(self.directions)

    def primary(self):
        return {k: v[0] for k, v in self.directions.items()}


@dataclass
class ContinualState:
    fisher: FisherInfo | None = None
    snapshot: dict | None = None
    cache: GradCache = field(default_factory=GradCache)
    completed: int = 0


def ewc_schedule(epoch, epochs, base):
    """Linear ramp from 0 at the first epoch of a task to ``base`` at the last."""
    if epochs <= 1:
        return float(base)
    return float(base) * epoch / (epochs - 1)


def tau_schedule(epoch, epochs, start=0.2, end=0.1):
    if epochs <= 1:
        return float(end)
    return start + (end - start) * epoch / (epochs - 1)


# ---------------------------------------------------------------- projection

def project_gradient(g, g_hist, tau):
    """Remove the component of ``g`` along unit ``g_hist`` when ``|cos| > tau``.

    Returns ``(g_tilde, fired)``. When the projection does not fire the very
    same array is returned.
    """
    if g_hist is None:
        return g, False
    gf = g.reshape(-1)
    hf = np.asarray(g_hist).reshape(-1)
    gnorm = np.sqrt(gf @ gf)
    if gnorm < PROJ_NORM_FLOOR:
        return g, False
    dot = gf @ hf
    if abs(dot) / gnorm <= tau:
        return g, False
    out = gf - dot * hf
    # one re-orthogonalisation pass guards against cancellation
    out = out - (out @ hf) * hf
    return out.reshape(g.shape), True


def project_all(grad, directions, tau):
    """Project against every cached unit direction in turn."""
    fired = False
    for h in directions:
        grad, f = project_gradient(grad, h, tau)
        fired |= f
    return grad, fired


def _unit(v):
    n = np.sqrt(np.ravel(v) @ np.ravel(v))
    return None if n < PROJ_NORM_FLOOR else np.ravel(v) / n


def update_cache(cache, task_mean_grads):
    """Fold one task's mean adapter gradients into the cache.

    Blend mode: ``g_hist <- normalize(n * g_hist + normalize(g_task))`` with n
    the number of tasks already folded in. Tensors whose task gradient is
    numerically zero are left as they are.
    """
    n = cache.count
    for name, g in task_mean_grads.items():
        u = _unit(g)
        if u is None:
            continue
        prev = cache.directions.get(name)
        if cache.mode == "basis":
            basis = list(prev or [])
            r = u.copy()
            for b in basis:
                r = r - (r @ b) * b
            r = _unit(r)
            if r is not None and r.size > len(basis):
                basis.append(r)
            cache.directions[name] = basis
        elif prev is None:
            cache.directions[name] = [u]
        else:
            blended = _unit(n * prev[0] + u)
            cache.directions[name] = [prev[0] if blended is None else blended]
    cache.count = n + 1
    return cache


# ---------------------------------------------------------------- Fisher

def batch_slices(n, size):
    """Contiguous slices of at most ``size`` items, never leaving a 1-item tail."""
    if n < 2:
        raise DataError("need at least 2 samples per batch")
    bounds = list(range(0, n, size)) + [n]
    if bounds[-1] - bounds[-2] == 1 and len(bounds) > 2:
        bounds.pop(-2)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def estimate_fisher(model, images, labels, class_label, batch_size=64, with_freq=True):
    """Mean squared per-sample score of ``log p(y=class_label | x)`` on the EWC set.

    The forward pass is batched (alignment statistics need a batch); each
    sample's gradient is then pulled out with its own backward pass, so the
    result is the mean of per-sample squared gradients.
    """
    labels = np.asarray(labels)
    if not np.any(labels == class_label):
        raise DataError(f"no samples of class {class_label}")
    params = model.ewc_params()
    acc = [np.zeros_like(p.data) for p in params]
    count = 0
    for sl in batch_slices(len(labels), batch_size):
        yb = labels[sl]
        if not np.any(yb == class_label):
            continue
        with Tape() as tape:
            logits, _ = model.forward(images[sl], train=False, with_freq=with_freq)
            sign = 1.0 if class_label == 1 else -1.0
            logp = nc.log_sigmoid(nc.scale(logits, sign))
        for i in np.flatnonzero(yb == class_label):
            seed = np.zeros(len(yb))
            seed[i] = 1.0
            for a, g in zip(acc, tape.gradient(logp, params, seed=seed)):
                a += g * g
            count += 1
    return {p.name: a / count for p, a in zip(params, acc)}


def accumulate_fisher(state, new_real, new_fake, mode="running-mean"):
    """Running elementwise mean over completed tasks (or keep only the latest)."""
    if state.fisher is None or mode == "latest-only":
        k = 0 if state.fisher is None else state.fisher.n_tasks
        state.fisher = FisherInfo(dict(new_real), dict(new_fake), task=state.completed, n_tasks=k + 1)
        return state
    old = state.fisher
    if set(old.real) != set(new_real) or set(old.fake) != set(new_fake):
        raise StateError("Fisher index sets differ between tasks")
    k = old.n_tasks
    real = {n: (k * old.real[n] + new_real[n]) / (k + 1) for n in old.real}
    fake = {n: (k * old.fake[n] + new_fake[n]) / (k + 1) for n in old.fake}
    state.fisher = FisherInfo(real, fake, task=state.completed, n_tasks=k + 1)
    return state


def take_snapshot(model):
    snap = {}
    for p in model.ewc_params():
        arr = p.data.copy()
        arr.flags.writeable = False
        snap[p.name] = arr
    return snap


# ---------------------------------------------------------------- optimiser

class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


# ---------------------------------------------------------------- evaluation

def predict(model, images, batch_size=64, with_freq=True):
    """Logits for ``images`` in storage order (eval mode, fixed batching)."""
    out = np.empty(len(images))
    for sl in batch_slices(len(images), batch_size):
        logits, _ = model.forward(images[sl], train=False, with_freq=with_freq)
        out[sl] = logits.data
    return out


# ---------------------------------------------------------------- training

@dataclass
class TaskReport:
    task: str
    position: int
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = 0.0
    threshold: float = 0.0
    seen_accuracy: dict = field(default_factory=dict)
    projections_fired: int = 0
    projections_checked: int = 0

    def as_dict(self):
        return asdict(self)


def _params_copy(params):
    return [p.data.copy() for p in params]


def _restore(params, arrays):
    for p, a in zip(params, arrays):
        p.data = a.copy()


def train_task(model, cstate, task, cfg, position, log_rows=None):
    """Train on one task, then consolidate (Fisher, snapshot, gradient cache).

    ``task`` is a :class:`~fd2cl.synthdata.Dataset`. Returns a TaskReport.
    """
    x_tr, y_tr = task.split("train")
    x_va, y_va = task.split("val")
    stream = Stream(cfg.seed, TRAIN, position)
    adapters = model.adapter_params()
    ewc_set = model.ewc_params()
    trainable = adapters + ewc_set
    opt = Adam(trainable, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)

    ewc_on = cfg.use_ewc and cstate.snapshot is not None
    ogc_on = cfg.use_ogc and bool(cstate.cache)
    anchors = model.anchors()
    report = TaskReport(task=task.spec.name, position=position)
    grad_sum = {p.name: np.zeros_like(p.data) for p in adapters}
    n_steps = 0
    prev_adapter_grads = None
    best = None
    best_key = None

    for epoch in range(cfg.epochs):
        lam_ewc = ewc_schedule(epoch, cfg.epochs, cfg.lambda_ewc) if ewc_on else 0.0
        lam_orth = cfg.lambda_orth if ogc_on else 0.0
        lam_align = cfg.lambda_align if cfg.use_align else 0.0
        tau = tau_schedule(epoch, cfg.epochs, cfg.tau_start, cfg.tau_end)
        sums = dict(bce=0.0, ewc=0.0, orth=0.0, align=0.0, total=0.0)
        order = stream.permutation(len(y_tr))
        slices = batch_slices(len(y_tr), cfg.batch_size)
        for b, sl in enumerate(slices):
            idx = order[sl]
            xb, yb = x_tr[idx], y_tr[idx]
            mask = model.draw_mask(stream, len(yb))
            try:
                with Tape() as tape:
                    logits, f_align = model.forward(xb, train=True, mask=mask, with_freq=cfg.use_freq)
                    l_bce = bce_loss(logits, yb)
                    total = l_bce
                    l_align = align_loss(f_align, yb, anchors)
                    if lam_align:
                        total = nc.add(total, nc.scale(l_align, lam_align))
                    if ewc_on:
                        l_ewc = ewc_penalty(ewc_set, cstate.snapshot, cstate.fisher.real, cstate.fisher.fake)
                        if lam_ewc:
                            total = nc.add(total, nc.scale(l_ewc, lam_ewc))
                        ewc_val = l_ewc.item()
                    else:
                        ewc_val = 0.0
                    # the orthogonality term is built from the previous step's
                    # gradients, which are constants here
                    orth_val = orth_loss(prev_adapter_grads, cstate.cache.primary()) \
                        if ogc_on and prev_adapter_grads is not None else 0.0
                    if lam_orth:
                        total = nc.add(total, nc.Tensor(np.array([lam_orth * orth_val])))
                grads = tape.gradient(total, trainable)
            except EvaluationError as exc:
                raise NumericalAbort(f"non-finite value in task {task.spec.name} epoch {epoch} batch {b}: {exc}",
                                     task=task.spec.name, epoch=epoch, batch_index=b) from None
            if not all(np.all(np.isfinite(g)) for g in grads):
                raise NumericalAbort(f"non-finite gradient in task {task.spec.name} epoch {epoch} batch {b}",
                                     task=task.spec.name, epoch=epoch, batch_index=b)

            parts = LossBreakdown(l_bce.item(), ewc_val, orth_val, l_align.item(), total.item(),
                                  lam_ewc, lam_orth, lam_align)
            parts.check()

            raw = {}
            for i, p in enumerate(adapters):
                raw[p.name] = grads[i]
                grad_sum[p.name] += grads[i]
                if ogc_on:
                    dirs = cstate.cache.directions.get(p.name)
                    if dirs:
                        grads[i], fired = project_all(grads[i], dirs, tau)
                        report.projections_checked += 1
                        report.projections_fired += int(fired)
            prev_adapter_grads = raw
            n_steps += 1
            opt.step(grads)

            for k in sums:
                sums[k] += getattr(parts, k)
            if log_rows is not None:
                log_rows.append(dict(step=n_steps, task=task.spec.name, epoch=epoch, bce=parts.bce,
                                     ewc=parts.ewc, orth=parts.orth, align=parts.align, total=parts.total))

        val_logits = predict(model, x_va, cfg.eval_batch_size, cfg.use_freq)
        thr = select_threshold(val_logits, y_va)
        val_acc = accuracy(val_logits, y_va, thr)
        val_bce = nc.bce_with_logits(val_logits, y_va).item()
        row = {k: v / len(slices) for k, v in sums.items()}
        row.update(epoch=epoch, lambda_ewc=lam_ewc, tau=tau, val_acc=val_acc, val_bce=val_bce)
        report.epochs.append(row)
        key = val_acc
        if best_key is None or key > best_key:
            best_key = key
            best = _params_copy(trainable)
            report.best_epoch = epoch
            report.best_val_acc = val_acc
        log.debug("task %s epoch %d: total %.4f val_acc %.3f", task.spec.name, epoch, row["total"], val_acc)

    _restore(trainable, best)
    report.threshold = select_threshold(predict(model, x_va, cfg.eval_batch_size, cfg.use_freq), y_va)

    if cfg.use_ewc:
        f_real = estimate_fisher(model, x_tr, y_tr, 0, cfg.eval_batch_size, cfg.use_freq)
        f_fake = estimate_fisher(model, x_tr, y_tr, 1, cfg.eval_batch_size, cfg.use_freq)
        accumulate_fisher(cstate, f_real, f_fake, cfg.fisher_mode)
        cstate.snapshot = take_snapshot(model)
    if cfg.use_ogc:
        cstate.cache.mode = cfg.cache_mode
        update_cache(cstate.cache, {k: v / max(n_steps, 1) for k, v in grad_sum.items()})
    cstate.completed += 1
    return report


@dataclass
class ProtocolResult:
    matrix: TaskMatrix
    reports: list
    thresholds: list
    final_auc: list
    final_logits: list


def run_protocol(model, tasks, cfg, log_rows=None):
    """Train ``tasks`` in order; after each, score every task seen so far.

    Thresholds are fixed on each task's validation split right after it is
    learned and reused for every later evaluation of that task.
    """
    if len(tasks) < 2:
        raise DataError("a protocol needs at least 2 tasks")
    cstate = ContinualState(cache=GradCache(mode=cfg.cache_mode))
    matrix = TaskMatrix([t.spec.name for t in tasks])
    reports, thresholds = [], []
    census = model.census()
    for t, task in enumerate(tasks):
        rep = train_task(model, cstate, task, cfg, t, log_rows)
        thresholds.append(rep.threshold)
        row = []
        for i in range(t + 1):
            x_te, y_te = tasks[i].split("test")
            acc = accuracy(predict(model, x_te, cfg.eval_batch_size, cfg.use_freq), y_te, thresholds[i])
            row.append(acc)
            rep.seen_accuracy[tasks[i].spec.name] = acc
        matrix.add_row(row)
        reports.append(rep)
        if model.census() != census:
            raise StateError("parameter census changed during the protocol")
        log.info("after %s: %s", task.spec.name, " ".join(f"{a:.3f}" for a in row))
    final_logits, final_auc = [], []
    for task in tasks:
        x_te, y_te = task.split("test")
        s = predict(model, x_te, cfg.eval_batch_size, cfg.use_freq)
        final_logits.append(s)
        final_auc.append(auc(s, y_te))
    return ProtocolResult(matrix, reports, thresholds, final_auc, final_logits)
