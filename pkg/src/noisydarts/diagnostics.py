"""Curvature, landscape and noise diagnostics for a frozen supernet.

Every function here evaluates the network with batch statistics and without
updating running buffers or parameters, so model state is unchanged.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

import noisydarts.functional as F
from .network import Context, Supernet
from .noise import SKIP_OP, NoiseInjector, NoisePolicy, NoiseStream, targets
from .tensor import Tensor, backward, flatten, no_grad, unflatten

__all__ = [
    "ConvergenceError", "HessianTrace", "LandscapeGrid", "UnbiasednessReport", "SmoothingReport",
    "FeatureHistogram", "alpha_vector", "alpha_loss", "alpha_loss_grad", "fd_hessian",
    "alpha_hessian", "max_eigenvalue", "moving_average", "HessianTracker", "landscape_scan",
    "skip_feature_rms", "verify_unbiasedness", "verify_smoothing", "feature_histogram",
    "state_checksum", "HESSIAN_STEP",
]


class ConvergenceError(RuntimeError):
    def __init__(self, msg: str, residual: float):
        super().__init__(f"{msg} (residual {residual:.3e})")
        self.residual = residual


def state_checksum(net) -> str:
    """Hash of parameters, buffers and logits (if any)."""
    import hashlib
    h = hashlib.sha256(net.checksum().encode())
    for k, a in sorted(getattr(net, "alpha", {}).items()):
        h.update(k.encode())
        h.update(a.data.tobytes())
    return h.hexdigest()


class _Frozen:
    """Turn off weight gradients for the duration of a diagnostic."""

    def __init__(self, net):
        self.params = net.params
        self.flags = {}

    def __enter__(self):
        self.flags = {k: p.requires_grad for k, p in self.params.items()}
        for p in self.params.values():
            p.requires_grad = False
        return self

    def __exit__(self, *exc):
        for k, p in self.params.items():
            p.requires_grad = self.flags[k]
            p.grad = None


# --- alpha-space evaluation -------------------------------------------------------

def alpha_vector(net: Supernet) -> np.ndarray:
    return flatten(net.alpha)


def _alpha_tensors(net: Supernet, vec: np.ndarray, requires_grad: bool) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in unflatten(vec, net.alpha).items()}


def _forward_batches(net, x, y, alpha, ctx, batch_size):
    n = len(y)
    bs = n if batch_size is None else batch_size
    for i in range(0, n, bs):
        yield net.forward(x[i:i + bs], ctx, alpha=alpha), y[i:i + bs]


def alpha_loss(net: Supernet, x: np.ndarray, y: np.ndarray, vec: np.ndarray | None = None,
               ctx: Context | None = None, batch_size: int | None = None) -> tuple[float, float]:
    """Mean loss and accuracy at logits ``vec`` (default: the net's own).

    The loss is ``net.criterion`` when the model defines one, else cross-entropy.
    """
    ctx = ctx or Context.probe()
    vec = alpha_vector(net) if vec is None else vec
    alpha = _alpha_tensors(net, vec, False)
    criterion = getattr(net, "criterion", F.cross_entropy)
    total_loss, correct = 0.0, 0
    with no_grad():
        for logits, yb in _forward_batches(net, x, y, alpha, ctx, batch_size):
            total_loss += criterion(logits, yb).item() * len(yb)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
    return total_loss / len(y), correct / len(y)


def alpha_loss_grad(net: Supernet, x: np.ndarray, y: np.ndarray, vec: np.ndarray | None = None,
                    ctx: Context | None = None) -> tuple[float, np.ndarray]:
    """Validation loss and its gradient w.r.t. the flat logit vector (weights frozen)."""
    ctx = ctx or Context.probe()
    vec = alpha_vector(net) if vec is None else vec
    alpha = _alpha_tensors(net, vec, True)
    with _Frozen(net):
        loss = net.loss(x, y, ctx, alpha)
        backward(loss)
    return loss.item(), flatten({k: t.grad for k, t in alpha.items()})


# --- Hessian ------------------------------------------------------------------------

HESSIAN_STEP = 1e-4


def fd_hessian(grad_fn: Callable[[np.ndarray], np.ndarray], x0: np.ndarray, h: float = HESSIAN_STEP) -> np.ndarray:
    """Central differences of an analytic gradient, symmetrized."""
    x0 = np.asarray(x0, dtype=np.float64)
    d = x0.size
    H = np.empty((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        row = (np.asarray(grad_fn(x0 + e)) - np.asarray(grad_fn(x0 - e))) / (2 * h)
        bad = np.flatnonzero(~np.isfinite(row))
        if bad.size:
            raise FloatingPointError(f"non-finite Hessian entry at coordinate ({i}, {bad[0]})")
        H[i] = row
    return 0.5 * (H + H.T)


def alpha_hessian(net: Supernet, x: np.ndarray, y: np.ndarray, vec: np.ndarray | None = None,
                  h: float = HESSIAN_STEP, ctx: Context | None = None) -> np.ndarray:
    """Hessian of the validation loss w.r.t. the flat logit vector.

    The default step stays below the spacing of ReLU kinks seen on small
    supernets; at 1e-3 a single kink crossing can dominate an entry.
    """
    vec = alpha_vector(net) if vec is None else np.asarray(vec, dtype=np.float64)
    return fd_hessian(lambda v: alpha_loss_grad(net, x, y, v, ctx)[1], vec, h)


def max_eigenvalue(H: np.ndarray, tol: float = 1e-8, max_iter: int = 10_000, seed: int = 0) -> float:
    """Algebraically largest eigenvalue of a symmetric matrix by shifted power iteration.

    The shift is the largest absolute row sum plus one, which makes ``H + sI``
    positive definite so power iteration converges to the top of the
    spectrum. Stops when ``||Hv - lam*v|| <= tol * max(1, ||H||)``.
    """
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError(f"expected a square matrix, got {H.shape}")
    if not np.allclose(H, H.T, rtol=0, atol=1e-12 * max(1.0, np.abs(H).max(initial=0.0))):
        raise ValueError("matrix is not symmetric")
    n = H.shape[0]
    if n == 0:
        raise ValueError("empty matrix")
    shift = np.abs(H).sum(axis=1).max() + 1.0
    scale = max(1.0, np.abs(H).sum(axis=1).max())
    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    residual = math.inf
    for _ in range(max_iter):
        hv = H @ v
        lam = float(v @ hv)
        residual = float(np.linalg.norm(hv - lam * v))
        if residual <= tol * scale:
            return lam
        w = hv + shift * v
        v = w / np.linalg.norm(w)
    raise ConvergenceError(f"power iteration did not converge in {max_iter} iterations", residual)


def moving_average(values: Sequence[float], window: int) -> list[float]:
    """Trailing mean over the last ``window`` entries (fewer at the start)."""
    if window < 1:
        raise ValueError("window must be >= 1")
    out = []
    for i in range(len(values)):
        seg = values[max(0, i - window + 1):i + 1]
        out.append(float(sum(seg) / len(seg)))
    return out


@dataclass
class HessianTrace:
    epochs: list[int] = field(default_factory=list)
    raw: list[float] = field(default_factory=list)
    window: int = 5

    def add(self, epoch: int, value: float) -> None:
        self.epochs.append(int(epoch))
        self.raw.append(float(value))

    @property
    def smoothed(self) -> list[float]:
        return moving_average(self.raw, self.window)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# window={self.window}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "lambda_max", "lambda_max_smoothed"])
        for e, r, s in zip(self.epochs, self.raw, self.smoothed):
            w.writerow([e, repr(r), repr(s)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "HessianTrace":
        window = 5
        rows = []
        for line in text.splitlines():
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                if key == "window":
                    window = int(val)
            elif line and not line.startswith("epoch"):
                rows.append(line.split(","))
        return cls([int(r[0]) for r in rows], [float(r[1]) for r in rows], window)


class HessianTracker:
    """``on_epoch_end`` hook recording the top Hessian eigenvalue on a fixed batch."""

    def __init__(self, x: np.ndarray, y: np.ndarray, window: int = 5, h: float = HESSIAN_STEP):
        self.x, self.y, self.h = x, y, h
        self.trace = HessianTrace(window=window)

    def __call__(self, epoch: int, net: Supernet, record=None) -> None:
        H = alpha_hessian(net, self.x, self.y, h=self.h)
        self.trace.add(epoch, max_eigenvalue(H))


# --- landscape ------------------------------------------------------------------------

@dataclass
class LandscapeGrid:
    d_x: np.ndarray
    d_y: np.ndarray
    step: float
    radius: int
    accuracy: np.ndarray
    loss: np.ndarray
    center: np.ndarray

    @property
    def offsets(self) -> np.ndarray:
        return np.arange(-self.radius, self.radius + 1) * self.step

    def to_csv(self, which: str = "accuracy") -> str:
        mat = self.accuracy if which == "accuracy" else self.loss
        buf = io.StringIO()
        buf.write(f"# quantity={which}\n# step={self.step!r}\n# radius={self.radius}\n")
        buf.write("# rows=d_x offsets, columns=d_y offsets\n")
        buf.write("# d_x=" + " ".join(repr(float(v)) for v in self.d_x) + "\n")
        buf.write("# d_y=" + " ".join(repr(float(v)) for v in self.d_y) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["offset"] + [repr(float(o)) for o in self.offsets])
        for o, row in zip(self.offsets, mat):
            w.writerow([repr(float(o))] + [repr(float(v)) for v in row])
        return buf.getvalue()


def _unit(v: np.ndarray, what: str) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n == 0.0 or not math.isfinite(n):
        raise ValueError(f"{what} is zero or non-finite; landscape directions undefined")
    return v / n


def _orthogonalize(v: np.ndarray, d: np.ndarray) -> np.ndarray:
    # two Gram-Schmidt passes keep |<v, d>| at round-off level
    for _ in range(2):
        v = v - (v @ d) * d
    return v


def landscape_directions(net: Supernet, x: np.ndarray, y: np.ndarray, center: np.ndarray,
                         second: str = "gradient", seed: int = 0,
                         ctx: Context | None = None) -> tuple[np.ndarray, np.ndarray]:
    _, g = alpha_loss_grad(net, x, y, center, ctx)
    d_x = _unit(g, "validation gradient at the center")
    if second == "gradient":
        half = len(y) // 2
        if half == 0:
            raise ValueError("need at least 2 validation samples")
        _, g2 = alpha_loss_grad(net, x[half:], y[half:], center, ctx)
        cand = g2
    elif second == "random":
        cand = np.random.default_rng(seed).standard_normal(center.size)
    else:
        raise ValueError(f"unknown second direction {second!r}")
    d_y = _unit(_orthogonalize(cand, d_x), "second direction after orthogonalization")
    return d_x, d_y


def landscape_scan(net: Supernet, x: np.ndarray, y: np.ndarray, radius: int = 5, step: float = 0.1,
                   center: np.ndarray | None = None, second: str = "gradient", seed: int = 0,
                   ctx: Context | None = None, batch_size: int | None = None) -> LandscapeGrid:
    """Validation accuracy and loss on a square grid in logit space.

    ``d_x`` is the normalized validation gradient at the center; ``d_y`` is
    the gradient on the second half of the validation set (or a seeded random
    vector with ``second="random"``) orthogonalized against ``d_x``.
    """
    if len(y) == 0:
        raise ValueError("validation set is empty")
    center = alpha_vector(net) if center is None else np.asarray(center, dtype=np.float64)
    d_x, d_y = landscape_directions(net, x, y, center, second, seed, ctx)
    k = 2 * radius + 1
    acc = np.empty((k, k))
    loss = np.empty((k, k))
    for a, i in enumerate(range(-radius, radius + 1)):
        for b, j in enumerate(range(-radius, radius + 1)):
            vec = center + (i * step) * d_x + (j * step) * d_y
            loss[a, b], acc[a, b] = alpha_loss(net, x, y, vec, ctx, batch_size)
    return LandscapeGrid(d_x, d_y, float(step), int(radius), acc, loss, center.copy())


# --- noise verifiers ----------------------------------------------------------------------

def skip_feature_rms(net: Supernet, x: np.ndarray, ctx: Context | None = None,
                     op_name: str = SKIP_OP) -> float:
    """Root-mean-square of the named op's outputs over all edges, one forward pass."""
    total, count = 0.0, 0

    def observe(edge, name, out):
        nonlocal total, count
        if name == op_name:
            total += float(np.vdot(out.data, out.data))
            count += out.data.size

    base = ctx or Context.probe()
    run = Context(training=base.training, update_stats=False, observe=observe)
    with no_grad():
        net.forward(x, run)
    if count == 0:
        raise ValueError(f"op {op_name!r} is not a candidate on any edge")
    return math.sqrt(total / count)


def _alpha_grad_with(net: Supernet, x, y, perturb, training: bool = True) -> np.ndarray:
    alpha = {k: Tensor(v.data, requires_grad=True) for k, v in net.alpha.items()}
    ctx = Context(training=training, update_stats=False, perturb=perturb)
    with _Frozen(net):
        loss = net.loss(x, y, ctx, alpha)
        backward(loss)
    return flatten({k: t.grad for k, t in alpha.items()})


@dataclass
class UnbiasednessReport:
    n_draws: int
    mean: np.ndarray
    noiseless: np.ndarray
    std_error: np.ndarray
    z: np.ndarray
    max_z: float
    predicted_shift: np.ndarray | None = None
    shift_z: np.ndarray | None = None
    max_shift_z: float | None = None

    def to_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


def _zscores(diff: np.ndarray, se: np.ndarray) -> np.ndarray:
    z = np.zeros_like(diff)
    pos = se > 0
    z[pos] = np.abs(diff[pos]) / se[pos]
    z[~pos & (diff != 0)] = np.inf
    return z


def predicted_shift(net: Supernet, x, y, policy: NoisePolicy) -> np.ndarray:
    """First-order shift of the expected logit gradient caused by a noise mean off center.

    With ``y = f(alpha) * (o + n)`` on a skip edge and ``E[n] = mu``, the shift
    in ``dL/dalpha_k`` is ``(dL/dy . mu) * f_s * (delta_sk - f_k)`` with
    ``dL/dy`` taken at the noiseless output (``o * (mu - 1)`` in place of ``mu``
    for multiplicative noise).
    """
    probes: dict[str, tuple[Tensor, np.ndarray]] = {}

    def perturb(name, out, edge):
        if not targets(policy, name):
            return out
        leaf = Tensor(np.zeros(out.shape), requires_grad=True)
        probes[edge] = (leaf, out.data)
        return F.add(out, leaf)

    _alpha_grad_with(net, x, y, perturb)
    weights = net.alpha_softmax()
    shift = {k: np.zeros_like(v) for k, v in weights.items()}
    space = net.space
    for edge, (leaf, out) in probes.items():
        kind, pair = edge.split(".")
        src, dst = map(int, pair.split("-"))
        menu = space.ops_of(kind, src, dst)
        f = weights[edge]
        # leaf.grad = f_s * dL/dy
        if policy.mode == "additive":
            inner = policy.mu * float(leaf.grad.sum())
        else:
            inner = (policy.mu - 1.0) * float(np.vdot(leaf.grad, out))
        for s, name in enumerate(menu):
            if targets(policy, name):
                delta = np.zeros(len(menu))
                delta[s] = 1.0
                shift[edge] += inner * (delta - f)
    return flatten(shift)


def verify_unbiasedness(net: Supernet, policy: NoisePolicy, x: np.ndarray, y: np.ndarray,
                        n_draws: int = 10_000, seed: int = 0) -> UnbiasednessReport:
    """Monte-Carlo mean of the noisy logit gradient against the noiseless one.

    Weights, logits and batch are fixed; only the injected noise varies. For
    biased policies the report also carries the first-order predicted shift
    and the z-scores of ``mean - noiseless - predicted``.
    """
    if n_draws < 2:
        raise ValueError("need at least 2 draws")
    g0 = _alpha_grad_with(net, x, y, None)
    stream = NoiseStream(seed)
    draws = np.empty((n_draws, g0.size))
    injector = NoiseInjector(policy, stream, policy.sigma)
    for i in range(n_draws):
        draws[i] = _alpha_grad_with(net, x, y, injector)
    mean = draws.mean(axis=0)
    se = draws.std(axis=0, ddof=1) / math.sqrt(n_draws)
    diff = mean - g0
    z = _zscores(diff, se)
    rep = UnbiasednessReport(n_draws, mean, g0, se, z, float(z.max(initial=0.0)))
    if not policy.unbiased:
        pred = predicted_shift(net, x, y, policy)
        sz = _zscores(diff - pred, se)
        rep.predicted_shift, rep.shift_z, rep.max_shift_z = pred, sz, float(sz.max(initial=0.0))
    return rep


@dataclass
class SmoothingReport:
    sigma: float
    n_pairs: int
    loss_zero: float
    mc_gap: float
    mc_gap_se: float
    trace: float
    trace_noise_floor: float
    predicted_gap: float
    ratio: float
    ratio_se: float
    beta: float
    inconclusive: bool

    def to_dict(self) -> dict:
        return asdict(self)


class _FixedNoise:
    """Adds a preset vector, split across skip outputs in forward order."""

    def __init__(self, vec: np.ndarray | None, op_name: str = SKIP_OP):
        self.vec, self.op_name, self.pos = vec, op_name, 0

    def __call__(self, name, out, edge):
        if name != self.op_name or self.vec is None:
            return out
        n = out.data.size
        chunk = self.vec[self.pos:self.pos + n].reshape(out.shape)
        self.pos += n
        return F.add(out, Tensor(chunk))


def _noisy_loss(net, x, y, vec, op_name) -> float:
    ctx = Context(training=True, update_stats=False, perturb=_FixedNoise(vec, op_name))
    with no_grad():
        return net.loss(x, y, ctx).item()


def _skip_sizes(net, x, op_name) -> tuple[int, list[np.ndarray]]:
    outs = []

    def observe(edge, name, out):
        if name == op_name:
            outs.append(out.data.copy())

    with no_grad():
        net.forward(x, Context(training=True, update_stats=False, observe=observe))
    return sum(o.size for o in outs), outs


def verify_smoothing(net: Supernet, sigma: float, x: np.ndarray, y: np.ndarray, n_pairs: int = 10_000,
                     seed: int = 0, fd_step: float | None = None, op_name: str = SKIP_OP,
                     max_sigma_ratio: float = 0.2) -> SmoothingReport:
    """Compare the Monte-Carlo loss gap under skip noise with ``(sigma^2/2) Tr(d2L/dz2)``.

    The expectation uses antithetic pairs ``(z, -z)``, which cancel the odd
    terms of the expansion. The trace is a sum of per-coordinate central
    second differences with step ``fd_step`` (default ``sigma``).
    """
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    if n_pairs < 2:
        raise ValueError("need at least 2 draws")
    dim, outs = _skip_sizes(net, x, op_name)
    if dim == 0:
        raise ValueError(f"op {op_name!r} is not a candidate on any edge")
    rms = math.sqrt(sum(float(np.vdot(o, o)) for o in outs) / dim)
    if sigma > max_sigma_ratio * rms:
        raise ValueError(f"sigma {sigma} exceeds {max_sigma_ratio} x skip-feature RMS ({rms:.4g})")
    l0 = _noisy_loss(net, x, y, None, op_name)

    rng = np.random.default_rng(seed)
    gaps = np.empty(n_pairs)
    for i in range(n_pairs):
        z = sigma * rng.standard_normal(dim)
        gaps[i] = 0.5 * (_noisy_loss(net, x, y, z, op_name) + _noisy_loss(net, x, y, -z, op_name)) - l0
    mc_gap = float(gaps.mean())
    mc_se = float(gaps.std(ddof=1) / math.sqrt(n_pairs))

    h = sigma if fd_step is None else fd_step
    trace = 0.0
    e = np.zeros(dim)
    for k in range(dim):
        e[k] = h
        trace += (_noisy_loss(net, x, y, e, op_name) - 2 * l0 + _noisy_loss(net, x, y, -e, op_name)) / (h * h)
        e[k] = 0.0
    # round-off floor of the summed second differences
    floor = 4.0 * np.finfo(float).eps * max(abs(l0), 1.0) / (h * h) * math.sqrt(dim)
    predicted = 0.5 * sigma * sigma * trace
    ratio = mc_gap / predicted if predicted != 0 else math.nan
    ratio_se = abs(mc_se / predicted) if predicted != 0 else math.nan
    beta = float(np.mean([1.0 / float(np.vdot(o[i], o[i])) for o in outs for i in range(len(o))
                          if np.vdot(o[i], o[i]) > 0]))
    return SmoothingReport(float(sigma), n_pairs, l0, mc_gap, mc_se, float(trace), float(floor),
                           float(predicted), float(ratio), float(ratio_se), beta,
                           bool(abs(trace) < 10 * floor))


# --- feature histograms -------------------------------------------------------------------

@dataclass
class FeatureHistogram:
    edge: str
    counts: np.ndarray
    edges: np.ndarray
    mean: float
    std: float
    skew: float
    kurtosis: float  # excess
    n: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["counts"] = self.counts.tolist()
        d["edges"] = self.edges.tolist()
        return d


def moments(v: np.ndarray) -> tuple[float, float, float, float]:
    v = np.asarray(v, dtype=np.float64).ravel()
    mean = float(v.mean())
    c = v - mean
    m2 = float(np.mean(c * c))
    if m2 == 0.0:
        return mean, 0.0, 0.0, 0.0
    skew = float(np.mean(c ** 3) / m2 ** 1.5)
    kurt = float(np.mean(c ** 4) / m2 ** 2 - 3.0)
    return mean, math.sqrt(m2), skew, kurt


def histogram_of(edge: str, values: np.ndarray, bins: int = 64) -> FeatureHistogram:
    values = np.asarray(values, dtype=np.float64).ravel()
    counts, edges = np.histogram(values, bins=bins)
    return FeatureHistogram(edge, counts, edges, *moments(values), n=int(values.size))


def feature_histogram(net, x: np.ndarray, op_name: str = SKIP_OP, bins: int = 64,
                      batch_size: int = 256, ctx: Context | None = None) -> dict[str, FeatureHistogram]:
    """Per-edge histograms of an op's output features over a dataset."""
    collected: dict[str, list[np.ndarray]] = {}

    def observe(edge, name, out):
        if name == op_name:
            collected.setdefault(edge, []).append(out.data.ravel().copy())

    base = ctx or Context.eval()
    run = Context(training=base.training, update_stats=False, observe=observe)
    with no_grad():
        for i in range(0, len(x), batch_size):
            net.forward(x[i:i + batch_size], run)
    if not collected:
        raise ValueError(f"op {op_name!r} is not a candidate on any edge")
    return {edge: histogram_of(edge, np.concatenate(parts), bins) for edge, parts in sorted(collected.items())}


def report_json(obj) -> str:
    d = obj.to_dict() if hasattr(obj, "to_dict") else obj
    return json.dumps(d, indent=2, default=lambda v: v.tolist() if isinstance(v, np.ndarray) else str(v))
