"""Noise policies for candidate-operation outputs.

A :class:`NoisePolicy` says what to draw (Gaussian or uniform, additive or
multiplicative), where to inject it (only skip, every op, every op except
skip, or drop-path on skip) and how strong it is over the search.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

import noisydarts.functional as F
from .tensor import Tensor

__all__ = [
    "SKIP_OP", "DISTRIBUTIONS", "MODES", "PLACEMENTS", "SCHEDULES",
    "NoisePolicy", "NoiseSample", "NoiseStream", "NoiseInjector",
    "sample", "apply", "scheduled_sigma", "targets",
]

SKIP_OP = "skip_connect"
DISTRIBUTIONS = ("gaussian", "uniform")
MODES = ("additive", "multiplicative")
PLACEMENTS = ("ofs", "nfa", "es", "droppath", "none")
SCHEDULES = ("fixed", "linear_decay")


@dataclass(frozen=True)
class NoisePolicy:
    distribution: str = "gaussian"
    mode: str = "additive"
    placement: str = "ofs"
    mu: float | None = None
    sigma: float = 0.2
    schedule: str = "fixed"
    decay_end: int | None = None
    drop_rate: float = 0.0
    allow_biased: bool = False

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"unknown noise distribution {self.distribution!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown noise mode {self.mode!r}")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"unknown noise placement {self.placement!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown sigma schedule {self.schedule!r}")
        if self.sigma < 0 or not math.isfinite(self.sigma):
            raise ValueError(f"sigma must be finite and >= 0, got {self.sigma}")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError(f"drop_rate must lie in [0, 1), got {self.drop_rate}")
        if self.mu is None:
            object.__setattr__(self, "mu", 0.0 if self.mode == "additive" else 1.0)
        center = 0.0 if self.mode == "additive" else 1.0
        if self.mu != center and not self.allow_biased:
            raise ValueError(
                f"{self.mode} noise is unbiased only with mu={center}; "
                f"got mu={self.mu} (set allow_biased for ablations)")

    @classmethod
    def off(cls) -> "NoisePolicy":
        return cls(placement="none", sigma=0.0)

    @classmethod
    def from_dict(cls, d: dict) -> "NoisePolicy":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def unbiased(self) -> bool:
        return self.mu == (0.0 if self.mode == "additive" else 1.0)


@dataclass
class NoiseSample:
    data: np.ndarray
    seed: int
    index: int
    sigma: float = field(default=0.0)


class NoiseStream:
    """Counter-based random stream: draw ``i`` depends only on ``(seed, i)``."""

    def __init__(self, seed: int, start: int = 0):
        self.seed = int(seed)
        self.counter = int(start)

    @staticmethod
    def generator(seed: int, index: int) -> np.random.Generator:
        return np.random.default_rng([int(seed), int(index)])

    def next_generator(self) -> tuple[np.random.Generator, int]:
        idx = self.counter
        self.counter += 1
        return self.generator(self.seed, idx), idx


def scheduled_sigma(policy: NoisePolicy, epoch: int, total_epochs: int) -> float:
    if not 0 <= epoch < max(total_epochs, 1):
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    if policy.placement == "none":
        return 0.0
    if policy.schedule == "fixed":
        return policy.sigma
    end = policy.decay_end if policy.decay_end is not None else total_epochs
    return policy.sigma * max(0.0, 1.0 - epoch / end)


def _draw(policy: NoisePolicy, shape, sigma: float, gen: np.random.Generator) -> np.ndarray:
    if policy.placement == "droppath":
        keep = gen.random(shape[0]) >= policy.drop_rate
        mask = keep.astype(np.float64) / (1.0 - policy.drop_rate)
        return np.broadcast_to(mask.reshape((-1,) + (1,) * (len(shape) - 1)), shape).copy()
    if sigma == 0.0:
        return np.full(shape, float(policy.mu))
    if policy.distribution == "gaussian":
        return policy.mu + sigma * gen.standard_normal(shape)
    half = math.sqrt(3.0) * sigma
    return policy.mu + gen.uniform(-half, half, shape)


def sample(policy: NoisePolicy, shape, stream: NoiseStream, sigma: float | None = None) -> NoiseSample:
    """One i.i.d. draw for a feature map of ``shape``.

    ``sigma`` defaults to the policy's base value; pass the scheduled value
    during a search. Drop-path policies draw one keep/drop decision per batch
    element, already rescaled by ``1/(1-drop_rate)``.
    """
    shape = tuple(shape)
    if not shape or 0 in shape:
        raise ValueError(f"cannot sample noise for empty shape {shape}")
    sigma = policy.sigma if sigma is None else sigma
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    gen, idx = stream.next_generator()
    return NoiseSample(_draw(policy, shape, sigma, gen), stream.seed, idx, sigma)


def replay(policy: NoisePolicy, shape, seed: int, index: int, sigma: float) -> np.ndarray:
    return _draw(policy, tuple(shape), sigma, NoiseStream.generator(seed, index))


def targets(policy: NoisePolicy, op_name: str) -> bool:
    """Whether ``policy`` perturbs the output of ``op_name``."""
    p = policy.placement
    if p == "none":
        return False
    if p in ("ofs", "droppath"):
        return op_name == SKIP_OP
    if p == "es":
        return op_name != SKIP_OP
    return True


def apply(policy: NoisePolicy, op_name: str, output: Tensor, noise: NoiseSample | np.ndarray) -> Tensor:
    if not targets(policy, op_name):
        return output
    arr = noise.data if isinstance(noise, NoiseSample) else noise
    if arr.shape != output.shape:
        raise ValueError(f"noise shape {arr.shape} != op output shape {output.shape}")
    if policy.placement == "droppath" or policy.mode == "multiplicative":
        return F.mul(output, Tensor(arr))
    return F.add(output, Tensor(arr))


class NoiseInjector:
    """Samples and applies noise to op outputs during one training forward."""

    def __init__(self, policy: NoisePolicy, stream: NoiseStream, sigma: float | None = None):
        self.policy = policy
        self.stream = stream
        self.sigma = policy.sigma if sigma is None else sigma

    def __call__(self, op_name: str, output: Tensor, edge: str | None = None) -> Tensor:
        if not targets(self.policy, op_name):
            return output
        return apply(self.policy, op_name, output, sample(self.policy, output.shape, self.stream, self.sigma))
