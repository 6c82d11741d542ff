"""Client-side gradient obfuscation applied to the full shared gradient
before it leaves the device: pure Gaussian noise, norm clipping plus noise,
and magnitude-threshold compression with a cross-round residual."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .fl import RoundUpdate
from .nn import Gradients, Network


def add_gaussian_noise(grads: Gradients, sigma: float,
                       rng: np.random.Generator) -> Gradients:
    """Independent N(0, sigma^2) noise on every gradient entry."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    out = grads.copy()
    if sigma > 0:
        for arr in out.arrays():
            arr += rng.normal(0.0, sigma, size=arr.shape)
    return out


def dp_clip_and_noise(grads: Gradients, beta: float, sigma: float,
                      rng: np.random.Generator) -> Gradients:
    """Scale the whole gradient by 1/max(1, ||grad||_2 / beta), then add
    Gaussian noise of standard deviation sigma."""
    if beta <= 0:
        raise ValueError("clipping bound beta must be positive")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    out = grads.scaled(1.0 / max(1.0, grads.l2_norm() / beta))
    if sigma > 0:
        for arr in out.arrays():
            arr += rng.normal(0.0, sigma, size=arr.shape)
    return out


@dataclass
class CompressionState:
    """Per-client residual accumulator for gradient compression."""

    residual: Gradients
    theta: float

    def __post_init__(self):
        if not 0.0 <= self.theta < 1.0:
            raise ValueError("theta must lie in [0, 1)")

    @classmethod
    def for_network(cls, net: Network, theta: float) -> "CompressionState":
        return cls(Gradients.zeros_for(net), theta)


def compress(grads: Gradients, state: CompressionState) -> Gradients:
    """Send only prominent entries; keep the rest accumulating.

    The incoming gradient is added to the residual; entries whose magnitude
    exceeds the theta-quantile of the accumulated residual are emitted and
    zeroed there, everything else stays for later rounds. Mutates state, so
    emitted-so-far plus residual always equals the raw gradient total.
    """
    state.residual.add_(grads)
    magnitudes = np.concatenate([np.abs(a).ravel() for a in state.residual.arrays()])
    discard = int(np.floor(state.theta * magnitudes.size))
    emitted_layers: list = []
    if discard == 0:
        threshold = -np.inf  # emit everything
    else:
        threshold = np.partition(magnitudes, discard - 1)[discard - 1]
    for entry in state.residual.by_layer:
        if entry is None:
            emitted_layers.append(None)
            continue
        pair = []
        for arr in entry:
            out = np.zeros_like(arr)
            mask = np.abs(arr) > threshold
            out[mask] = arr[mask]
            arr[mask] = 0.0
            pair.append(out)
        emitted_layers.append(tuple(pair))
    return Gradients(emitted_layers)


@dataclass(frozen=True)
class DefenseSpec:
    """Declarative defense configuration for the experiment runner."""

    kind: str = "none"  # none | noise | clip_noise | compress
    sigma: float = 0.0
    beta: float = 1.0
    theta: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "noise", "clip_noise", "compress"):
            raise ValueError(f"unknown defense kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.kind == "clip_noise" and self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.kind == "compress" and not 0.0 <= self.theta < 1.0:
            raise ValueError("theta must lie in [0, 1)")

    def label(self) -> str:
        if self.kind == "none":
            return "none"
        if self.kind == "noise":
            return f"noise(sigma={self.sigma})"
        if self.kind == "clip_noise":
            return f"clip_noise(beta={self.beta},sigma={self.sigma})"
        return f"compress(theta={self.theta})"

    @classmethod
    def from_dict(cls, raw: dict) -> "DefenseSpec":
        if not isinstance(raw, dict):
            raise ValueError(f"defense must be an object, got {type(raw).__name__}")
        allowed = {"kind", "sigma", "beta", "theta"}
        unknown = set(raw) - allowed
        if unknown:
            raise ValueError(f"unknown defense fields: {sorted(unknown)}")
        return cls(**raw)


def apply_defense(update: RoundUpdate, spec: DefenseSpec, rng: np.random.Generator,
                  state: CompressionState | None = None) -> RoundUpdate:
    """Obfuscate one client update according to spec; compression requires
    the client's persistent CompressionState."""
    if spec.kind == "none":
        return update
    if spec.kind == "noise":
        defended = add_gaussian_noise(update.gradients, spec.sigma, rng)
    elif spec.kind == "clip_noise":
        defended = dp_clip_and_noise(update.gradients, spec.beta, spec.sigma, rng)
    else:
        if state is None:
            raise ValueError("compression needs the client's CompressionState")
        defended = compress(update.gradients, state)
    return replace(update, gradients=defended)
