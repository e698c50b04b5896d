"""Gradient-subset leakage analysis.

A client that receives another client's update sees only the layers the
request matrix assigned to it.  This module scores how much each layer
leaks, estimates the leakage of random layer subsets, and runs a closed-form
input recovery that needs the first layer's weight and bias gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .training import MlpSpec, loss_and_gradients, synthetic_digits

RECOVERY_EPS = 1e-8
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP = 100.0


class AttackError(ValueError):
    pass


class FirstLayerMissing(AttackError):
    pass


class AllBiasZero(AttackError):
    pass


@dataclass(frozen=True)
class LayerGradient:
    """Gradients keyed by 1-based matrix index, grouped into layers.

    ``groups`` maps a 1-based layer id to its ``(weight index, bias index)``.
    """

    matrices: dict
    groups: dict

    def __post_init__(self):
        covered = sorted(i for pair in self.groups.values() for i in pair)
        if covered != sorted(self.matrices):
            raise AttackError("layer grouping must cover every gradient matrix exactly once")
        for g in self.matrices.values():
            if not np.all(np.isfinite(g)):
                raise AttackError("non-finite gradient")

    @classmethod
    def from_list(cls, grads: Sequence[np.ndarray]) -> "LayerGradient":
        if len(grads) % 2:
            raise AttackError("expected weight/bias pairs")
        mats = {j: np.asarray(g, dtype=np.float64) for j, g in enumerate(grads, start=1)}
        groups = {k: (2 * k - 1, 2 * k) for k in range(1, len(grads) // 2 + 1)}
        return cls(mats, groups)

    @property
    def layers(self) -> list[int]:
        return sorted(self.groups)

    def scaled(self, factor: float) -> "LayerGradient":
        return LayerGradient({j: g * factor for j, g in self.matrices.items()}, dict(self.groups))


@dataclass(frozen=True)
class GradientMask:
    included: frozenset
    total: int

    def __post_init__(self):
        object.__setattr__(self, "included", frozenset(self.included))
        if not 0 <= len(self.included) <= self.total:
            raise AttackError("mask includes more layers than exist")

    @property
    def n(self) -> int:
        return len(self.included)

    @property
    def ratio(self) -> float:
        return self.n / self.total

    @classmethod
    def random(cls, total: int, n: int, rng: np.random.Generator) -> "GradientMask":
        if not 0 <= n <= total:
            raise AttackError(f"cannot pick {n} of {total} layers")
        return cls(frozenset(int(k) + 1 for k in rng.choice(total, size=n, replace=False)), total)


@dataclass(frozen=True)
class SensitivityReport:
    scores: dict
    subset_total: float | None = None

    @property
    def total(self) -> float:
        return float(sum(self.scores.values()))

    @property
    def N(self) -> int:
        return len(self.scores)


def layer_sensitivity(grad: LayerGradient) -> SensitivityReport:
    """Per-layer mean absolute gradient entry (weight and bias pooled)."""
    scores = {}
    for layer, (w, b) in grad.groups.items():
        entries = np.concatenate([np.abs(grad.matrices[w]).ravel(), np.abs(grad.matrices[b]).ravel()])
        scores[layer] = float(entries.mean()) if entries.size else 0.0
    return SensitivityReport(scores)


def subset_sensitivity(report: SensitivityReport, layers: Iterable[int]) -> float:
    return float(sum(report.scores[k] for k in layers))


def expected_subset_sensitivity(report: SensitivityReport, n: int, trials: int, rng: np.random.Generator) -> float:
    """Monte-Carlo mean of the summed score over uniform n-subsets of layers."""
    N = report.N
    if not 0 <= n <= N:
        raise AttackError(f"n={n} outside 0..{N}")
    if trials < 1:
        raise AttackError("need at least one trial")
    scores = np.array([report.scores[k] for k in sorted(report.scores)])
    if n == 0:
        return 0.0
    if n == N:
        return report.total
    # argpartition of iid uniforms yields a uniform random n-subset per row
    keys = rng.random((trials, N))
    picks = np.argpartition(keys, n - 1, axis=1)[:, :n]
    return float(scores[picks].sum(axis=1).mean())


def mask_gradient(grad: LayerGradient, mask: GradientMask) -> LayerGradient:
    unknown = mask.included - set(grad.groups)
    if unknown:
        raise AttackError(f"unknown layer ids {sorted(unknown)}")
    groups = {k: grad.groups[k] for k in sorted(mask.included)}
    mats = {j: grad.matrices[j] for pair in groups.values() for j in pair}
    return LayerGradient(mats, groups)


def analytic_first_layer_recovery(masked: LayerGradient, spec: MlpSpec) -> np.ndarray:
    """Recover a single training input from the first layer's gradients.

    For one sample, dL/dW1 is the outer product of dL/db1 with the input,
    so any row with a non-negligible bias gradient divides out to the input.
    """
    if 1 not in masked.groups:
        raise FirstLayerMissing("the first layer is not part of the observed gradient")
    w_idx, b_idx = masked.groups[1]
    gw = np.asarray(masked.matrices[w_idx]).reshape(spec.widths[1], spec.widths[0])
    gb = np.asarray(masked.matrices[b_idx]).reshape(-1)
    k = int(np.argmax(np.abs(gb)))
    if abs(gb[k]) <= RECOVERY_EPS:
        raise AllBiasZero("every first-layer bias gradient is numerically zero")
    return gw[k] / gb[k]


def psnr(a, b, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def ssim(a, b, data_range: float = 1.0) -> float:
    """Structural similarity over a single whole-image window."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = a.mean(), b.mean()
    var_a = ((a - mu_a) ** 2).mean()
    var_b = ((b - mu_b) ** 2).mean()
    cov = ((a - mu_a) * (b - mu_b)).mean()
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(num / den)


def single_sample_gradient(spec: MlpSpec, model, x, y) -> LayerGradient:
    _, grads = loss_and_gradients(spec, model, np.asarray(x)[None, :], np.array([y]))
    return LayerGradient.from_list(grads)


@dataclass
class SweepRow:
    n: int
    N: int
    trials: int
    mean_S_prime: float
    psnr_mean: float
    ssim_mean: float
    recovery_success_rate: float

    COLUMNS = ("n", "N", "trials", "mean_S_prime", "psnr_mean", "ssim_mean", "recovery_success_rate")

    def as_row(self) -> list[str]:
        def fmt(v):
            if isinstance(v, float):
                return "" if math.isnan(v) else f"{v:.6f}"
            return str(v)

        return [fmt(getattr(self, c)) for c in self.COLUMNS]


def attack_sweep(
    spec: MlpSpec,
    n_values: Sequence[int],
    trials: int,
    rng: np.random.Generator,
    noise_std: float = 0.0,
    fallback: float = 0.5,
) -> list[SweepRow]:
    """Masked-gradient inversion over random layer subsets of size n.

    Each trial draws a fresh network and digit image, masks the single-sample
    gradient to n random layers, optionally perturbs it with Gaussian noise,
    and attempts recovery.  A failed recovery is scored with a constant
    ``fallback`` image.  Rows with n = 0 carry no reconstruction statistics.
    """
    if trials < 1:
        raise AttackError("trials must be positive")
    N = spec.layers
    side = int(round(math.sqrt(spec.widths[0])))
    square = side * side == spec.widths[0]
    rows = []
    for n in n_values:
        if not 0 <= n <= N:
            raise AttackError(f"n={n} outside 0..{N}")
        s_prime, psnrs, ssims, ok = [], [], [], 0
        for _ in range(trials):
            model = spec.init(rng)
            sample = synthetic_digits(1, rng, side=side) if square and side >= 8 else None
            x = sample.x[0] if sample is not None else rng.random(spec.widths[0])
            y = int(sample.y[0] % spec.widths[-1]) if sample is not None else int(rng.integers(spec.widths[-1]))
            grad = single_sample_gradient(spec, model, x, y)
            report = layer_sensitivity(grad)
            mask = GradientMask.random(N, n, rng)
            s_prime.append(subset_sensitivity(report, mask.included))
            if n == 0:
                continue
            masked = mask_gradient(grad, mask)
            if noise_std > 0:
                masked = LayerGradient(
                    {j: g + rng.normal(0.0, noise_std, g.shape) for j, g in masked.matrices.items()},
                    dict(masked.groups),
                )
            try:
                x_hat = np.clip(analytic_first_layer_recovery(masked, spec), 0.0, 1.0)
                ok += 1
            except AttackError:
                x_hat = np.full_like(x, fallback)
            shape = (side, side) if square else x.shape
            psnrs.append(psnr(x.reshape(shape), x_hat.reshape(shape)))
            ssims.append(ssim(x.reshape(shape), x_hat.reshape(shape)))
        nan = float("nan")
        rows.append(
            SweepRow(
                n=n,
                N=N,
                trials=trials,
                mean_S_prime=float(np.mean(s_prime)),
                psnr_mean=float(np.mean(psnrs)) if psnrs else nan,
                ssim_mean=float(np.mean(ssims)) if ssims else nan,
                recovery_success_rate=ok / trials if n else nan,
            )
        )
    return rows
