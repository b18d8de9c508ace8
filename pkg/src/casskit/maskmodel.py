"""Coding-mask synthesis and the stochastic mask model.

A fabricated mask never matches its design: we model a realized mask as
the clean binary pattern plus Gaussian error, clamped back to physical
transmittances.  During training the same decomposition is used in
reverse: given a per-pixel standard-deviation map ``g`` (from the
variance network) we draw perturbed masks m' = clamp01(m + g * eps) with
eps ~ N(0, 1), which is the reparameterized form of sampling from
N(m, g^2).  ``entropy_term`` is the matching average Gaussian entropy,
mean(ln(g * sqrt(2*pi*e))), used to pressure ``g`` toward confident
(small) values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ndgrad import ShapeError, Tensor, add, clamp01, log, mul, tmean
from .optics import Mask

__all__ = [
    "NoisePrior",
    "PRIOR_DEFAULT",
    "PRIOR_WIDE",
    "PRIOR_STDNORM",
    "MaskSet",
    "LOG_SQRT_2PIE",
    "synthesize_clean_mask",
    "draw_noise",
    "realize_mask",
    "sample_perturbed",
    "entropy_term",
    "mask_histogram",
    "build_mask_sets",
]

# ln(sqrt(2*pi*e)); entropy of N(mu, s^2) is ln(s) + this constant
LOG_SQRT_2PIE = 0.5 * math.log(2.0 * math.pi * math.e)


@dataclass(frozen=True)
class NoisePrior:
    """Gaussian fabrication-error model for realized masks."""

    mu: float = 0.006
    sigma: float = 0.005

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"prior sigma must be >= 0, got {self.sigma}")


PRIOR_DEFAULT = NoisePrior(0.006, 0.005)
PRIOR_WIDE = NoisePrior(0.006, 0.1)
PRIOR_STDNORM = NoisePrior(0.0, 1.0)


@dataclass(frozen=True)
class MaskSet:
    """A named collection of same-shape masks ("train" or "test")."""

    masks: tuple
    role: str

    def __post_init__(self):
        if self.role not in ("train", "test"):
            raise ValueError(f"mask set role must be train or test, got {self.role!r}")
        ms = tuple(self.masks)
        if self.role == "train" and not ms:
            raise ValueError("train mask set may not be empty")
        shapes = {m.values.shape for m in ms}
        if len(shapes) > 1:
            raise ShapeError(f"mask set mixes shapes: {sorted(shapes)}")
        object.__setattr__(self, "masks", ms)

    def __len__(self):
        return len(self.masks)

    def __getitem__(self, i):
        return self.masks[i]


def synthesize_clean_mask(h, w, density=0.5, rng=None):
    """Random binary on/off pattern with open fraction ~ density."""
    if not 0.0 <= density <= 1.0:
        raise ValueError(f"density must be in [0, 1], got {density}")
    if rng is None:
        raise ValueError("synthesize_clean_mask requires an rng")
    values = (rng.random((h, w)) < density).astype(np.float64)
    return Mask(values)


def draw_noise(prior, shape, rng):
    """One realization of the fabrication-error field z ~ N(mu, sigma^2)."""
    return rng.normal(prior.mu, prior.sigma, size=shape)


def realize_mask(clean, prior, rng):
    """Fabricate: clean pattern plus Gaussian error, clamped to [0, 1]."""
    cv = clean.values if isinstance(clean, Mask) else np.asarray(clean, dtype=np.float64)
    z = draw_noise(prior, cv.shape, rng)
    return Mask(np.clip(cv + z, 0.0, 1.0))


def sample_perturbed(m, g, eps=None, rng=None, eps_mean=0.0, eps_std=1.0):
    """Reparameterized draw m' = clamp01(m + g * eps).

    ``m`` is a Mask or 2-D array (treated as constant data).  When ``g``
    is a Tensor the result stays on the tape and gradients flow into
    ``g``; a plain-array ``g`` gives a plain-array result.  ``eps``
    defaults to an N(eps_mean, eps_std^2) draw from ``rng``.
    """
    mv = m.values if isinstance(m, Mask) else np.asarray(m, dtype=np.float64)
    if mv.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {mv.shape}")
    gshape = g.data.shape if isinstance(g, Tensor) else np.shape(g)
    if gshape != mv.shape and gshape != ():
        raise ShapeError(f"deviation map shape {gshape} does not match mask {mv.shape}")
    if eps is None:
        if rng is None:
            raise ValueError("sample_perturbed requires eps or an rng")
        eps = eps_mean + eps_std * rng.standard_normal(mv.shape)
    else:
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape != mv.shape:
            raise ShapeError(f"eps shape {eps.shape} does not match mask {mv.shape}")
    if isinstance(g, Tensor):
        return clamp01(add(Tensor(mv), mul(g, Tensor(eps))))
    return np.clip(mv + np.asarray(g, dtype=np.float64) * eps, 0.0, 1.0)


def entropy_term(g):
    """Mean over pixels of ln(g * sqrt(2*pi*e)), the per-pixel Gaussian entropy.

    Tensor in, scalar Tensor out (differentiable); array in, float out.
    Zero exactly when g == (2*pi*e)**-0.5; negative for smaller g.
    """
    if isinstance(g, Tensor):
        if np.any(g.data <= 0.0):
            raise ValueError("entropy_term: deviation map must be strictly positive")
        return add(tmean(log(g)), LOG_SQRT_2PIE)
    gv = np.asarray(g, dtype=np.float64)
    if np.any(gv <= 0.0):
        raise ValueError("entropy_term: deviation map must be strictly positive")
    return float(np.mean(np.log(gv)) + LOG_SQRT_2PIE)


def mask_histogram(m, bins):
    """Histogram of mask values over [0, 1].

    Bins are equal width, half-open except the last, which closes at 1 so
    every value is counted.  Returns (counts, edges).
    """
    if bins < 1:
        raise ValueError(f"need at least one bin, got {bins}")
    mv = m.values if isinstance(m, Mask) else np.asarray(m, dtype=np.float64)
    counts, edges = np.histogram(mv, bins=bins, range=(0.0, 1.0))
    return counts, edges


def build_mask_sets(base, crop_hw, k_train, k_test, rng, max_redraw=1000):
    """Crop train and test mask sets out of one realized base mask.

    Crops are uniform random offsets.  Any test crop that exactly equals a
    train crop is redrawn, so the sets are disjoint by construction; if
    the geometry makes that impossible (e.g. crop size equals base size)
    the redraw budget runs out and a ValueError explains why.  k_test may
    be 0 when no held-out masks are wanted.
    """
    bv = base.values if isinstance(base, Mask) else np.asarray(base, dtype=np.float64)
    ch, cw = crop_hw
    bh, bw = bv.shape
    if ch > bh or cw > bw:
        raise ShapeError(f"crop {crop_hw} exceeds base mask {bv.shape}")
    if k_train < 1:
        raise ValueError(f"k_train must be >= 1, got {k_train}")
    if k_test < 0:
        raise ValueError(f"k_test must be >= 0, got {k_test}")

    def crop():
        r = int(rng.integers(0, bh - ch + 1))
        c = int(rng.integers(0, bw - cw + 1))
        return Mask(bv[r : r + ch, c : c + cw].copy())

    train = [crop() for _ in range(k_train)]
    test = []
    for _ in range(k_test):
        for _attempt in range(max_redraw):
            cand = crop()
            if not any(np.array_equal(cand.values, t.values) for t in train):
                test.append(cand)
                break
        else:
            raise ValueError(
                "could not draw a test crop distinct from the train crops; "
                "crop geometry leaves too few distinct positions"
            )
    return MaskSet(tuple(train), "train"), MaskSet(tuple(test), "test")
