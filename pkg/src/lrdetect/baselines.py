"""Input-transform comparison detectors.

A squeezed copy of the input is classified alongside the original; the
disagreement between the two softmax outputs is the detection score.
Adversarial perturbations tend not to survive quantization or local
smoothing, so the squeezed prediction snaps back and the disagreement
grows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .models import Classifier

_TRANSFORMS = ("bit_reduce", "median_smooth")


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    bits: int = 4
    window: int = 3

    def __post_init__(self):
        if self.kind not in _TRANSFORMS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind == "bit_reduce" and not 1 <= self.bits <= 8:
            raise ValueError("bits must be in 1..8")
        if self.kind == "median_smooth" and (self.window < 3 or self.window % 2 == 0):
            raise ValueError("window must be odd and >= 3")

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "bit_reduce":
            return bit_reduce(x, self.bits)
        return median_smooth(x, self.window)


def bit_reduce(x: np.ndarray, bits: int) -> np.ndarray:
    """Quantize pixels in [0, 1] to 2^bits levels, rounding half up."""
    if not 1 <= bits <= 8:
        raise ValueError("bits must be in 1..8")
    levels = np.float32(2 ** bits - 1)
    # np.floor(v + 0.5) rounds half up; np.round would round half to even
    return (np.floor(x * levels + np.float32(0.5)) / levels).astype(np.float32)


def median_smooth(x: np.ndarray, window: int) -> np.ndarray:
    """Per-channel window x window median filter, edge-replicated.

    x is (n, c, h, w) or (c, h, w); the filter runs over the trailing
    two axes.
    """
    if window % 2 == 0 or window < 3:
        raise ValueError("window must be odd and >= 3")
    h, w = x.shape[-2], x.shape[-1]
    if window > min(h, w):
        raise ValueError(f"window {window} exceeds image side {min(h, w)}")
    pad = window // 2
    pad_spec = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    xp = np.pad(x, pad_spec, mode="edge")
    # gather the window x window neighborhood on two new trailing axes
    stack = np.empty(x.shape + (window * window,), dtype=x.dtype)
    k = 0
    for dy in range(window):
        for dx in range(window):
            stack[..., k] = xp[..., dy:dy + h, dx:dx + w]
            k += 1
    return np.median(stack, axis=-1).astype(np.float32)


def mismatch_score(model: Classifier, x: np.ndarray, transform: TransformSpec,
                   binary: bool = False, batch_size: int = 512) -> np.ndarray:
    """Disagreement between predictions on x and on transform(x).

    Default score is the L1 distance between the two softmax vectors,
    in [0, 2].  binary=True scores 1.0 when the argmax changed, else
    0.0.
    """
    out = np.empty(len(x), dtype=np.float32)
    for s in range(0, len(x), batch_size):
        chunk = x[s:s + batch_size]
        logits_a = model.logits(chunk)
        logits_b = model.logits(transform.apply(chunk))
        if binary:
            out[s:s + batch_size] = (logits_a.argmax(axis=1) != logits_b.argmax(axis=1)).astype(np.float32)
        else:
            pa = ad.softmax(ad.Tensor(logits_a), axis=-1).data
            pb = ad.softmax(ad.Tensor(logits_b), axis=-1).data
            out[s:s + batch_size] = np.abs(pa - pb).sum(axis=1)
    return out
