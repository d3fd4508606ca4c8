"""Image degradations for robustness studies and detector-evasion attacks.

All transforms take and return float arrays of shape (H, W, 3) with values in
[0, 1]. The spatial attack (sda) adds pixel noise and the frequency attack
(fda) adds noise to DFT coefficients; both default to strength 0.1 applied to
generated images only, the attacker-only protocol.
"""

from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy.ndimage import correlate1d

KINDS = ("jpeg", "blur", "noise", "sda", "fda")
_SEEDED_KINDS = ("noise", "sda", "fda")


def _check_image(image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {arr.shape}")
    return arr


def _rng(seed: int, key: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=(seed & ((1 << 64) - 1), key))))


def jpeg_degrade(image, q: int) -> np.ndarray:
    """Encode-decode round trip at integer quality q in [1, 100]."""
    if not (isinstance(q, (int, np.integer)) and 1 <= q <= 100):
        raise ValueError(f"jpeg quality must be an integer in [1, 100], got {q!r}")
    arr = _check_image(image)
    u8 = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8).save(buf, format="JPEG", quality=int(q), subsampling=0)
    buf.seek(0)
    out = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float64) / 255.0
    return out


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs**2) / (2.0 * sigma**2))
    return k / k.sum()


def gaussian_blur(image, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel radius ceil(3*sigma), reflect padding."""
    if sigma < 0:
        raise ValueError("blur sigma must be nonnegative")
    arr = _check_image(image)
    if sigma == 0:
        return arr.copy()
    k = _gaussian_kernel(sigma)
    out = correlate1d(arr, k, axis=0, mode="reflect")
    out = correlate1d(out, k, axis=1, mode="reflect")
    return np.clip(out, 0.0, 1.0)


def gaussian_noise(image, sigma: float, seed: int) -> np.ndarray:
    """Additive i.i.d. pixel noise N(0, sigma^2), clipped back to [0, 1]."""
    if sigma < 0:
        raise ValueError("noise sigma must be nonnegative")
    arr = _check_image(image)
    if sigma == 0:
        return arr.copy()
    noise = _rng(seed).normal(0.0, sigma, size=arr.shape)
    return np.clip(arr + noise, 0.0, 1.0)


def fda_attack(image, sigma: float, seed: int) -> np.ndarray:
    """Frequency-domain attack: Gaussian noise on 2-D DFT coefficients.

    Per channel, noise with std `sigma * rms(|coefficients|)` is added
    independently to the real and imaginary parts of every coefficient; the
    RMS scaling makes one sigma comparable across images.
    """
    if not sigma > 0:
        raise ValueError("fda sigma must be positive")
    arr = _check_image(image)
    rng = _rng(seed)
    out = np.empty_like(arr)
    for c in range(3):
        coeff = np.fft.fft2(arr[:, :, c])
        scale = sigma * math.sqrt(float(np.mean(np.abs(coeff) ** 2)))
        noisy = coeff + rng.normal(0.0, scale, coeff.shape) + 1j * rng.normal(0.0, scale, coeff.shape)
        out[:, :, c] = np.real(np.fft.ifft2(noisy))
    if not np.all(np.isfinite(out)):
        raise ValueError("frequency attack produced non-finite values")
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class DegradationSpec:
    """One degradation: kind, strength, and which labels it applies to."""

    kind: str
    strength: float | None = None
    apply_to: str = "all"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown degradation kind {self.kind!r}; known: {KINDS}")
        if self.apply_to not in ("all", "generated_only"):
            raise ValueError("apply_to must be 'all' or 'generated_only'")
        if self.strength is None:
            if self.kind in ("sda", "fda"):
                object.__setattr__(self, "strength", 0.1)
            else:
                raise ValueError(f"{self.kind} requires an explicit strength")

    @classmethod
    def parse(cls, text: str) -> "DegradationSpec":
        """Parse 'kind' or 'kind:strength', e.g. 'jpeg:50', 'sda', 'fda:0.1'."""
        kind, _, strength = text.partition(":")
        kind = kind.strip().lower()
        apply_to = "generated_only" if kind in ("sda", "fda") else "all"
        return cls(kind=kind, strength=float(strength) if strength else None, apply_to=apply_to)

    def needs_seed(self) -> bool:
        return self.kind in _SEEDED_KINDS

    def apply(self, image, label: int, seed: int | None = None, key: str | int = 0) -> np.ndarray:
        """Apply to one image; `key` separates noise streams across images."""
        arr = _check_image(image)
        if self.apply_to == "generated_only" and label == 1:
            return arr
        if self.needs_seed():
            if seed is None:
                raise ValueError(f"degradation {self.kind!r} requires a seed")
            sub = _derive_key(key)
            if self.kind in ("noise", "sda"):
                return gaussian_noise(arr, self.strength, seed=_mix(seed, sub))
            return fda_attack(arr, self.strength, seed=_mix(seed, sub))
        if self.kind == "jpeg":
            return jpeg_degrade(arr, int(self.strength))
        return gaussian_blur(arr, self.strength)

    def tag(self) -> str:
        return f"{self.kind}:{self.strength:g}"


def _derive_key(key: str | int) -> int:
    if isinstance(key, int):
        return key
    return int.from_bytes(hashlib.sha256(str(key).encode()).digest()[:8], "little")


def _mix(seed: int, key: int) -> int:
    blob = f"{seed}:{key}".encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")
