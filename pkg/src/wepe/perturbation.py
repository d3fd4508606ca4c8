"""Calibrated weight noise and perturbed parameter snapshots.

Each selected block receives i.i.d. zero-mean noise whose standard deviation
is `ratio * mean(|params of that block|)`; the three weight-noise families
(gaussian, uniform, laplace) are scale-matched to that std. Noise streams are
keyed by (seed, draw, block, tensor name), so draws are bit-reproducible and
blocks are statistically independent of each other.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import Backbone, ParameterBlock, params_to_blocks

FAMILIES = ("gaussian", "uniform", "laplace", "mc_dropout")

_U64 = (1 << 64) - 1


@dataclass(frozen=True)
class PerturbationSpec:
    family: str = "gaussian"
    ratio: float = 0.1
    block_indices: tuple[int, ...] = ()
    n_draws: int = 1
    seed: int = 0
    dropout_p: float = 0.1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown perturbation family {self.family!r}; known: {FAMILIES}")
        if not self.ratio > 0:
            raise ValueError("ratio must be positive")
        if self.n_draws < 1:
            raise ValueError("n_draws must be >= 1")
        if self.family == "mc_dropout" and not 0 < self.dropout_p < 1:
            raise ValueError("dropout_p must lie in (0, 1)")
        object.__setattr__(self, "block_indices", tuple(sorted(set(int(b) for b in self.block_indices))))
        if any(b < 0 for b in self.block_indices):
            raise ValueError("block indices must be nonnegative")

    def validate_for(self, model: Backbone) -> None:
        bad = [b for b in self.block_indices if b >= model.num_blocks]
        if bad:
            raise ValueError(f"block index {bad[0]} out of range for {model.num_blocks}-block model")

    def to_json_dict(self) -> dict:
        return {
            "family": self.family,
            "ratio": self.ratio,
            "blocks": list(self.block_indices),
            "n_draws": self.n_draws,
            "seed": self.seed,
            "dropout_p": self.dropout_p,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "PerturbationSpec":
        return cls(
            family=d.get("family", "gaussian"),
            ratio=float(d.get("ratio", 0.1)),
            block_indices=tuple(d.get("blocks", ())),
            n_draws=int(d.get("n_draws", 1)),
            seed=int(d.get("seed", 0)),
            dropout_p=float(d.get("dropout_p", 0.1)),
        )

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_json_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_seed(self, seed: int) -> "PerturbationSpec":
        return replace(self, seed=seed)


@dataclass
class PerturbedSnapshot:
    """Base snapshot plus per-tensor deltas for the perturbed blocks."""

    base: dict[str, torch.Tensor]
    spec: PerturbationSpec
    draw_index: int
    deltas: dict[str, torch.Tensor] = field(default_factory=dict)

    def materialize(self) -> dict[str, torch.Tensor]:
        """Full parameter dict; unperturbed tensors are shared with the base."""
        out = dict(self.base)
        for name, delta in self.deltas.items():
            out[name] = self.base[name] + delta
        return out


def per_block_noise_std(block: ParameterBlock, ratio: float) -> float:
    """Noise std for one block: ratio times the block's mean |parameter|."""
    if not ratio > 0:
        raise ValueError("ratio must be positive")
    return float(ratio) * block.mean_abs_param


def _tensor_rng(seed: int, draw_index: int, block_index: int, tensor_name: str) -> np.random.Generator:
    name_key = int.from_bytes(hashlib.sha256(tensor_name.encode()).digest()[:8], "little")
    ss = np.random.SeedSequence(entropy=(seed & _U64, draw_index, block_index, name_key))
    return np.random.Generator(np.random.Philox(ss))


def sample_noise(rng: np.random.Generator, family: str, std: float, shape) -> np.ndarray:
    """Zero-mean noise with standard deviation `std` from the given family."""
    if family == "gaussian":
        arr = rng.normal(0.0, std, size=shape)
    elif family == "uniform":
        half = math.sqrt(3.0) * std
        arr = rng.uniform(-half, half, size=shape)
    elif family == "laplace":
        arr = rng.laplace(0.0, std / math.sqrt(2.0), size=shape)
    else:
        raise ValueError(f"family {family!r} does not generate weight noise")
    return arr.astype(np.float32)


def perturb_model(snapshot: dict[str, torch.Tensor], spec: PerturbationSpec,
                  draw_index: int, depth: int | None = None) -> PerturbedSnapshot:
    """Perturbed snapshot for one draw; only selected blocks receive deltas."""
    if spec.family == "mc_dropout":
        raise ValueError("mc_dropout does not perturb weights; use mc_dropout_features")
    if not 0 <= draw_index < spec.n_draws:
        raise ValueError(f"draw_index {draw_index} outside [0, {spec.n_draws})")
    if depth is None:
        depth = _infer_depth(snapshot)
    blocks = params_to_blocks(snapshot, depth)
    bad = [b for b in spec.block_indices if b >= depth]
    if bad:
        raise ValueError(f"block index {bad[0]} out of range for {depth}-block snapshot")
    deltas: dict[str, torch.Tensor] = {}
    for b in spec.block_indices:
        std = per_block_noise_std(blocks[b], spec.ratio)
        for name in sorted(blocks[b].tensors):
            tensor = blocks[b].tensors[name]
            rng = _tensor_rng(spec.seed, draw_index, b, name)
            noise = sample_noise(rng, spec.family, std, tuple(tensor.shape))
            deltas[name] = torch.from_numpy(noise)
    return PerturbedSnapshot(base=snapshot, spec=spec, draw_index=draw_index, deltas=deltas)


def _infer_depth(snapshot: dict[str, torch.Tensor]) -> int:
    depth = -1
    for name in snapshot:
        if name.startswith("blocks."):
            depth = max(depth, int(name.split(".")[1]))
    return depth + 1


# ---------------------------------------------------------------------------
# MC-dropout alternative
# ---------------------------------------------------------------------------

def dropout_unit_masks(model: Backbone, p: float, seed: int, draw_index: int = 0) -> list[torch.Tensor]:
    """One fixed keep/drop mask per block over the MLP hidden units.

    The mask is sampled once per draw and shared across images and token
    positions, mirroring how a perturbed weight snapshot stays fixed while
    scoring a whole test set. Kept units are rescaled by 1/(1-p).
    """
    if not 0 < p < 1:
        raise ValueError("dropout probability must lie in (0, 1)")
    masks = []
    for b in range(model.num_blocks):
        rng = _tensor_rng(seed, draw_index, b, "mlp.unit_mask")
        keep = (rng.random(model.arch.hidden) >= p).astype(np.float32)
        masks.append(torch.from_numpy(keep / (1.0 - p)))
    return masks


def mc_dropout_features(model: Backbone, images, p: float, seed: int,
                        draw_index: int = 0, batch_size: int = 64) -> np.ndarray:
    """Unit-norm features under fixed random unit-masking of MLP activations."""
    masks = dropout_unit_masks(model, p, seed, draw_index)
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    outs = []
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            feats = model.forward(x[start : start + batch_size], unit_masks=masks)
            outs.append(F.normalize(feats, dim=-1))
    return torch.cat(outs).numpy().astype(np.float32)
