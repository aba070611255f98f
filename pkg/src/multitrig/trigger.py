"""Conditional trigger synthesis: sub-generators, tiling, bounded injection.

The injected image is ``clip_[0,1](x + tile(eps * sigmoid(raw patch)))``
where the raw patch is the elementwise sum of the removal and generation
sub-generator outputs. The sigmoid keeps the perturbation in [0, eps]
(an optional centered variant maps to [-eps, eps] instead); tiling
places only full copies of the patch, zero-padding the remainder strips.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .targets import AttackTarget, Scenario, TargetPool


class TriggerError(ValueError):
    pass


@dataclass
class InjectionConfig:
    epsilon: float = 0.05
    patch_h: int = 30
    patch_w: int = 30
    centered_sigmoid: bool = False  # map perturbation to [-eps, eps] instead of [0, eps]

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise TriggerError(f"epsilon {self.epsilon} outside (0, 1]")
        if self.patch_h < 1 or self.patch_w < 1:
            raise TriggerError(f"bad patch size ({self.patch_h}, {self.patch_w})")

    @property
    def patch_hw(self) -> tuple[int, int]:
        return (self.patch_h, self.patch_w)

    def validate_for_image(self, image_size: tuple[int, int]) -> None:
        """Reject configs whose patch cannot place a single full tile."""
        w, h = image_size
        if self.patch_w > w or self.patch_h > h:
            raise TriggerError(
                f"patch {self.patch_hw} larger than image {image_size}; no full tile would fit"
            )


class DisentangledTriggerGenerator(nn.Module):
    """Two single-layer affine sub-generators, one per target component."""

    kind = "disentangled"

    def __init__(self, k: int, patch_hw: tuple[int, int] = (30, 30)):
        super().__init__()
        self.k = k
        self.patch_hw = tuple(patch_hw)
        out = 3 * patch_hw[0] * patch_hw[1]
        self.removal = nn.Linear(k, out)
        self.generation = nn.Linear(k, out)

    def patch_for(self, target: AttackTarget) -> torch.Tensor:
        if target.k != self.k:
            raise TriggerError(f"target K={target.k} does not match generator K={self.k}")
        dtype = self.removal.weight.dtype
        e_r = torch.tensor(target.e_r, dtype=dtype)
        e_g = torch.tensor(target.e_g, dtype=dtype)
        raw = self.removal(e_r) + self.generation(e_g)
        return raw.view(3, *self.patch_hw)


class FlatTriggerGenerator(nn.Module):
    """Ablation variant: one affine map over a one-hot of the whole pool."""

    kind = "flat"

    def __init__(self, pool: TargetPool, patch_hw: tuple[int, int] = (30, 30)):
        super().__init__()
        self.k = pool.k
        self.patch_hw = tuple(patch_hw)
        self.pool = pool
        self._index = {t.key(): i for i, t in enumerate(pool.targets)}
        self.table = nn.Linear(len(pool), 3 * patch_hw[0] * patch_hw[1])

    def patch_for(self, target: AttackTarget) -> torch.Tensor:
        key = target.key()
        if key not in self._index:
            raise TriggerError(f"target {target.describe()} not in this generator's pool")
        onehot = torch.zeros(len(self.pool), dtype=self.table.weight.dtype)
        onehot[self._index[key]] = 1.0
        return self.table(onehot).view(3, *self.patch_hw)


TriggerGenerator = DisentangledTriggerGenerator | FlatTriggerGenerator


def generate_patch(gen: TriggerGenerator, target: AttackTarget) -> torch.Tensor:
    """Raw (pre-sigmoid) 3 x h_p x w_p patch for one target."""
    return gen.patch_for(target)


def mosaic(patch: torch.Tensor, image_size: tuple[int, int]) -> torch.Tensor:
    """Tile a patch over the image plane, zero-padding partial strips.

    Only full tiles are placed: position (x, y) carries the patch value
    at (x mod w_p, y mod h_p) while floor(x / w_p) < floor(W / w_p) and
    floor(y / h_p) < floor(H / h_p), and zero elsewhere. A patch that
    fits no full tile yields an all-zero field.
    """
    if patch.dim() != 3:
        raise TriggerError(f"patch must be C x h x w, got shape {tuple(patch.shape)}")
    w, h = image_size
    c, ph, pw = patch.shape
    n_x = w // pw
    n_y = h // ph
    if n_x == 0 or n_y == 0:
        return patch.new_zeros((c, h, w))
    tiled = patch.repeat(1, n_y, n_x)
    return F.pad(tiled, (0, w - n_x * pw, 0, h - n_y * ph))


def perturbation_field(gen: TriggerGenerator, target: AttackTarget, image_size: tuple[int, int], cfg: InjectionConfig) -> torch.Tensor:
    raw = generate_patch(gen, target)
    if cfg.centered_sigmoid:
        bounded = cfg.epsilon * (2.0 * torch.sigmoid(raw) - 1.0)
    else:
        bounded = cfg.epsilon * torch.sigmoid(raw)
    return mosaic(bounded, image_size)


def inject(x: torch.Tensor, gen: TriggerGenerator, target: AttackTarget, cfg: InjectionConfig) -> torch.Tensor:
    """Trigger-injected image, clipped back to [0, 1].

    ``x`` is 3 x H x W (or B x 3 x H x W; the same trigger is applied to
    every image in the batch). Differentiable in the generator
    parameters, so calls during training must happen inside the graph.
    """
    if x.dim() == 4:
        h, w = x.shape[2], x.shape[3]
    elif x.dim() == 3:
        h, w = x.shape[1], x.shape[2]
    else:
        raise TriggerError(f"expected 3d or 4d image tensor, got shape {tuple(x.shape)}")
    field = perturbation_field(gen, target, (w, h), cfg).to(x.dtype)
    return torch.clamp(x + field, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Persistence


def parameter_checksum(module: nn.Module) -> str:
    """sha256 over the named parameters, order-stable; used to prove freezes."""
    digest = hashlib.sha256()
    for name, param in sorted(module.named_parameters()):
        digest.update(name.encode())
        digest.update(param.detach().cpu().to(torch.float32).numpy().tobytes())
    return digest.hexdigest()


def save_generator(gen: TriggerGenerator, path: str | Path) -> None:
    payload = {
        "kind": gen.kind,
        "k": gen.k,
        "patch_hw": tuple(gen.patch_hw),
        "state_dict": gen.state_dict(),
    }
    if gen.kind == "flat":
        payload["pool_json"] = gen.pool.to_json()
    torch.save(payload, str(path))


def load_generator(path: str | Path) -> TriggerGenerator:
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    if payload["kind"] == "disentangled":
        gen = DisentangledTriggerGenerator(payload["k"], tuple(payload["patch_hw"]))
    elif payload["kind"] == "flat":
        gen = FlatTriggerGenerator(TargetPool.from_json(payload["pool_json"]), tuple(payload["patch_hw"]))
    else:
        raise TriggerError(f"unknown generator kind {payload['kind']!r}")
    gen.load_state_dict(payload["state_dict"])
    return gen


def patch_to_image(gen: TriggerGenerator, target: AttackTarget) -> np.ndarray:
    """Sigmoid-mapped patch as an H x W x 3 float image for visualization."""
    with torch.no_grad():
        vis = torch.sigmoid(generate_patch(gen, target))
    return vis.permute(1, 2, 0).cpu().numpy().astype(np.float32)
