"""Foreground/background key-value decoupling and cross-branch injection.

The reconstruction branch's keys/values are split rowwise by a binary token
mask, then stacked together with the editing branch's current-frame block;
the editing branch's preceding-frame block is dropped. Temporal attention is
injected wholesale: queries from the editing branch, keys/values from the
reconstruction branch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention as A
from . import tensor as T
from .tensor import Tensor


class MaskError(ValueError):
    """Token mask is non-binary or has the wrong length."""


class CacheError(KeyError):
    """Reconstruction cache misuse: missing entry or write after freeze."""


class GateError(KeyError):
    """Layer id is not registered in the network topology."""


def _check_mask(mask: np.ndarray, n: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float32).reshape(-1)
    if mask.shape[0] != n:
        raise MaskError(f"mask length {mask.shape[0]} != token count {n}")
    if not np.isin(mask, (0.0, 1.0)).all():
        raise MaskError("mask values must be exactly 0 or 1")
    return mask


def decouple_kv(k: Tensor, v: Tensor, mask) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Split keys/values rowwise into (K_fg, V_fg, K_bg, V_bg).

    A token's whole d-vector is kept or zeroed, so K_fg + K_bg == K exactly.
    """
    if k.shape != v.shape or k.data.ndim != 2:
        raise T.ShapeError(f"keys/values must be matching n x d, got {k.shape} "
                           f"and {v.shape}")
    m = _check_mask(mask, k.shape[0])
    col = Tensor(m.reshape(-1, 1))
    inv = Tensor(1.0 - m.reshape(-1, 1))
    return T.mul(k, col), T.mul(v, col), T.mul(k, inv), T.mul(v, inv)


def build_injected_kv(recon: tuple[Tensor, Tensor, Tensor, Tensor],
                      edit_cur: tuple[Tensor, Tensor],
                      drop_masked_tokens: bool = False,
                      mask=None) -> tuple[Tensor, Tensor]:
    """Stack [K_fg, K_bg, K_cur] (and likewise for values).

    Default keeps zeroed rows, giving exactly 5N tokens for N-token frames.
    With ``drop_masked_tokens`` the zeroed rows are removed instead (3N
    tokens), which needs the mask to know which rows survive.
    """
    k_fg, v_fg, k_bg, v_bg = recon
    k_cu, v_cu = edit_cur
    widths = {t.shape[1] for t in (k_fg, v_fg, k_bg, v_bg, k_cu, v_cu)}
    if len(widths) != 1:
        raise T.ShapeError(f"key/value widths disagree: {sorted(widths)}")
    if k_fg.shape != k_bg.shape or v_fg.shape != v_bg.shape:
        raise T.ShapeError("foreground/background blocks must match shapes")
    if not drop_masked_tokens:
        return (T.concat([k_fg, k_bg, k_cu], axis=0),
                T.concat([v_fg, v_bg, v_cu], axis=0))
    m = _check_mask(mask, k_fg.shape[0]).astype(bool)
    fg_rows = [i for i in range(len(m)) if m[i]]
    bg_rows = [i for i in range(len(m)) if not m[i]]

    def take(t, rows):
        return T.concat([T.slice_axis(t, 0, i, i + 1) for i in rows], axis=0)

    parts_k = [take(k_fg, fg_rows)] if fg_rows else []
    parts_k += [take(k_bg, bg_rows)] if bg_rows else []
    parts_v = [take(v_fg, fg_rows)] if fg_rows else []
    parts_v += [take(v_bg, bg_rows)] if bg_rows else []
    return (T.concat(parts_k + [k_cu], axis=0),
            T.concat(parts_v + [v_cu], axis=0))


def inject_temporal(recon_k: Tensor, recon_v: Tensor, edit_q: Tensor) -> Tensor:
    """Temporal attention with editing queries over reconstruction keys/values."""
    if recon_k.shape != recon_v.shape:
        raise T.ShapeError(f"recon key/value shapes differ: {recon_k.shape} "
                           f"vs {recon_v.shape}")
    if edit_q.shape[-1] != recon_k.shape[-1]:
        raise T.ShapeError(f"query width {edit_q.shape[-1]} != recon width "
                           f"{recon_k.shape[-1]}")
    if edit_q.data.ndim == 3:
        if edit_q.shape[:2] != recon_k.shape[:2]:
            raise T.ShapeError(f"frame layout differs: {edit_q.shape} "
                               f"vs {recon_k.shape}")
        return A.attend_batched(edit_q, recon_k, recon_v)
    if edit_q.shape[0] != recon_k.shape[0]:
        raise T.ShapeError(f"frame count {edit_q.shape[0]} != recon "
                           f"{recon_k.shape[0]}")
    return A.attend(edit_q, recon_k, recon_v)


def gate(layer_id: str, topology: dict[str, str], inject_mid: bool = False) -> bool:
    """True iff injection is active for this layer (decoder half only)."""
    try:
        half = topology[layer_id]
    except KeyError:
        raise GateError(f"unknown layer id {layer_id!r}") from None
    if half == "decoder":
        return True
    if half == "mid":
        return inject_mid
    return False


@dataclass
class InjectionSettings:
    """How the editing branch consumes the reconstruction cache."""

    enabled: bool = True
    inject_mid: bool = False
    drop_masked_tokens: bool = False
    window_fraction: float = 1.0  # inject during the trailing fraction of steps

    def active_at(self, step_index: int, total_steps: int) -> bool:
        if not self.enabled:
            return False
        start = (1.0 - self.window_fraction) * total_steps
        return step_index >= start - 1e-9


def downsample_mask(mask_hw: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor downsample then re-binarize at 0.5."""
    mask_hw = np.asarray(mask_hw, dtype=np.float32)
    h, w = mask_hw.shape
    rows = ((np.arange(out_h) + 0.5) * h / out_h).astype(int).clip(0, h - 1)
    cols = ((np.arange(out_w) + 0.5) * w / out_w).astype(int).clip(0, w - 1)
    sampled = mask_hw[np.ix_(rows, cols)]
    return (sampled >= 0.5).astype(np.float32)


@dataclass
class LatentMask:
    """Per-frame binary token masks at each layer resolution."""

    levels: dict[int, np.ndarray]  # level -> (frames, tokens), values in {0,1}

    @classmethod
    def from_rasters(cls, masks: np.ndarray,
                     level_shapes: dict[int, tuple[int, int]]) -> "LatentMask":
        """Build the pyramid from (frames, H, W) binary rasters."""
        masks = np.asarray(masks, dtype=np.float32)
        levels = {}
        for level, (h, w) in level_shapes.items():
            per_frame = [downsample_mask(m, h, w).reshape(-1) for m in masks]
            levels[level] = np.stack(per_frame, axis=0)
        return cls(levels)

    def tokens(self, level: int, frame: int) -> np.ndarray:
        return self.levels[level][frame]

    def cs_tokens(self, level: int, frame: int) -> np.ndarray:
        """2N mask aligned with [preceding, current] keys (frame 0 clamps)."""
        prev = self.levels[level][max(frame - 1, 0)]
        return np.concatenate([prev, self.levels[level][frame]])


class ReconCache:
    """Write-once store of reconstruction-branch keys/values.

    Cross-frame entries are keyed (layer, timestep, frame); temporal entries
    are keyed (layer, timestep) and hold per-location stacks. Once frozen the
    cache is read-only, so the editing branch can never recompute or alter
    reconstruction keys/values.
    """

    def __init__(self):
        self.cs: dict[tuple[str, int, int], tuple[np.ndarray, np.ndarray]] = {}
        self.temporal: dict[tuple[str, int], tuple[np.ndarray, np.ndarray]] = {}
        self.frozen = False
        self.writes = 0
        self.reads = 0
        self.reads_cs = 0
        self.reads_temporal = 0

    def _check_writable(self, key) -> None:
        if self.frozen:
            raise CacheError(f"cache is frozen; rejected write for {key}")

    def put_cs(self, layer: str, t: int, frame: int,
               k: np.ndarray, v: np.ndarray) -> None:
        key = (layer, t, frame)
        self._check_writable(key)
        if key in self.cs:
            raise CacheError(f"duplicate cache write for {key}")
        self.cs[key] = (np.array(k, copy=True), np.array(v, copy=True))
        self.writes += 1

    def put_temporal(self, layer: str, t: int,
                     k: np.ndarray, v: np.ndarray) -> None:
        key = (layer, t)
        self._check_writable(key)
        if key in self.temporal:
            raise CacheError(f"duplicate cache write for {key}")
        self.temporal[key] = (np.array(k, copy=True), np.array(v, copy=True))
        self.writes += 1

    def get_cs(self, layer: str, t: int, frame: int) -> tuple[Tensor, Tensor]:
        try:
            k, v = self.cs[(layer, t, frame)]
        except KeyError:
            raise CacheError(f"cache miss: cross-frame entry "
                             f"({layer!r}, t={t}, frame={frame})") from None
        self.reads += 1
        self.reads_cs += 1
        return Tensor(k), Tensor(v)

    def get_temporal(self, layer: str, t: int) -> tuple[Tensor, Tensor]:
        try:
            k, v = self.temporal[(layer, t)]
        except KeyError:
            raise CacheError(f"cache miss: temporal entry "
                             f"({layer!r}, t={t})") from None
        self.reads += 1
        self.reads_temporal += 1
        return Tensor(k), Tensor(v)

    def freeze(self) -> None:
        self.frozen = True
