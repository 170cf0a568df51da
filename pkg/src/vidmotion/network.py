"""Toy inflated 3D U-Net noise predictor, ControlNet-style conditioning, and
the pose encoder.

Two resolution levels; each U-Net block runs cross-frame attention, text
cross-attention, and temporal attention (residual + pre-layer-norm each). The
reconstruction role writes decoder-layer keys/values into a ReconCache; the
editing role consumes them through the injection machinery at gated layers.
Spatial mixing comes from the attention kernels, so all "convolutions" are
pointwise token projections and resolution changes are average-pool / nearest
repeat.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import adapter as AD
from . import attention as A
from . import injection as I
from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    """Input does not match the network configuration."""


TOPOLOGY: dict[str, str] = {
    "enc0": "encoder", "enc1": "encoder", "mid": "mid",
    "dec1": "decoder", "dec0": "decoder",
}
BLOCK_ORDER = ("enc0", "enc1", "mid", "dec1", "dec0")
BLOCK_LEVEL = {"enc0": 0, "enc1": 1, "mid": 1, "dec1": 1, "dec0": 0}
CONTROL_BLOCKS = ("c_enc0", "c_enc1", "c_mid")
CONTROL_LEVEL = {"c_enc0": 0, "c_enc1": 1, "c_mid": 1}
CONTROLLED_LAYERS = ("dec1", "dec0")  # blocks that receive adapted residuals


@dataclass
class NetConfig:
    frames: int = 8
    image_size: int = 32
    channels: int = 4
    widths: tuple[int, int] = (32, 64)
    time_width: int = 32
    pool: int = 4  # fixed average-pool factor standing in for the VAE
    schedule_steps: int = 1000

    @property
    def latent_size(self) -> int:
        return self.image_size // self.pool

    def level_hw(self, level: int) -> tuple[int, int]:
        size = self.latent_size // (2 ** level)
        return size, size

    def level_tokens(self, level: int) -> int:
        h, w = self.level_hw(level)
        return h * w

    def level_shapes(self) -> dict[int, tuple[int, int]]:
        return {lvl: self.level_hw(lvl) for lvl in range(len(self.widths))}


# ---------------------------------------------------------------------------
# weights


@dataclass
class ModelWeights:
    """All tensors by canonical name, plus the configuration they belong to."""

    cfg: NetConfig
    params: dict[str, Tensor]

    def replace(self, subs: dict[str, Tensor]) -> "ModelWeights":
        merged = dict(self.params)
        for name, value in subs.items():
            if name not in merged:
                raise KeyError(f"unknown parameter {name!r}")
            merged[name] = value
        return ModelWeights(self.cfg, merged)

    def pset(self, prefix: str) -> A.ProjectionSet:
        p = self.params
        return A.ProjectionSet(p[f"{prefix}.w_q"], p[f"{prefix}.w_k"],
                               p[f"{prefix}.w_v"], p[f"{prefix}.w_out"])

    def ln(self, prefix: str) -> tuple[Tensor, Tensor]:
        return self.params[f"{prefix}.gamma"], self.params[f"{prefix}.beta"]

    def adapter_weights(self, level: int) -> AD.AdapterWeights:
        p = self.params
        pre = f"adapter{level}"
        return AD.AdapterWeights(
            ln_cross=AD.LayerNormParams(*self.ln(f"{pre}.ln_cross")),
            ln_temporal=AD.LayerNormParams(*self.ln(f"{pre}.ln_temporal")),
            cross=self.pset(f"{pre}.cross"),
            temporal=self.pset(f"{pre}.temporal"),
            conv1=p[f"{pre}.conv1"], conv2=p[f"{pre}.conv2"],
            out_proj=p[f"{pre}.out_proj"],
        )


def sinusoidal_table(steps: int, width: int) -> Tensor:
    """Fixed sin/cos time embeddings, one row per diffusion timestep."""
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = np.arange(steps)[:, None] * freqs[None, :]
    table = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    return Tensor(table[:, :width].astype(np.float32))


def _init_pset(rng: T.Rng, d: int, out: dict, prefix: str,
               out_std_scale: float = 0.1) -> None:
    # frozen residual branches start small so the stream keeps unit scale
    out.update(A.init_projection_set(
        rng, d, out_std=out_std_scale / math.sqrt(d)).named(prefix))


def _init_temporal_pset(rng: T.Rng, d: int, out: dict, prefix: str) -> None:
    # temporal attention is the freshly appended, trainable part: its values
    # run hot and its output projection is thin enough for the one-shot
    # protocol to rein in
    std = 1.0 / math.sqrt(d)
    out[f"{prefix}.w_q"] = rng.normal((d, d), std)
    out[f"{prefix}.w_k"] = rng.normal((d, d), std)
    out[f"{prefix}.w_v"] = rng.normal((d, d), 14.0 * std)
    out[f"{prefix}.w_out"] = rng.normal((d, d), 0.06 * std)


def _init_ln(d: int, out: dict, prefix: str) -> None:
    out[f"{prefix}.gamma"] = T.ones((d,))
    out[f"{prefix}.beta"] = T.zeros((d,))


def init_model(cfg: NetConfig, seed: int, pretrained_control: bool = True) -> ModelWeights:
    """Seeded construction. ControlNet output projections are zero at
    construction; with ``pretrained_control`` they are then given small seeded
    values so the pose path carries signal (the stand-in for a pre-trained
    conditioning network)."""
    rng = T.Rng(seed)
    d0, d1 = cfg.widths
    p: dict[str, Tensor] = {}

    p["unet.in_proj"] = rng.normal((cfg.channels, d0), 1.0 / math.sqrt(cfg.channels))
    p["unet.out_proj"] = rng.normal((d0, cfg.channels), 0.5 / math.sqrt(d0))
    p["unet.out_b"] = T.zeros((cfg.channels,))
    p["unet.down_proj"] = rng.normal((d0, d1), 1.0 / math.sqrt(d0))
    p["unet.up_proj"] = rng.normal((d1, d0), 1.0 / math.sqrt(d1))
    p["unet.time_table"] = sinusoidal_table(cfg.schedule_steps, cfg.time_width)
    for lid in BLOCK_ORDER:
        d = cfg.widths[BLOCK_LEVEL[lid]]
        pre = f"unet.{lid}"
        p[f"{pre}.conv_w"] = rng.normal((d, d), 0.1 / math.sqrt(d))
        p[f"{pre}.conv_b"] = T.zeros((d,))
        p[f"{pre}.time_proj"] = rng.normal((cfg.time_width, d),
                                           1.0 / math.sqrt(cfg.time_width))
        _init_ln(d, p, f"{pre}.ln_cs")
        _init_ln(d, p, f"{pre}.ln_cross")
        _init_ln(d, p, f"{pre}.ln_temporal")
        _init_pset(rng, d, p, f"{pre}.cs")
        _init_pset(rng, d, p, f"{pre}.cross", out_std_scale=0.02)
        _init_temporal_pset(rng, d, p, f"{pre}.temporal")

    p["control.in_proj"] = rng.normal((cfg.channels, d0), 1.0 / math.sqrt(cfg.channels))
    p["control.down_proj"] = rng.normal((d0, d1), 1.0 / math.sqrt(d0))
    p["control.pose0.w"] = rng.normal((1, d0), 1.0)
    p["control.pose0.b"] = T.zeros((d0,))
    p["control.pose1.w"] = rng.normal((d0, d1), 1.0 / math.sqrt(d0))
    p["control.pose1.b"] = T.zeros((d1,))
    for lid in CONTROL_BLOCKS:
        d = cfg.widths[CONTROL_LEVEL[lid]]
        pre = f"control.{lid}"
        p[f"{pre}.conv_w"] = rng.normal((d, d), 1.0 / math.sqrt(d))
        p[f"{pre}.conv_b"] = T.zeros((d,))
        p[f"{pre}.time_proj"] = rng.normal((cfg.time_width, d),
                                           1.0 / math.sqrt(cfg.time_width))
        _init_ln(d, p, f"{pre}.ln_sp")
        _init_pset(rng, d, p, f"{pre}.spatial")
    p["control.zero.dec1"] = T.zeros((d1, d1))
    p["control.zero.dec0"] = T.zeros((d0, d0))

    for level, d in enumerate(cfg.widths):
        p.update(AD.init_adapter(rng, d).named(f"adapter{level}"))

    if pretrained_control:
        p["control.zero.dec1"] = rng.normal((d1, d1), 0.5 / math.sqrt(d1))
        p["control.zero.dec0"] = rng.normal((d0, d0), 0.5 / math.sqrt(d0))
    return ModelWeights(cfg, p)


def trainable_names(model: ModelWeights) -> set[str]:
    """One-shot training touches only the adapter and temporal attention."""
    names = set()
    for name in model.params:
        if name.startswith("adapter"):
            names.add(name)
        elif name.startswith("unet.") and (".temporal." in name
                                           or ".ln_temporal." in name):
            names.add(name)
    return names


def parameter_checksum(model: ModelWeights, names: set[str] | None = None) -> str:
    digest = hashlib.sha256()
    for name in sorted(names if names is not None else model.params):
        digest.update(name.encode())
        digest.update(model.params[name].data.tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# text conditioning

_EMBED_CACHE: dict[tuple[str, int], np.ndarray] = {}
UNCOND_TOKEN = "\x00uncond"


def _token_vector(token: str, d: int) -> np.ndarray:
    key = (token, d)
    cached = _EMBED_CACHE.get(key)
    if cached is None:
        seed = int.from_bytes(
            hashlib.blake2b(f"{token}|{d}".encode(), digest_size=8).digest(), "little")
        gen = np.random.Generator(np.random.PCG64(seed))
        cached = gen.normal(0.0, 1.0, d).astype(np.float32)
        _EMBED_CACHE[key] = cached
    return cached


def text_embedding(prompt: str | None, d: int) -> Tensor:
    """Hash-derived token embeddings; empty/None is the reserved unconditional
    embedding."""
    tokens = prompt.split() if prompt else []
    if not tokens:
        tokens = [UNCOND_TOKEN]
    return Tensor(np.stack([_token_vector(tok, d) for tok in tokens]))


# ---------------------------------------------------------------------------
# forward passes


def _tokens_from_latent(z: Tensor, cfg: NetConfig) -> Tensor:
    f, c, h, w = z.shape
    return T.transpose(T.reshape(z, (f, c, h * w)), (0, 2, 1))


def _latent_from_tokens(x: Tensor, cfg: NetConfig) -> Tensor:
    f, n, c = x.shape
    h = w = cfg.latent_size
    return T.reshape(T.transpose(x, (0, 2, 1)), (f, c, h, w))


def _pool2_tokens(x: Tensor, h: int, w: int) -> Tensor:
    f, n, d = x.shape
    g = T.reshape(x, (f, h // 2, 2, w // 2, 2, d))
    g = T.mean(g, axis=2)
    g = T.mean(g, axis=3)
    return T.reshape(g, (f, (h // 2) * (w // 2), d))


def _upsample2_tokens(x: Tensor, h: int, w: int) -> Tensor:
    f, n, d = x.shape
    g = T.reshape(x, (f, h, w, d))
    g = T.repeat_axis(g, 1, 2)
    g = T.repeat_axis(g, 2, 2)
    return T.reshape(g, (f, 4 * h * w, d))


def _time_vector(model: ModelWeights, t: int, proj: Tensor) -> Tensor:
    table = model.params["unet.time_table"]
    row = T.slice_axis(table, 0, t, t + 1)
    return T.matmul(row, proj)  # (1, d)


def _frame_shifted(x: Tensor) -> Tensor:
    """Stack of preceding-frame tokens with the frame-0 clamp."""
    frames = x.shape[0]
    if frames == 1:
        return x
    return T.concat([T.slice_axis(x, 0, 0, 1), T.slice_axis(x, 0, 0, frames - 1)],
                    axis=0)


def _cs_sub_block(x: Tensor, model: ModelWeights, lid: str, t: int, role: str,
                  cache: I.ReconCache | None, masks: I.LatentMask | None,
                  inj: I.InjectionSettings | None, injecting: bool) -> Tensor:
    level = BLOCK_LEVEL[lid]
    pset = model.pset(f"unet.{lid}.cs")
    a_in = T.layer_norm(x, *model.ln(f"unet.{lid}.ln_cs"))
    frames, n, d = a_in.shape
    q = A.project_tokens(a_in, pset.w_q)
    kv_in = T.concat([_frame_shifted(a_in), a_in], axis=1)  # (F, 2N, d)
    k = A.project_tokens(kv_in, pset.w_k)
    v = A.project_tokens(kv_in, pset.w_v)
    if role == "recon" and injecting:
        for i in range(frames):
            cache.put_cs(lid, t, i, k.data[i], v.data[i])
    if role == "edit" and injecting:
        outs = []
        for i in range(frames):
            k_r, v_r = cache.get_cs(lid, t, i)
            mask2n = masks.cs_tokens(level, i)
            recon = I.decouple_kv(k_r, v_r, mask2n)
            k_i = T.reshape(T.slice_axis(k, 0, i, i + 1), (2 * n, d))
            v_i = T.reshape(T.slice_axis(v, 0, i, i + 1), (2 * n, d))
            cur = (T.slice_axis(k_i, 0, n, 2 * n), T.slice_axis(v_i, 0, n, 2 * n))
            k_inj, v_inj = I.build_injected_kv(
                recon, cur, drop_masked_tokens=inj.drop_masked_tokens, mask=mask2n)
            q_i = T.reshape(T.slice_axis(q, 0, i, i + 1), (n, d))
            outs.append(T.reshape(A.attend(q_i, k_inj, v_inj), (1, n, d)))
        att = T.concat(outs, axis=0)
    else:
        att = A.attend_batched(q, k, v)
    return A.project_tokens(att, pset.w_out)


def _cross_sub_block(x: Tensor, model: ModelWeights, lid: str,
                     text: Tensor) -> Tensor:
    pset = model.pset(f"unet.{lid}.cross")
    c_in = T.layer_norm(x, *model.ln(f"unet.{lid}.ln_cross"))
    frames = x.shape[0]
    q = A.project_tokens(c_in, pset.w_q)
    k = T.matmul(text, pset.w_k)
    v = T.matmul(text, pset.w_v)
    n_tok, d = k.shape
    k3 = T.repeat_axis(T.reshape(k, (1, n_tok, d)), 0, frames)
    v3 = T.repeat_axis(T.reshape(v, (1, n_tok, d)), 0, frames)
    return A.project_tokens(A.attend_batched(q, k3, v3), pset.w_out)


def _temporal_sub_block(x: Tensor, model: ModelWeights, lid: str, t: int,
                        role: str, cache: I.ReconCache | None,
                        injecting: bool) -> Tensor:
    pset = model.pset(f"unet.{lid}.temporal")
    t_in = T.layer_norm(x, *model.ln(f"unet.{lid}.ln_temporal"))
    stacks = T.transpose(t_in, (1, 0, 2))  # (locations, frames, d)
    q = A.project_tokens(stacks, pset.w_q)
    k = A.project_tokens(stacks, pset.w_k)
    v = A.project_tokens(stacks, pset.w_v)
    if role == "recon" and injecting:
        cache.put_temporal(lid, t, k.data, v.data)
    if role == "edit" and injecting:
        k_r, v_r = cache.get_temporal(lid, t)
        att = I.inject_temporal(k_r, v_r, q)
    else:
        att = A.attend_batched(q, k, v)
    return A.project_tokens(T.transpose(att, (1, 0, 2)), pset.w_out)


def _unet_block(x: Tensor, model: ModelWeights, lid: str, t: int, text: Tensor,
                role: str, cache, masks, inj, probe) -> Tensor:
    pre = f"unet.{lid}"
    p = model.params
    gated = inj is not None and I.gate(lid, TOPOLOGY, inj.inject_mid)
    injecting = gated and (role == "recon" or (role == "edit" and inj.enabled))

    h = T.add(A.project_tokens(x, p[f"{pre}.conv_w"]), p[f"{pre}.conv_b"])
    t_emb = _time_vector(model, t, p[f"{pre}.time_proj"])
    h = T.silu(T.add(h, T.reshape(t_emb, (1, 1, h.shape[2]))))
    x = T.add(x, h)

    cs_out = _cs_sub_block(x, model, lid, t, role, cache, masks, inj, injecting)
    if probe is not None:
        probe[(lid, "cs")] = cs_out.data
    x = T.add(x, cs_out)

    cross_out = _cross_sub_block(x, model, lid, text)
    if probe is not None:
        probe[(lid, "cross")] = cross_out.data
    x = T.add(x, cross_out)

    temp_out = _temporal_sub_block(x, model, lid, t, role, cache, injecting)
    if probe is not None:
        probe[(lid, "temporal")] = temp_out.data
    x = T.add(x, temp_out)
    return x


def unet_forward(model: ModelWeights, z: Tensor, t: int, prompt: str | None,
                 control_feats: dict[str, Tensor] | None = None,
                 role: str = "plain", cache: I.ReconCache | None = None,
                 masks: I.LatentMask | None = None,
                 inj: I.InjectionSettings | None = None,
                 probe: dict | None = None) -> Tensor:
    """Predict noise for a latent video block.

    role "recon" writes decoder-layer keys/values to ``cache``; role "edit"
    replaces the gated layers' keys/values with injected stacks built from
    ``cache`` and ``masks``. The plain role touches neither.
    """
    cfg = model.cfg
    want = (cfg.frames, cfg.channels, cfg.latent_size, cfg.latent_size)
    if z.shape != want:
        raise ConfigError(f"latent shape {z.shape} does not match {want}")
    if not 0 <= t < cfg.schedule_steps:
        raise ConfigError(f"timestep {t} outside [0, {cfg.schedule_steps})")
    if role not in ("plain", "recon", "edit"):
        raise ConfigError(f"unknown role {role!r}")
    if role in ("recon", "edit") and inj is None:
        inj = I.InjectionSettings()
    if role == "recon" and cache is None:
        raise ConfigError("reconstruction role needs a cache to write")
    if role == "edit" and inj.enabled and (cache is None or masks is None):
        raise ConfigError("editing role with injection needs cache and masks")

    d0, d1 = cfg.widths
    h0 = w0 = cfg.latent_size
    text0 = text_embedding(prompt, d0)
    text1 = text_embedding(prompt, d1)

    x = A.project_tokens(_tokens_from_latent(z, cfg), model.params["unet.in_proj"])
    x = _unet_block(x, model, "enc0", t, text0, role, cache, masks, inj, probe)
    skip0 = x
    x = A.project_tokens(_pool2_tokens(x, h0, w0), model.params["unet.down_proj"])
    x = _unet_block(x, model, "enc1", t, text1, role, cache, masks, inj, probe)
    skip1 = x
    x = _unet_block(x, model, "mid", t, text1, role, cache, masks, inj, probe)
    x = T.add(x, skip1)
    if control_feats is not None:
        x = T.add(x, AD.adapter_forward(control_feats["dec1"], x,
                                        model.adapter_weights(1)))
    x = _unet_block(x, model, "dec1", t, text1, role, cache, masks, inj, probe)
    x = _upsample2_tokens(A.project_tokens(x, model.params["unet.up_proj"]),
                          h0 // 2, w0 // 2)
    x = T.add(x, skip0)
    if control_feats is not None:
        x = T.add(x, AD.adapter_forward(control_feats["dec0"], x,
                                        model.adapter_weights(0)))
    x = _unet_block(x, model, "dec0", t, text0, role, cache, masks, inj, probe)
    eps = T.add(A.project_tokens(x, model.params["unet.out_proj"]),
                model.params["unet.out_b"])
    return _latent_from_tokens(eps, cfg)


def pose_encode(model: ModelWeights, raster: np.ndarray) -> dict[int, Tensor]:
    """Strided feature pyramid from one skeleton raster, per U-Net level."""
    cfg = model.cfg
    raster = np.asarray(raster, dtype=np.float32)
    if raster.shape != (cfg.image_size, cfg.image_size):
        raise ConfigError(f"skeleton raster {raster.shape} does not match "
                          f"image size {cfg.image_size}")
    p = model.params
    img = Tensor(raster / 255.0)
    hs = cfg.latent_size
    # fixed stride-`pool` average pooling down to the latent grid
    g = T.reshape(img, (hs, cfg.pool, hs, cfg.pool))
    g = T.mean(g, axis=1)
    g = T.mean(g, axis=2)
    flat = T.reshape(g, (hs * hs, 1))
    lvl0 = T.silu(T.add(T.matmul(flat, p["control.pose0.w"]), p["control.pose0.b"]))
    h1 = hs // 2
    g1 = T.reshape(lvl0, (1, hs * hs, lvl0.shape[1]))
    g1 = _pool2_tokens(g1, hs, hs)
    g1 = T.reshape(g1, (h1 * h1, lvl0.shape[1]))
    lvl1 = T.silu(T.add(T.matmul(g1, p["control.pose1.w"]), p["control.pose1.b"]))
    return {0: lvl0, 1: lvl1}


def _control_block(x: Tensor, model: ModelWeights, lid: str, t: int) -> Tensor:
    pre = f"control.{lid}"
    p = model.params
    h = T.add(A.project_tokens(x, p[f"{pre}.conv_w"]), p[f"{pre}.conv_b"])
    t_emb = _time_vector(model, t, p[f"{pre}.time_proj"])
    h = T.silu(T.add(h, T.reshape(t_emb, (1, 1, h.shape[2]))))
    x = T.add(x, h)
    pset = model.pset(f"{pre}.spatial")
    a_in = T.layer_norm(x, *model.ln(f"{pre}.ln_sp"))
    q = A.project_tokens(a_in, pset.w_q)
    k = A.project_tokens(a_in, pset.w_k)
    v = A.project_tokens(a_in, pset.w_v)
    att = A.project_tokens(A.attend_batched(q, k, v), pset.w_out)
    return T.add(x, att)


def controlnet_forward(model: ModelWeights, z: Tensor, t: int,
                       skeletons: np.ndarray) -> dict[str, Tensor]:
    """Per-block conditioning features from pose maps; zero at construction.

    Returns one feature block per conditioned U-Net layer, shaped like that
    layer's activations.
    """
    cfg = model.cfg
    skeletons = np.asarray(skeletons)
    if skeletons.shape[0] != cfg.frames:
        raise ConfigError(f"got {skeletons.shape[0]} pose maps for "
                          f"{cfg.frames} frames")
    pyramids = [pose_encode(model, sk) for sk in skeletons]
    pose0 = T.concat([T.reshape(py[0], (1,) + py[0].shape) for py in pyramids], axis=0)
    pose1 = T.concat([T.reshape(py[1], (1,) + py[1].shape) for py in pyramids], axis=0)

    h0 = w0 = cfg.latent_size
    x = A.project_tokens(_tokens_from_latent(z, cfg), model.params["control.in_proj"])
    x = T.add(x, pose0)
    x = _control_block(x, model, "c_enc0", t)
    f0 = x
    x = A.project_tokens(_pool2_tokens(x, h0, w0), model.params["control.down_proj"])
    x = T.add(x, pose1)
    x = _control_block(x, model, "c_enc1", t)
    x = _control_block(x, model, "c_mid", t)
    return {
        "dec1": A.project_tokens(x, model.params["control.zero.dec1"]),
        "dec0": A.project_tokens(f0, model.params["control.zero.dec0"]),
    }


def save_checkpoint(directory, model: ModelWeights) -> None:
    """Directory of MELT tensors plus a JSON manifest (shapes, topology,
    gating table). Writes are deterministic: same weights, same bytes."""
    import json
    import os

    os.makedirs(directory, exist_ok=True)
    manifest = {
        "config": {
            "frames": model.cfg.frames, "image_size": model.cfg.image_size,
            "channels": model.cfg.channels, "widths": list(model.cfg.widths),
            "time_width": model.cfg.time_width, "pool": model.cfg.pool,
            "schedule_steps": model.cfg.schedule_steps,
        },
        "topology": TOPOLOGY,
        "gating": {lid: TOPOLOGY[lid] == "decoder" for lid in BLOCK_ORDER},
        "tensors": {},
    }
    for name in sorted(model.params):
        fname = name.replace(".", "_") + ".melt"
        manifest["tensors"][name] = {
            "file": fname, "shape": list(model.params[name].shape)}
        T.save_tensor(os.path.join(directory, fname), model.params[name])
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_checkpoint(directory) -> ModelWeights:
    import json
    import os

    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    c = manifest["config"]
    cfg = NetConfig(frames=c["frames"], image_size=c["image_size"],
                    channels=c["channels"], widths=tuple(c["widths"]),
                    time_width=c["time_width"], pool=c["pool"],
                    schedule_steps=c["schedule_steps"])
    params = {}
    for name, meta in manifest["tensors"].items():
        t = T.load_tensor(os.path.join(directory, meta["file"]))
        if list(t.shape) != meta["shape"]:
            raise ConfigError(f"checkpoint tensor {name} has shape "
                              f"{t.shape}, manifest says {meta['shape']}")
        params[name] = t
    return ModelWeights(cfg, params)


def encode_video(video: Tensor, cfg: NetConfig) -> Tensor:
    """Fixed average-pool toy encoder: (F,C,H,W) pixels -> latent grid."""
    f, c, h, w = video.shape
    if h != cfg.image_size or w != cfg.image_size or c != cfg.channels:
        raise ConfigError(f"video shape {video.shape} does not match config")
    k = cfg.pool
    g = T.reshape(video, (f, c, h // k, k, w // k, k))
    g = T.mean(g, axis=3)
    g = T.mean(g, axis=4)
    return g


def decode_latent(latent: Tensor, cfg: NetConfig) -> Tensor:
    """Nearest-upsample preview decoder (the inverse resolution map only)."""
    g = T.repeat_axis(latent, 2, cfg.pool)
    return T.repeat_axis(g, 3, cfg.pool)
