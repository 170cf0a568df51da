"""Command-line entry points: align, train, reconstruct, edit, selftest.

Exit codes: 0 success, 1 check failure, 2 usage or input error. Every
command writes only under its --out directory and is byte-deterministic for
a fixed config and seed.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time

import numpy as np

from . import adapter as AD
from . import attention as A
from . import config as C
from . import diffusion as D
from . import gradcheck as G
from . import injection as I
from . import network as N
from . import pipeline as P
from . import skeleton as SK
from . import tensor as T

_INPUT_ERRORS = (C.ConfigError, N.ConfigError, P.JobError, SK.EmptyMaskError,
                 SK.RasterError, SK.KeypointError, D.ScheduleError,
                 T.ShapeError, I.MaskError, I.CacheError, I.GateError,
                 FileNotFoundError, NotADirectoryError)


# ---------------------------------------------------------------------------
# shared I/O helpers


def _load_raster_dir(path) -> np.ndarray:
    if not os.path.isdir(path):
        raise FileNotFoundError(f"frame directory not found: {path}")
    names = sorted(f for f in os.listdir(path) if f.endswith(".pgm"))
    if not names:
        raise FileNotFoundError(f"no .pgm frames in {path}")
    return np.stack([SK.read_pgm(os.path.join(path, n)) for n in names])


def _require_paths(cfg: C.Config, keys: list[str]) -> None:
    missing = [k for k in keys if k not in cfg.paths]
    if missing:
        raise C.ConfigError(f"config paths missing: {missing}")
    for k in keys:
        if not os.path.exists(cfg.paths[k]):
            raise FileNotFoundError(f"{k}: no such path {cfg.paths[k]}")


def _load_job(cfg: C.Config) -> P.EditJob:
    _require_paths(cfg, ["source_video", "source_masks", "source_skeletons",
                         "ref_skeletons", "ref_masks"])
    video = T.load_tensor(cfg.paths["source_video"])
    return P.EditJob(
        video=video,
        source_masks=(_load_raster_dir(cfg.paths["source_masks"]) >= 128
                      ).astype(np.float32),
        source_skeletons=_load_raster_dir(cfg.paths["source_skeletons"]
                                          ).astype(np.float32),
        ref_skeletons=_load_raster_dir(cfg.paths["ref_skeletons"]
                                       ).astype(np.float32),
        ref_masks=(_load_raster_dir(cfg.paths["ref_masks"]) >= 128
                   ).astype(np.float32),
        prompt_source=cfg.prompt_source,
        prompt_target=cfg.prompt_target,
        steps=cfg.sampler.steps,
        guidance=cfg.sampler.guidance,
        seed=cfg.seed,
        injection=cfg.injection,
        align_first_frame_only=cfg.align_first_frame_only,
        control_on_recon=cfg.control_on_recon,
    )


def _model_for(cfg: C.Config, checkpoint: str | None) -> N.ModelWeights:
    if checkpoint:
        return N.load_checkpoint(checkpoint)
    if "checkpoint" in cfg.paths:
        return N.load_checkpoint(cfg.paths["checkpoint"])
    return N.init_model(cfg.model, seed=cfg.seed)


def _schedule_for(cfg: C.Config) -> D.NoiseSchedule:
    return D.make_schedule(cfg.schedule.timesteps, cfg.schedule.beta_min,
                           cfg.schedule.beta_max)


def _write_latent_outputs(out_dir, name: str, latent: T.Tensor) -> None:
    T.save_tensor(os.path.join(out_dir, f"{name}.melt"), latent)
    preview_dir = os.path.join(out_dir, f"{name}_previews")
    os.makedirs(preview_dir, exist_ok=True)
    data = latent.data
    frames, channels = data.shape[0], data.shape[1]
    for f in range(frames):
        tiles = []
        for c in range(channels):
            ch = data[f, c].astype(np.float64)
            lo, hi = ch.min(), ch.max()
            tiles.append(np.zeros_like(ch) if hi == lo
                         else (ch - lo) / (hi - lo) * 255.0)
        SK.write_pgm(os.path.join(preview_dir, f"frame_{f:03d}.pgm"),
                     np.concatenate(tiles, axis=1))


def frame_metrics(a: T.Tensor, b: T.Tensor) -> list[dict]:
    """Per-frame RMSE and PSNR (reference range from the first argument).

    Identical frames report PSNR as +inf.
    """
    if a.shape != b.shape:
        raise T.ShapeError(f"frame metric shapes differ: {a.shape} vs {b.shape}")
    out = []
    for f in range(a.shape[0]):
        ref = a.data[f].astype(np.float64)
        diff = ref - b.data[f].astype(np.float64)
        mse = float((diff * diff).mean())
        rmse = math.sqrt(mse)
        data_range = float(ref.max() - ref.min())
        if mse == 0.0:
            psnr = math.inf
        elif data_range == 0.0:
            psnr = -math.inf if mse > 0 else math.inf
        else:
            psnr = 10.0 * math.log10(data_range * data_range / mse)
        out.append({"rmse": rmse, "psnr": psnr})
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_align(cfg: C.Config, out_dir: str) -> int:
    _require_paths(cfg, ["source_masks", "source_skeletons",
                         "ref_skeletons", "ref_masks"])
    src_sk = _load_raster_dir(cfg.paths["source_skeletons"]).astype(np.float32)
    src_m = (_load_raster_dir(cfg.paths["source_masks"]) >= 128).astype(np.float32)
    ref_sk = _load_raster_dir(cfg.paths["ref_skeletons"]).astype(np.float32)
    ref_m = (_load_raster_dir(cfg.paths["ref_masks"]) >= 128).astype(np.float32)
    counts = {arr.shape[0] for arr in (src_sk, src_m, ref_sk, ref_m)}
    if len(counts) != 1:
        raise P.JobError(f"frame counts disagree across inputs: {sorted(counts)}")
    os.makedirs(out_dir, exist_ok=True)
    reports = []
    for i in range(src_sk.shape[0]):
        try:
            res = SK.align(src_sk[i], src_m[i], ref_sk[i], ref_m[i])
        except (SK.EmptyMaskError, SK.RasterError) as exc:
            raise type(exc)(f"frame {i}: {exc}") from exc
        SK.write_pgm(os.path.join(out_dir, f"aligned_{i:03d}.pgm"), res.skeleton)
        reports.append({"frame": i, **res.report})
    with open(os.path.join(out_dir, "align_report.json"), "w") as fh:
        json.dump(reports, fh, indent=1, sort_keys=True)
    print(f"aligned {len(reports)} frames -> {out_dir}")
    return 0


def cmd_train(cfg: C.Config, out_dir: str) -> int:
    _require_paths(cfg, ["source_video", "source_skeletons"])
    video = T.load_tensor(cfg.paths["source_video"])
    skeletons = _load_raster_dir(cfg.paths["source_skeletons"]).astype(np.float32)
    model = N.init_model(cfg.model, seed=cfg.seed)
    schedule = _schedule_for(cfg)
    result = P.one_shot_train(model, video, skeletons, cfg.prompt_source,
                              steps=cfg.training.steps, lr=cfg.training.lr,
                              schedule=schedule, rng=T.Rng(cfg.seed))
    os.makedirs(out_dir, exist_ok=True)
    N.save_checkpoint(os.path.join(out_dir, "checkpoint"), result.model)
    with open(os.path.join(out_dir, "loss.csv"), "w") as fh:
        fh.write("step,loss\n")
        for i, value in enumerate(result.losses):
            fh.write(f"{i},{value:.8f}\n")
    if result.losses:
        first10 = float(np.mean(result.losses[:10]))
        last10 = float(np.mean(result.losses[-10:]))
        print(f"trained {len(result.losses)} steps: first-10 mean "
              f"{first10:.4f}, last-10 mean {last10:.4f}")
    return 0


def cmd_reconstruct(cfg: C.Config, out_dir: str, checkpoint: str | None) -> int:
    _require_paths(cfg, ["source_video", "source_skeletons"])
    model = _model_for(cfg, checkpoint)
    video = T.load_tensor(cfg.paths["source_video"])
    skeletons = _load_raster_dir(cfg.paths["source_skeletons"]).astype(np.float32)
    result = P.reconstruct(model, video, skeletons, cfg.prompt_source,
                           steps=cfg.sampler.steps, schedule=_schedule_for(cfg),
                           control_on_recon=cfg.control_on_recon)
    os.makedirs(out_dir, exist_ok=True)
    _write_latent_outputs(out_dir, "reconstructed", result.latent)
    z0 = N.encode_video(video, model.cfg)
    with open(os.path.join(out_dir, "reconstruct_report.json"), "w") as fh:
        json.dump({
            "inversion_timesteps": result.inversion.timesteps,
            "metrics_vs_source": frame_metrics(z0, result.latent),
        }, fh, indent=1, sort_keys=True)
    print(f"reconstructed -> {out_dir}")
    return 0


def cmd_edit(cfg: C.Config, out_dir: str, checkpoint: str | None) -> int:
    model = _model_for(cfg, checkpoint)
    job = _load_job(cfg)
    result = P.edit(job, model, _schedule_for(cfg))
    os.makedirs(out_dir, exist_ok=True)
    _write_latent_outputs(out_dir, "edited", result.edited)
    _write_latent_outputs(out_dir, "reconstructed", result.reconstructed)
    aligned_dir = os.path.join(out_dir, "aligned")
    os.makedirs(aligned_dir, exist_ok=True)
    for i, raster in enumerate(result.aligned_skeletons):
        SK.write_pgm(os.path.join(aligned_dir, f"frame_{i:03d}.pgm"), raster)
    with open(os.path.join(out_dir, "edit_report.json"), "w") as fh:
        json.dump({
            "align": result.align_reports,
            "inversion_timesteps": result.inversion.timesteps,
            "cache": {"writes": result.cache.writes,
                      "reads_cs": result.cache.reads_cs,
                      "reads_temporal": result.cache.reads_temporal},
            "sampler": {"steps": job.steps, "guidance": job.guidance},
            "injection_enabled": job.injection.enabled,
        }, fh, indent=1, sort_keys=True)
    print(f"edited -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# selftest


def _selftest_checks(seed: int, corrupt_gradient: bool):
    rng = np.random.default_rng(seed)

    def gen(shape, scale=1.0):
        return rng.normal(0, scale, shape).astype(np.float32)

    def check_primitive_gradients():
        w44 = T.Tensor(gen((4, 4)))
        w43 = T.Tensor(gen((4, 3)))
        p43 = T.Tensor(gen((4, 3)))
        p54 = T.Tensor(gen((5, 4)))
        kernel = T.Tensor([0.5, -1.0, 0.25])
        cases = {
            "matmul": lambda x: T.mean(T.mul(T.matmul(x, w43), p43)),
            "softmax": lambda x: T.mean(T.mul(T.softmax(x, axis=1), w44)),
            "layer_norm": lambda x: T.mean(T.mul(
                T.layer_norm(x, T.ones((4,)), T.zeros((4,))), w44)),
            "conv_temporal": lambda x: T.mean(T.mul(
                T.conv_temporal(x, kernel), p54)),
            "silu": lambda x: T.mean(T.mul(T.silu(x), w44)),
        }
        worst = 0.0
        for name, f in cases.items():
            shape = (5, 4) if name == "conv_temporal" else (4, 4)
            ok, err = G.check_gradient(f, gen(shape, 0.8))
            worst = max(worst, err)
            if not ok:
                return False, f"{name} relative error {err:.2e}"
        return True, f"worst relative error {worst:.2e}"

    def check_attention_gradients():
        p = A.init_projection_set(T.Rng(seed), 6)
        other = T.Tensor(gen((3, 6)))
        probe = T.Tensor(gen((3, 6)))
        kernels = {
            "attend": lambda x: A.attend(x, other, other),
            "cs": lambda x: A.cs_attention(other, x, p),
            "temporal": lambda x: A.temporal_attention(x, p),
            "cross": lambda x: A.content_cross_attention(x, other, p),
        }
        for name, k in kernels.items():
            ok, err = G.check_gradient(
                lambda x, k=k: T.mean(T.mul(k(x), probe)), gen((3, 6), 0.7))
            if not ok:
                return False, f"{name} relative error {err:.2e}"
        return True, "all four kernels within 1e-3"

    def check_adapter_gradients():
        w = AD.init_adapter(T.Rng(seed + 1), 6)
        transform = None
        if corrupt_gradient:
            def transform(name, grad):
                return grad * 1.5 + 0.05 if name == "adapter.conv1" else grad
        report = AD.adapter_grad_check(w, T.Rng(seed + 2), frames=2, tokens=3,
                                       grad_transform=transform)
        bad = [k for k, v in report.items() if k != "__all__" and not v["ok"]]
        return report["__all__"]["ok"], ("all parameters within 1e-3" if not bad
                                         else f"failing: {bad}")

    def check_unet_gradient():
        cfg = N.NetConfig()
        model = N.init_model(cfg, seed=seed)
        z = T.Tensor(gen((cfg.frames, cfg.channels, 8, 8), 0.5))
        probe = T.Tensor(gen(z.shape))
        name = "unet.dec0.temporal.w_out"

        def f(w):
            return T.mean(T.mul(
                N.unet_forward(model.replace({name: w}), z, 33, "p"), probe))

        v = gen(model.params[name].shape)
        v /= np.linalg.norm(v)
        ok, err = G.directional_check(f, model.params[name].data, v, h=5e-3)
        return ok, f"directional relative error {err:.2e}"

    def check_partition():
        for i in range(100):
            n = int(rng.integers(1, 65))
            d = int(rng.integers(1, 33))
            k, v = gen((n, d), 3.0), gen((n, d), 3.0)
            m = rng.integers(0, 2, n).astype(np.float32)
            k_fg, v_fg, k_bg, v_bg = I.decouple_kv(T.Tensor(k), T.Tensor(v), m)
            if not ((k_fg.data + k_bg.data == k).all()
                    and (v_fg.data + v_bg.data == v).all()):
                return False, f"partition broke at case {i}"
        return True, "100 random masks, bit-exact"

    def check_duplication():
        for i in range(50):
            d = int(rng.integers(2, 17))
            n = int(rng.integers(1, 9))
            p = A.init_projection_set(T.Rng(seed + 10 + i), d)
            z = T.Tensor(gen((n, d)))
            via_cs = A.cs_attention(z, z, p)
            plain = T.matmul(A.attend(T.matmul(z, p.w_q), T.matmul(z, p.w_k),
                                      T.matmul(z, p.w_v)), p.w_out)
            if np.abs(via_cs.data - plain.data).max() > 1e-5:
                return False, f"duplication reduction broke at case {i}"
        return True, "50 fixtures within 1e-5"

    def check_injection_layout():
        n, d = 4, 8
        k_r, v_r = T.Tensor(gen((2 * n, d))), T.Tensor(gen((2 * n, d)))
        mask = rng.integers(0, 2, 2 * n).astype(np.float32)
        recon = I.decouple_kv(k_r, v_r, mask)
        cur = (T.Tensor(gen((n, d))), T.Tensor(gen((n, d))))
        k_inj, v_inj = I.build_injected_kv(recon, cur)
        ok = (k_inj.shape == (5 * n, d)
              and (k_inj.data[:2 * n] == recon[0].data).all()
              and (k_inj.data[2 * n:4 * n] == recon[2].data).all()
              and (k_inj.data[4 * n:] == cur[0].data).all()
              and (v_inj.data[4 * n:] == cur[1].data).all())
        return ok, "5N layout, slices recover constituents"

    def check_ddim_identity():
        s = D.make_schedule()
        x0 = T.Tensor(gen((1, 4, 8, 8)))
        eps0 = T.Tensor(gen((1, 4, 8, 8)))
        fn = D.oracle_eps_fn(x0, s)
        start = D.q_sample(x0, 999, eps0, s)
        traj = D.ddim_sample(fn, start, D.subsequence(1000, 50), s)
        rms = float(np.sqrt(np.mean((traj.final.data - x0.data) ** 2)))
        if rms > 1e-4:
            return False, f"oracle round trip rms {rms:.2e}"
        x = T.Tensor(gen((2, 3)))
        eps = T.Tensor(gen((2, 3)))
        up = D.ddim_invert_step(x, eps, 200, 700, s)
        back = D.ddim_step(up, eps, 700, 200, s)
        gap = float(np.abs(back.data - x.data).max())
        if gap > 1e-6:
            return False, f"mutual inverse gap {gap:.2e}"
        return True, f"round trip rms {rms:.2e}, inverse gap {gap:.2e}"

    def check_gating():
        cfg = N.NetConfig()
        model = N.init_model(cfg, seed=seed + 3)
        z = T.Tensor(gen((cfg.frames, cfg.channels, 8, 8), 0.5))
        cache = I.ReconCache()
        N.unet_forward(model, z, 7, "p", role="recon", cache=cache)
        masks = I.LatentMask.from_rasters(
            (rng.uniform(size=(cfg.frames, 32, 32)) > 0.5).astype(np.float32),
            cfg.level_shapes())
        probe_on, probe_off = {}, {}
        N.unet_forward(model, z, 7, "p", role="edit", cache=cache, masks=masks,
                       inj=I.InjectionSettings(), probe=probe_on)
        N.unet_forward(model, z, 7, "p", role="edit",
                       inj=I.InjectionSettings(enabled=False), probe=probe_off)
        for lid in ("enc0", "enc1", "mid"):
            for kind in ("cs", "cross", "temporal"):
                if not np.array_equal(probe_on[(lid, kind)],
                                      probe_off[(lid, kind)]):
                    return False, f"encoder layer {lid}/{kind} changed"
        return True, "encoder layers bit-identical under injection"

    def check_alignment():
        mask = np.zeros((32, 32), dtype=np.float32)
        mask[8:24, 10:26] = 1.0  # square bbox: aspect ratio exactly 1
        skel = np.zeros((32, 32), dtype=np.float32)
        skel[12:20, 12:20] = 180.0
        res = SK.align(skel, mask, skel, mask)
        if not np.array_equal(res.skeleton, skel):
            return False, "identity fixture not reproduced"
        if res.report["ratio"] != 1.0 or res.report["offset"] != [0, 0]:
            return False, f"identity report {res.report}"
        shifted_m = np.roll(mask, (6, 6), axis=(0, 1))
        shifted_s = np.roll(skel, (6, 6), axis=(0, 1))
        res2 = SK.align(skel, mask, shifted_s, shifted_m)
        if res2.report["offset"] != [-6, -6]:
            return False, f"translation offset {res2.report['offset']}"
        if not np.allclose(res2.skeleton, skel):
            return False, "translation fixture not recovered"
        src = np.zeros((128, 128), dtype=np.float32)
        src[10:110, 30:90] = 1.0
        ref = np.zeros((128, 128), dtype=np.float32)
        ref[20:70, 40:65] = 1.0
        res3 = SK.align(src, src, ref, ref)
        if res3.report["w_star"] != 50:
            return False, f"hand-traced w_star {res3.report['w_star']}"
        return True, "identity, translation, and resize fixtures hold"

    def check_adapter_identity():
        w = AD.init_adapter(T.Rng(seed + 4), 8)
        for i in range(20):
            m = T.Tensor(gen((2, 3, 8), 2.0))
            z = T.Tensor(gen((2, 3, 8), 2.0))
            if not np.array_equal(AD.adapter_forward(m, z, w).data, m.data):
                return False, f"identity broke at fixture {i}"
        return True, "20 fixtures, bit-exact passthrough"

    def check_cfg_combine():
        u, c = T.Tensor(gen((4,))), T.Tensor(gen((4,)))
        ok = (D.cfg_combine(u, c, 0.0) is u and D.cfg_combine(u, c, 1.0) is c
              and D.cfg_combine(T.zeros((1,)), T.Tensor([2.0]), 7.5).item() == 15.0)
        return ok, "scales 0/1 exact, 7.5 extrapolates"

    return [
        ("gradient-primitives", check_primitive_gradients),
        ("gradient-attention", check_attention_gradients),
        ("gradient-adapter", check_adapter_gradients),
        ("gradient-unet", check_unet_gradient),
        ("partition-identity", check_partition),
        ("duplication-reduction", check_duplication),
        ("injection-layout", check_injection_layout),
        ("ddim-identities", check_ddim_identity),
        ("decoder-gating", check_gating),
        ("alignment-fixtures", check_alignment),
        ("adapter-identity", check_adapter_identity),
        ("cfg-combine", check_cfg_combine),
    ]


def cmd_selftest(seed: int = 0, corrupt_gradient: bool = False) -> int:
    started = time.perf_counter()
    failures = 0
    for name, check in _selftest_checks(seed, corrupt_gradient):
        t0 = time.perf_counter()
        try:
            ok, detail = check()
        except Exception as exc:  # a crashed check is a failed check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        elapsed = time.perf_counter() - t0
        status = "PASS" if ok else "FAIL"
        print(f"{status}  {name:<24} {elapsed:6.2f}s  {detail}")
        failures += 0 if ok else 1
    total = time.perf_counter() - started
    print(f"{'OK' if failures == 0 else 'FAILED'}: "
          f"{failures} failure(s), {total:.1f}s total")
    return 0 if failures == 0 else 1


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vidmotion",
        description="pose-driven video motion editing, desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="config JSON path")
        p.add_argument("--seed", type=int, default=None, help="override seed")
        p.add_argument("--out", default="out", help="output directory")

    p_align = sub.add_parser("align", help="align reference skeletons")
    common(p_align)

    p_train = sub.add_parser("train", help="one-shot training on the source")
    common(p_train)
    p_train.add_argument("--steps", type=int, default=None,
                         help="override training steps")

    for name in ("edit", "reconstruct"):
        p_cmd = sub.add_parser(name)
        common(p_cmd)
        p_cmd.add_argument("--checkpoint", default=None,
                           help="trained checkpoint directory")
        p_cmd.add_argument("--steps", type=int, default=None,
                           help="override sampler steps")
        p_cmd.add_argument("--guidance", type=float, default=None)
        p_cmd.add_argument("--no-injection", action="store_true")
        p_cmd.add_argument("--inject-mid", action="store_true")
        p_cmd.add_argument("--drop-masked-tokens", action="store_true")

    p_self = sub.add_parser("selftest", help="run the invariant suite")
    p_self.add_argument("--seed", type=int, default=0)
    p_self.add_argument("--corrupt-gradient", action="store_true",
                        help="negative control: break one backward rule")
    return parser


def _apply_overrides(cfg: C.Config, args) -> C.Config:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "steps", None) is not None:
        if args.command == "train":
            cfg.training.steps = args.steps
        else:
            cfg.sampler.steps = args.steps
    if getattr(args, "guidance", None) is not None:
        cfg.sampler.guidance = args.guidance
    if getattr(args, "no_injection", False):
        cfg.injection.enabled = False
    if getattr(args, "inject_mid", False):
        cfg.injection.inject_mid = True
    if getattr(args, "drop_masked_tokens", False):
        cfg.injection.drop_masked_tokens = True
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "selftest":
        return cmd_selftest(seed=args.seed,
                            corrupt_gradient=args.corrupt_gradient)
    try:
        cfg = _apply_overrides(C.load_config(args.config), args)
        if args.command == "align":
            return cmd_align(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.out)
        if args.command == "reconstruct":
            return cmd_reconstruct(cfg, args.out, args.checkpoint)
        if args.command == "edit":
            return cmd_edit(cfg, args.out, args.checkpoint)
        raise AssertionError(f"unhandled command {args.command!r}")
    except json.JSONDecodeError as exc:
        print(f"error: config parse failure at line {exc.lineno} "
              f"column {exc.colno}: {exc.msg}", file=sys.stderr)
        return 2
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
