"""End-to-end orchestration: one-shot training on the source video, DDIM
inversion, and two-branch editing with attention injection.

The reconstruction branch denoises the inverted source under the source
skeleton condition and fills the ReconCache; the editing branch then denoises
under the aligned target skeleton, reading injected keys/values at gated
layers. Reconstruction runs fully before editing (simplest order satisfying
the cache's write-once-then-read discipline).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffusion as D
from . import injection as I
from . import network as N
from . import skeleton as SK
from . import tensor as T
from .tensor import Tensor


class JobError(ValueError):
    """Inconsistent editing-job inputs."""


@dataclass
class EditJob:
    video: Tensor                 # (F, C, image, image) source pixels
    source_masks: np.ndarray      # (F, image, image) in {0,1}
    source_skeletons: np.ndarray  # (F, image, image) intensities
    ref_skeletons: np.ndarray
    ref_masks: np.ndarray
    prompt_source: str = ""
    prompt_target: str = ""
    steps: int = 50
    guidance: float = 7.5
    seed: int = 0
    injection: I.InjectionSettings = field(default_factory=I.InjectionSettings)
    align_first_frame_only: bool = False
    control_on_recon: bool = True

    def validate(self, cfg: N.NetConfig) -> None:
        frames = cfg.frames
        want = (frames, cfg.channels, cfg.image_size, cfg.image_size)
        if self.video.shape != want:
            raise JobError(f"video shape {self.video.shape} != {want}")
        per_frame = {
            "source_masks": self.source_masks,
            "source_skeletons": self.source_skeletons,
            "ref_skeletons": self.ref_skeletons,
            "ref_masks": self.ref_masks,
        }
        for name, arr in per_frame.items():
            arr = np.asarray(arr)
            if arr.shape != (frames, cfg.image_size, cfg.image_size):
                raise JobError(f"{name} shape {arr.shape} != "
                               f"{(frames, cfg.image_size, cfg.image_size)}")
        if self.steps < 1:
            raise JobError(f"sampler steps must be >= 1, got {self.steps}")
        if self.guidance < 0:
            raise JobError(f"guidance must be >= 0, got {self.guidance}")


@dataclass
class TrainResult:
    model: N.ModelWeights
    losses: list[float]


def one_shot_train(model: N.ModelWeights, video: Tensor,
                   skeletons: np.ndarray, prompt: str,
                   steps: int = 300, lr: float = 3e-5,
                   schedule: D.NoiseSchedule | None = None,
                   rng: T.Rng | None = None) -> TrainResult:
    """Fine-tune only the adapter and temporal attention to re-predict the
    noise on the source video (uniform timesteps, Adam, constant lr)."""
    schedule = schedule or D.make_schedule(model.cfg.schedule_steps)
    rng = rng or T.Rng(0)
    z0 = N.encode_video(video, model.cfg)
    names = sorted(N.trainable_names(model))
    params = {n: model.params[n] for n in names}
    state = T.AdamState(lr=lr)
    losses: list[float] = []
    skeletons = np.asarray(skeletons)
    for step in range(steps):
        t = rng.integer(0, schedule.timesteps)
        eps = rng.normal(z0.shape)
        x_t = D.q_sample(z0, t, eps, schedule)
        tape = T.Tape()
        watched = {n: tape.watch(p) for n, p in params.items()}
        m = model.replace(watched)
        feats = N.controlnet_forward(m, x_t, t, skeletons)
        eps_pred = N.unet_forward(m, x_t, t, prompt, control_feats=feats)
        loss = D.training_loss(eps_pred, eps)
        value = loss.item()
        if not np.isfinite(value):
            raise RuntimeError(f"non-finite training loss {value} at step {step} "
                               f"(timestep {t})")
        T.backward(tape, loss)
        grads = {n: tape.grad(w) for n, w in watched.items()}
        params = T.adam_step(params, grads, state)
        losses.append(value)
    return TrainResult(model.replace(params), losses)


def invert(model: N.ModelWeights, z0: Tensor, steps: int,
           schedule: D.NoiseSchedule | None = None,
           eps_fn: D.EpsFn | None = None,
           skeletons: np.ndarray | None = None,
           prompt: str | None = None) -> D.Trajectory:
    """DDIM inversion at guidance scale 1 (no extrapolation; the null-text
    stage is deliberately absent and ``eps_fn`` overrides the predictor for
    oracle tests).

    By default the predictor runs on the unconditional embedding; passing the
    branches' ``prompt`` and ``skeletons`` makes the inversion share their
    conditioning, so reconstruction undoes it without a predictor mismatch.
    """
    schedule = schedule or D.make_schedule(model.cfg.schedule_steps)
    ts = D.subsequence(schedule.timesteps, steps)
    if eps_fn is None:
        skels = None if skeletons is None else np.asarray(skeletons)

        def eps_fn(x, t):
            feats = (N.controlnet_forward(model, x, t, skels)
                     if skels is not None else None)
            return N.unet_forward(model, x, t, prompt, control_feats=feats)
    return D.ddim_invert(eps_fn, z0, ts, schedule)


def _denoise(model: N.ModelWeights, x_start: Tensor, ts: list[int],
             schedule: D.NoiseSchedule, prompt: str,
             skeletons: np.ndarray | None, guidance: float, role: str,
             cache: I.ReconCache | None, masks: I.LatentMask | None,
             inj: I.InjectionSettings, eps_fn: D.EpsFn | None = None,
             ) -> D.Trajectory:
    order = list(reversed(ts))
    total = len(order)
    traj = D.Trajectory()
    x = x_start
    traj.append(ts[-1], x)
    for idx, t in enumerate(order):
        if eps_fn is not None:
            eps = eps_fn(x, t)
        else:
            step_role = role if inj.active_at(idx, total) else "plain"
            feats = (N.controlnet_forward(model, x, t, skeletons)
                     if skeletons is not None else None)
            eps_c = N.unet_forward(model, x, t, prompt, control_feats=feats,
                                   role=step_role, cache=cache, masks=masks,
                                   inj=inj)
            if guidance == 1.0:
                eps = eps_c
            else:
                eps_u = N.unet_forward(model, x, t, None, control_feats=feats,
                                       role=step_role, cache=cache, masks=masks,
                                       inj=inj)
                eps = D.cfg_combine(eps_u, eps_c, guidance)
        t_prev = order[idx + 1] if idx + 1 < total else D.CLEAN_STEP
        x = D.ddim_step(x, eps, t, t_prev, schedule)
        traj.append(t_prev, x)
    return traj


@dataclass
class ReconstructResult:
    latent: Tensor
    inversion: D.Trajectory
    denoise: D.Trajectory


def reconstruct(model: N.ModelWeights, video: Tensor, skeletons: np.ndarray,
                prompt: str, steps: int = 50,
                schedule: D.NoiseSchedule | None = None,
                control_on_recon: bool = True,
                eps_fn: D.EpsFn | None = None) -> ReconstructResult:
    """Invert the source then denoise it back under the source skeleton
    condition at guidance 1, with no injection."""
    schedule = schedule or D.make_schedule(model.cfg.schedule_steps)
    z0 = N.encode_video(video, model.cfg)
    inv = invert(model, z0, steps, schedule, eps_fn=eps_fn,
                 skeletons=np.asarray(skeletons) if control_on_recon else None,
                 prompt=prompt)
    ts = D.subsequence(schedule.timesteps, steps)
    traj = _denoise(model, inv.final, ts, schedule, prompt,
                    np.asarray(skeletons) if control_on_recon else None,
                    guidance=1.0, role="plain", cache=None, masks=None,
                    inj=I.InjectionSettings(enabled=False), eps_fn=eps_fn)
    return ReconstructResult(traj.final, inv, traj)


@dataclass
class EditResult:
    edited: Tensor
    reconstructed: Tensor
    aligned_skeletons: np.ndarray
    align_reports: list[dict]
    inversion: D.Trajectory
    cache: I.ReconCache


def align_job_skeletons(job: EditJob) -> tuple[np.ndarray, list[dict]]:
    """Per-frame skeleton alignment (or frame-0 parameters reused when
    configured); alignment errors carry the frame index."""
    frames = len(job.ref_skeletons)
    aligned = []
    reports = []
    for i in range(frames):
        src_idx = 0 if job.align_first_frame_only else i
        try:
            res = SK.align(job.source_skeletons[src_idx],
                           job.source_masks[src_idx],
                           job.ref_skeletons[i],
                           job.ref_masks[0 if job.align_first_frame_only else i])
        except (SK.EmptyMaskError, SK.RasterError) as exc:
            raise type(exc)(f"frame {i}: {exc}") from exc
        aligned.append(res.skeleton)
        reports.append(res.report)
    return np.stack(aligned), reports


def edit(job: EditJob, model: N.ModelWeights,
         schedule: D.NoiseSchedule | None = None) -> EditResult:
    """Full two-branch motion edit.

    Align the reference skeletons, invert the source, run the reconstruction
    branch (writing the cache), then the editing branch (reading injected
    keys/values at gated layers under the target prompt and guidance).
    """
    cfg = model.cfg
    job.validate(cfg)
    schedule = schedule or D.make_schedule(cfg.schedule_steps)
    aligned, reports = align_job_skeletons(job)

    z0 = N.encode_video(job.video, cfg)
    inv = invert(model, z0, job.steps, schedule,
                 skeletons=np.asarray(job.source_skeletons)
                 if job.control_on_recon else None,
                 prompt=job.prompt_source)
    ts = D.subsequence(schedule.timesteps, job.steps)

    cache = I.ReconCache()
    recon_traj = _denoise(model, inv.final, ts, schedule, job.prompt_source,
                          np.asarray(job.source_skeletons)
                          if job.control_on_recon else None,
                          guidance=1.0, role="recon", cache=cache, masks=None,
                          inj=job.injection)
    cache.freeze()

    masks = I.LatentMask.from_rasters(np.asarray(job.source_masks),
                                      cfg.level_shapes())
    edit_traj = _denoise(model, inv.final, ts, schedule, job.prompt_target,
                         aligned, guidance=job.guidance, role="edit",
                         cache=cache, masks=masks, inj=job.injection)
    return EditResult(edit_traj.final, recon_traj.final, aligned, reports,
                      inv, cache)
