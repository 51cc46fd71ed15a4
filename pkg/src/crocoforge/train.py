"""Training drivers: masked completion pre-training and dense finetuning.

Losses are written against the autodiff tensors from :mod:`crocoforge.tensor`;
dataset builders produce exact dense ground truth from the synthetic scene
renderer (per-pixel point ids give disparity/flow without interpolation).
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import tensor as T
from . import model as M
from . import scene as S
from .tensor import Tensor, ContractViolation, NumericError


# ---------------------------------------------------------------------------
# losses


def completion_loss(
    pred: Tensor,
    image: np.ndarray,
    visible_ids: np.ndarray,
    patch_size: int,
) -> Tensor:
    """MSE between predicted and patch-normalized target tokens, averaged over
    *masked* tokens only.  Returns an exact zero if every token is visible."""
    tokens, _ = M.patchify(image, patch_size)
    target, _, _ = M.normalize_patches(tokens)
    n = tokens.shape[0]
    mask = np.ones(n, dtype=bool)
    mask[np.asarray(visible_ids, dtype=np.int64)] = False
    if not mask.any():
        return Tensor(np.zeros(()), requires_grad=False)
    diff = T.sub(pred, Tensor(target, requires_grad=False))
    sq = T.mul(diff, diff)
    w = Tensor(mask.astype(pred.data.dtype)[:, None], requires_grad=False)
    total = T.tsum(T.mul(sq, w))
    denom = float(mask.sum() * target.shape[1])
    return T.div(total, Tensor(np.asarray(denom, dtype=pred.data.dtype), requires_grad=False))


def _masked_mean(per_pixel: Tensor, valid: np.ndarray) -> Tensor:
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ContractViolation("loss undefined: empty valid mask")
    w = Tensor(valid.astype(per_pixel.data.dtype), requires_grad=False)
    return T.div(
        T.tsum(T.mul(per_pixel, w)),
        Tensor(np.asarray(float(valid.sum()), dtype=per_pixel.data.dtype), requires_grad=False),
    )


def l1_loss(mu: Tensor, gt: np.ndarray, valid: np.ndarray) -> Tensor:
    """Mean (over valid pixels) of the channel-summed absolute error."""
    err = T.absolute(T.sub(mu, Tensor(np.asarray(gt, dtype=mu.data.dtype), requires_grad=False)))
    if err.data.ndim == 3:
        err = T.tsum(err, axis=2)
    return _masked_mean(err, valid)


def laplacian_loss(pred: M.DensePrediction, gt: np.ndarray, valid: np.ndarray) -> Tensor:
    """Scale-aware regression loss |mu - gt| / d + log d with the scale d
    derived from the raw head channel via the prediction's parameterization.

    With d identically 1 this reduces exactly to :func:`l1_loss`."""
    mu, d_raw = pred.mu, pred.d_raw
    err = T.absolute(T.sub(mu, Tensor(np.asarray(gt, dtype=mu.data.dtype), requires_grad=False)))
    if err.data.ndim == 3:
        err = T.tsum(err, axis=2)
    d = M.scale_from_raw(d_raw, pred.param)
    per_pixel = T.add(T.div(err, d), T.log(d))
    return _masked_mean(per_pixel, valid)


# ---------------------------------------------------------------------------
# augmentation

STEREO_SCALE_RANGE = (2.0 ** -0.2, 2.0 ** 0.4)
FLOW_SCALE_RANGE = (2.0 ** -0.2, 2.0 ** 0.5)
STRETCH_RANGE = (2.0 ** -0.2, 2.0 ** 0.2)


@dataclass
class AugmentSample:
    """One training pair plus dense targets (gt may be None for pretraining)."""

    img_a: np.ndarray
    img_b: np.ndarray
    gt: np.ndarray | None = None  # (H,W) disparity or (H,W,2) flow
    valid: np.ndarray | None = None


def _color_jitter(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    gain = rng.uniform(0.8, 1.2, size=3)
    offset = rng.uniform(-0.08, 0.08, size=3)
    return np.clip(img * gain + offset, 0.0, 1.0)


def _zoom_image(img: np.ndarray, sy: float, sx: float) -> np.ndarray:
    return np.clip(ndimage.zoom(img, (sy, sx, 1), order=1), 0.0, 1.0)


def augment_pair(
    sample: AugmentSample, task: str, rng: np.random.Generator
) -> AugmentSample:
    """Photometric + geometric augmentation, applied consistently to both
    views and to the dense targets.  All randomness comes from ``rng``, so the
    transform is deterministic given the generator state; when every draw
    lands on identity the sample comes back unchanged."""
    if task not in ("stereo", "flow"):
        raise ContractViolation(f"unknown task {task!r}")
    img_a, img_b = sample.img_a, sample.img_b
    gt = None if sample.gt is None else sample.gt.copy()
    valid = None if sample.valid is None else sample.valid.copy()

    # asymmetric color jitter
    if rng.random() < 0.2:
        img_a = _color_jitter(img_a, rng)
        img_b = _color_jitter(img_b, rng)

    # vertical flip: disparity is purely horizontal so it is unchanged,
    # while the vertical flow component changes sign
    if rng.random() < 0.1:
        img_a = img_a[::-1].copy()
        img_b = img_b[::-1].copy()
        if gt is not None:
            gt = gt[::-1].copy()
            if task == "flow":
                gt[..., 1] = -gt[..., 1]
        if valid is not None:
            valid = valid[::-1].copy()

    # random rescaling with an extra horizontal stretch
    if rng.random() < 0.8:
        lo, hi = STEREO_SCALE_RANGE if task == "stereo" else FLOW_SCALE_RANGE
        s = 2.0 ** rng.uniform(math.log2(lo), math.log2(hi))
        sx = s * 2.0 ** rng.uniform(
            math.log2(STRETCH_RANGE[0]), math.log2(STRETCH_RANGE[1])
        )
        sy = s
        h, w = img_a.shape[:2]
        img_a = _zoom_image(img_a, sy, sx)
        img_b = _zoom_image(img_b, sy, sx)
        if gt is not None:
            if task == "stereo":
                gt = ndimage.zoom(gt, (sy, sx), order=0) * sx
            else:
                gt = ndimage.zoom(gt, (sy, sx, 1), order=0)
                gt[..., 0] *= sx
                gt[..., 1] *= sy
        if valid is not None:
            valid = ndimage.zoom(valid.astype(np.uint8), (sy, sx), order=0).astype(bool)
        # crop back to the original frame so batch shapes stay fixed
        hh, ww = img_a.shape[:2]
        y0 = rng.integers(0, hh - h + 1)
        x0 = rng.integers(0, ww - w + 1)
        img_a = img_a[y0 : y0 + h, x0 : x0 + w]
        img_b = img_b[y0 : y0 + h, x0 : x0 + w]
        if gt is not None:
            gt = gt[y0 : y0 + h, x0 : x0 + w]
        if valid is not None:
            valid = valid[y0 : y0 + h, x0 : x0 + w]

    # independent photometric jitter of the second view (stereo only)
    if task == "stereo" and rng.random() < 0.5:
        img_b = _color_jitter(img_b, rng)

    return AugmentSample(img_a=img_a, img_b=img_b, gt=gt, valid=valid)


# ---------------------------------------------------------------------------
# synthetic dense datasets


def _dense_scene(seed: int, image_size: int) -> tuple[S.ScenePointCloud, S.CameraPose]:
    """A cloud dense enough that splats cover most of the frame, viewed by a
    camera at the ring origin looking down +z."""
    rng = np.random.default_rng(seed)
    n = 900
    pts = np.empty((n, 3))
    pts[:, 0] = rng.uniform(-4.0, 4.0, n)
    pts[:, 1] = rng.uniform(-4.0, 4.0, n)
    pts[:, 2] = rng.uniform(6.0, 14.0, n)
    # Colors vary smoothly with 3d position so local texture is compressible
    # and the two views of a scene share matchable appearance.
    freqs = rng.uniform(0.4, 1.2, size=(3, 3))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
    colors = 0.55 + 0.4 * np.sin(pts @ freqs.T + phases)
    cloud = S.ScenePointCloud(points=pts, colors=colors)
    f = image_size * 1.2
    pose = S.CameraPose(
        rotation=np.eye(3),
        translation=np.zeros(3),
        fx=f,
        fy=f,
        cx=image_size / 2.0,
        cy=image_size / 2.0,
        width=image_size,
        height=image_size,
    )
    return cloud, pose


def _shifted_pose(pose: S.CameraPose, offset_cam: np.ndarray, rotation: np.ndarray | None = None) -> S.CameraPose:
    """Camera moved by ``offset_cam`` expressed in the first camera's frame."""
    r = pose.rotation if rotation is None else rotation
    center = -pose.rotation.T @ pose.translation + pose.rotation.T @ offset_cam
    return S.CameraPose(
        rotation=r,
        translation=-r @ center,
        fx=pose.fx,
        fy=pose.fy,
        cx=pose.cx,
        cy=pose.cy,
        width=pose.width,
        height=pose.height,
    )


def make_stereo_pair(seed: int, image_size: int = 64, baseline: float = 0.5) -> AugmentSample:
    """Rectified pair: the second camera is translated along +x, so the
    disparity of every covered pixel is exactly fx * baseline / depth."""
    cloud, pose_a = _dense_scene(seed, image_size)
    pose_b = _shifted_pose(pose_a, np.array([baseline, 0.0, 0.0]))
    img_a, depth, ids = S.render_with_buffers(cloud, pose_a, splat_radius=3)
    img_b = S.render(cloud, pose_b, splat_radius=3)
    valid = ids >= 0
    gt = np.zeros((image_size, image_size))
    gt[valid] = pose_a.fx * baseline / depth[valid]
    return AugmentSample(img_a=img_a.pixels, img_b=img_b.pixels, gt=gt, valid=valid)


def make_flow_pair(seed: int, image_size: int = 64) -> AugmentSample:
    """Two nearby views of the same cloud; per-pixel flow maps each covered
    pixel of the first view to the reprojection of its owning point."""
    rng = np.random.default_rng(seed ^ 0x5F0)
    cloud, pose_a = _dense_scene(seed, image_size)
    offset = np.array([rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), rng.uniform(-0.3, 0.3)])
    pose_b = _shifted_pose(pose_a, offset)
    img_a, _, ids = S.render_with_buffers(cloud, pose_a, splat_radius=3)
    img_b = S.render(cloud, pose_b, splat_radius=3)
    valid = ids >= 0
    pix_b, z_b = pose_b.project(cloud.points)
    gt = np.zeros((image_size, image_size, 2))
    vv, uu = np.nonzero(valid)
    owners = ids[vv, uu]
    in_front = z_b[owners] > 0
    vv, uu, owners = vv[in_front], uu[in_front], owners[in_front]
    valid = np.zeros_like(valid)
    valid[vv, uu] = True
    gt[vv, uu, 0] = pix_b[owners, 0] - uu
    gt[vv, uu, 1] = pix_b[owners, 1] - vv
    return AugmentSample(img_a=img_a.pixels, img_b=img_b.pixels, gt=gt, valid=valid)


def make_dense_dataset(task: str, n_pairs: int, seed: int, image_size: int = 64) -> list[AugmentSample]:
    maker = make_stereo_pair if task == "stereo" else make_flow_pair
    return [maker(seed * 1000 + i, image_size=image_size) for i in range(n_pairs)]


# ---------------------------------------------------------------------------
# training configuration and drivers


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 4
    base_lr: float = 1e-3
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    seed: int = 0
    mask_ratio: float = 0.9
    loss: str = "laplacian"  # or "l1" for finetuning
    augment: bool = False
    holdout_frac: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)


def _params_and_grads(params: dict[str, Tensor]) -> tuple[dict[str, Tensor], dict[str, np.ndarray]]:
    grads = {}
    for name, p in params.items():
        if p.grad is None:
            grads[name] = np.zeros_like(p.data)
        else:
            grads[name] = p.grad
        p.grad = None
    return params, grads


def _mean_loss(losses: list[Tensor]) -> Tensor:
    total = losses[0]
    for ls in losses[1:]:
        total = T.add(total, ls)
    return T.div(total, Tensor(np.asarray(float(len(losses))), requires_grad=False))


def _log_line(path: Path, record: dict) -> None:
    with path.open("a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _check_finite(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss at {what}")


def pretrain(
    pairs: list[tuple[np.ndarray, np.ndarray]],
    config: M.ModelConfig,
    train_cfg: TrainConfig,
    out_dir: str | Path,
    params: dict[str, Tensor] | None = None,
) -> dict[str, Tensor]:
    """Masked cross-view completion pre-training over (img_a, img_b) pairs.

    Writes per-epoch train/held-out losses as JSON lines plus a checkpoint per
    epoch; the whole run is a deterministic function of (pairs, configs)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = out / "metrics.jsonl"
    if params is None:
        params = M.init_params(config, seed=train_cfg.seed)

    rng = np.random.default_rng(train_cfg.seed)
    n_hold = max(1, int(round(len(pairs) * train_cfg.holdout_frac))) if len(pairs) > 1 else 0
    order = rng.permutation(len(pairs))
    hold_ids = order[:n_hold]
    train_ids = order[n_hold:] if n_hold else order

    h, w = pairs[0][0].shape[:2]
    n_tok = (h // config.patch_size) * (w // config.patch_size)
    # fixed mask pattern per held-out pair, so the eval loss is comparable
    hold_masks = [
        M.sample_visible_ids(np.random.default_rng(10_000 + int(i)), n_tok, train_cfg.mask_ratio)
        for i in hold_ids
    ]

    state = T.AdamWState()
    steps_per_epoch = max(1, math.ceil(len(train_ids) / train_cfg.batch_size))
    total_steps = steps_per_epoch * train_cfg.epochs
    warmup = max(1, int(round(total_steps * train_cfg.warmup_frac)))
    step = 0
    for epoch in range(train_cfg.epochs):
        ep_rng = np.random.default_rng(train_cfg.seed * 100_003 + epoch)
        perm = ep_rng.permutation(train_ids)
        ep_losses = []
        for b0 in range(0, len(perm), train_cfg.batch_size):
            batch = perm[b0 : b0 + train_cfg.batch_size]
            losses = []
            for i in batch:
                img_a, img_b = pairs[int(i)]
                vis = M.sample_visible_ids(ep_rng, n_tok, train_cfg.mask_ratio)
                pred, _ = M.forward_completion(img_a, img_b, config, params, vis)
                losses.append(completion_loss(pred, img_a, vis, config.patch_size))
            loss = _mean_loss(losses)
            val = float(loss.data)
            _check_finite(val, f"epoch {epoch} step {step}")
            loss.backward()
            _, grads = _params_and_grads(params)
            lr = T.cosine_schedule(step, total_steps, warmup, train_cfg.base_lr)
            T.adamw_step(params, grads, state, lr, weight_decay=train_cfg.weight_decay)
            ep_losses.append(val)
            step += 1
        hold_loss = None
        if len(hold_ids):
            hvals = []
            for i, vis in zip(hold_ids, hold_masks):
                img_a, img_b = pairs[int(i)]
                pred, _ = M.forward_completion(img_a, img_b, config, params, vis)
                hvals.append(float(completion_loss(pred, img_a, vis, config.patch_size).data))
            hold_loss = float(np.mean(hvals))
        _log_line(
            log,
            {
                "epoch": epoch,
                "train_loss": float(np.mean(ep_losses)),
                "holdout_loss": hold_loss,
                "lr": T.cosine_schedule(step - 1, total_steps, warmup, train_cfg.base_lr),
            },
        )
        T.save_checkpoint(out / f"epoch_{epoch:03d}.ckpt", params, config.to_dict())
    T.save_checkpoint(out / "final.ckpt", params, config.to_dict())
    return params


def scale_param_for_task(task: str) -> M.ScaleParam:
    return M.ScaleParam.stereo_bounded if task == "stereo" else M.ScaleParam.flow_bounded


def _eval_dense(
    samples: list[AugmentSample],
    task: str,
    config: M.ModelConfig,
    params: dict[str, Tensor],
) -> dict[str, float]:
    errs = []
    sp = scale_param_for_task(task)
    for s in samples:
        pred = M.forward_dense(s.img_a, s.img_b, config, params, sp)
        mu = pred.mu.data
        if task == "stereo":
            err = np.abs(mu[..., 0] - s.gt)
        else:
            err = np.sqrt(((mu - s.gt) ** 2).sum(axis=-1))
        errs.append(err[s.valid])
    e = np.concatenate(errs)
    return {
        "epe": float(e.mean()),
        "bad_1": float((e > 1.0).mean() * 100.0),
        "bad_3": float((e > 3.0).mean() * 100.0),
    }


def finetune(
    samples: list[AugmentSample],
    task: str,
    config: M.ModelConfig,
    train_cfg: TrainConfig,
    out_dir: str | Path,
    params: dict[str, Tensor] | None = None,
    eval_samples: list[AugmentSample] | None = None,
) -> dict[str, Tensor]:
    """Dense finetuning for stereo disparity or optical flow with the
    scale-aware loss (or plain L1), logging accuracy metrics each epoch."""
    if task not in ("stereo", "flow"):
        raise ContractViolation(f"unknown task {task!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = out / "metrics.jsonl"
    if params is None:
        params = M.init_params(config, seed=train_cfg.seed)

    state = T.AdamWState()
    steps_per_epoch = max(1, math.ceil(len(samples) / train_cfg.batch_size))
    total_steps = steps_per_epoch * train_cfg.epochs
    warmup = max(1, int(round(total_steps * train_cfg.warmup_frac)))
    step = 0
    for epoch in range(train_cfg.epochs):
        ep_rng = np.random.default_rng(train_cfg.seed * 90_001 + epoch)
        perm = ep_rng.permutation(len(samples))
        ep_losses = []
        for b0 in range(0, len(perm), train_cfg.batch_size):
            batch = perm[b0 : b0 + train_cfg.batch_size]
            losses = []
            for i in batch:
                s = samples[int(i)]
                if train_cfg.augment:
                    s = augment_pair(s, task, ep_rng)
                pred = M.forward_dense(s.img_a, s.img_b, config, params, scale_param_for_task(task))
                gt = s.gt if task == "flow" else s.gt[..., None]
                if train_cfg.loss == "l1":
                    losses.append(l1_loss(pred.mu, gt, s.valid))
                else:
                    losses.append(laplacian_loss(pred, gt, s.valid))
            loss = _mean_loss(losses)
            val = float(loss.data)
            _check_finite(val, f"epoch {epoch} step {step}")
            loss.backward()
            _, grads = _params_and_grads(params)
            lr = T.cosine_schedule(step, total_steps, warmup, train_cfg.base_lr)
            T.adamw_step(params, grads, state, lr, weight_decay=train_cfg.weight_decay)
            ep_losses.append(val)
            step += 1
        record = {"epoch": epoch, "train_loss": float(np.mean(ep_losses))}
        if eval_samples:
            record.update(_eval_dense(eval_samples, task, config, params))
        _log_line(log, record)
    T.save_checkpoint(out / "final.ckpt", params, config.to_dict())
    return params
