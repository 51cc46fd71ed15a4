"""Command-line pipeline: scene synthesis, pair mining, training, inference,
evaluation, visualization, and small comparison sweeps."""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import fileio as F
from . import infer as I
from . import model as M
from . import pairmine as PM
from . import scene as S
from . import train as TR
from . import tensor as T
from .tensor import ContractViolation


class CliError(Exception):
    pass


def data_root() -> Path:
    return Path(os.environ.get("CROCOFORGE_DATA", "."))


# ---------------------------------------------------------------------------
# config handling: flat dotted-key JSON, unknown keys rejected


_SCHEMAS: dict[str, dict[str, object]] = {
    "gen-scenes": {
        "scene.n_scenes": 2,
        "scene.n_points": 400,
        "scene.n_cameras": 8,
        "scene.extent": 10.0,
        "scene.camera_ring_radius": 12.0,
        "scene.image_size": 320,
    },
    "mine-pairs": {
        "mine.score_threshold": 0.1,
        "mine.redundancy_iou": 0.75,
        "mine.crop_grid_stride": 128,
        "mine.min_matches_per_crop": 32,
        "mine.session_rule": False,
    },
    "pretrain": {
        "model.preset": "tiny",
        "model.pos_embed": "rope",
        "model.mask_ratio": 0.9,
        "train.epochs": 4,
        "train.batch_size": 4,
        "train.base_lr": 1e-3,
        "train.weight_decay": 0.01,
        "train.crop_size": 64,
        "train.n_synthetic_pairs": 8,
    },
    "finetune": {
        "model.preset": "tiny",
        "model.pos_embed": "rope",
        "train.task": "stereo",
        "train.epochs": 4,
        "train.batch_size": 2,
        "train.base_lr": 1e-3,
        "train.weight_decay": 0.01,
        "train.loss": "laplacian",
        "train.augment": False,
        "train.n_pairs": 8,
        "train.n_eval_pairs": 4,
        "train.image_size": 64,
        "train.init_checkpoint": "",
    },
    "infer": {
        "infer.task": "stereo",
        "infer.tile": 0,
        "infer.overlap": 0.5,
        "infer.clamp_max": 0.0,
    },
    "eval": {"eval.tau": 1.0},
    "viz": {"viz.mask_ratio": 0.9},
    "sweep": {
        "sweep.param": "model.pos_embed",
        "sweep.values": ["cosine_absolute", "rope"],
        "train.task": "stereo",
        "train.epochs": 2,
        "train.batch_size": 2,
        "train.base_lr": 1e-3,
        "train.n_pairs": 4,
        "train.n_eval_pairs": 2,
        "train.image_size": 64,
        "train.loss": "laplacian",
        "model.preset": "tiny",
    },
}


def load_config(command: str, path: str | None) -> dict:
    """Resolve the flat dotted-key config against the subcommand schema,
    rejecting unknown keys (fail-closed)."""
    schema = dict(_SCHEMAS[command])
    if path is None:
        return schema
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}")
    try:
        overrides = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise CliError(f"config {p} is not valid JSON: {e}") from e
    if not isinstance(overrides, dict):
        raise CliError(f"config {p} must be a flat JSON object")
    unknown = sorted(set(overrides) - set(schema))
    if unknown:
        raise CliError(f"unknown config keys for {command}: {', '.join(unknown)}")
    schema.update(overrides)
    return schema


# ---------------------------------------------------------------------------
# run directories


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: list[str]
    outputs: list[str]
    code_version: str
    started_at: float
    finished_at: float | None = None


def make_run_dir(base: str | Path, command: str) -> Path:
    """Fresh timestamped run directory; an existing directory is never reused."""
    base = Path(base)
    base.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
    k = 0
    while True:
        cand = base / (f"{command}-{stamp}" + (f"-{k}" if k else ""))
        try:
            cand.mkdir(parents=False, exist_ok=False)
            return cand
        except FileExistsError:
            k += 1


def _code_version() -> str:
    from . import __version__

    return __version__


def write_manifest(run_dir: Path, manifest: RunManifest) -> None:
    manifest.finished_at = time.time()
    (run_dir / "manifest.json").write_text(json.dumps(asdict(manifest), indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_scenes(args) -> int:
    cfg = load_config("gen-scenes", args.config)
    out = make_run_dir(args.out or data_root() / "scenes", "gen-scenes")
    man = RunManifest("gen-scenes", cfg, args.seed, [], [], _code_version(), time.time())
    spec = S.SceneSpec(
        n_points=int(cfg["scene.n_points"]),
        extent=float(cfg["scene.extent"]),
        n_cameras=int(cfg["scene.n_cameras"]),
        camera_ring_radius=float(cfg["scene.camera_ring_radius"]),
        image_width=int(cfg["scene.image_size"]),
        image_height=int(cfg["scene.image_size"]),
    )
    for i in range(int(cfg["scene.n_scenes"])):
        cloud, poses = S.generate_scene(args.seed + i, spec)
        images = [S.render(cloud, pose) for pose in poses]
        d = out / f"scene_{i:04d}"
        S.save_scene(d, cloud, images)
        man.outputs.append(str(d))
    write_manifest(out, man)
    print(out)
    return 0


def cmd_mine_pairs(args) -> int:
    cfg = load_config("mine-pairs", args.config)
    scenes_dir = Path(args.scenes or data_root() / "scenes")
    if not scenes_dir.exists():
        raise CliError(f"scenes directory not found: {scenes_dir}")
    dirs = sorted(d for d in scenes_dir.glob("scene_*") if d.is_dir())
    if not dirs:
        raise CliError(f"no scene_* directories under {scenes_dir}")
    entries = []
    for d in dirs:
        cloud, images = S.load_scene(d)
        entries.append(PM.SceneEntry(name=d.name, images=images, cloud=cloud))
    mcfg = PM.MiningConfig(
        score_threshold=float(cfg["mine.score_threshold"]),
        redundancy_iou=float(cfg["mine.redundancy_iou"]),
        crop_grid_stride=int(cfg["mine.crop_grid_stride"]),
        min_matches_per_crop=int(cfg["mine.min_matches_per_crop"]),
        session_rule=bool(cfg["mine.session_rule"]),
    )
    out = make_run_dir(args.out or data_root() / "pairs", "mine-pairs")
    man = RunManifest("mine-pairs", cfg, args.seed, [str(d) for d in dirs], [], _code_version(), time.time())
    manifest_path = PM.mine_dataset(entries, mcfg, out)
    man.outputs.append(str(manifest_path))
    write_manifest(out, man)
    print(out)
    return 0


def _model_config(cfg: dict, out_channels: int = 1) -> M.ModelConfig:
    return M.make_config(
        cfg["model.preset"],
        pos_embed=M.PosEmbed(cfg.get("model.pos_embed", "rope")),
        out_channels=out_channels,
        **({"mask_ratio": float(cfg["model.mask_ratio"])} if "model.mask_ratio" in cfg else {}),
    )


def _load_crop_pairs(pairs_dir: Path, crop: int) -> list[tuple[np.ndarray, np.ndarray]]:
    manifest = pairs_dir / "manifest.ndjson"
    if not manifest.exists():
        raise CliError(f"pair manifest not found: {manifest}")
    out = []
    for rec in PM.load_manifest(manifest):
        for k, _ in enumerate(rec.get("crops", [])):
            a = F.read_ppm(pairs_dir / "pairs" / f"{rec['pair_id']}_{k}_a.ppm")
            b = F.read_ppm(pairs_dir / "pairs" / f"{rec['pair_id']}_{k}_b.ppm")
            out.append((a[:crop, :crop], b[:crop, :crop]))
    return out


def cmd_pretrain(args) -> int:
    cfg = load_config("pretrain", args.config)
    crop = int(cfg["train.crop_size"])
    if args.pairs:
        pairs = _load_crop_pairs(Path(args.pairs), crop)
        inputs = [args.pairs]
    else:
        pairs = []
        for i in range(int(cfg["train.n_synthetic_pairs"])):
            s = TR.make_flow_pair(args.seed * 1000 + i, image_size=crop)
            pairs.append((s.img_a, s.img_b))
        inputs = []
    if not pairs:
        raise CliError("no training pairs available")
    mcfg = _model_config(cfg)
    tcfg = TR.TrainConfig(
        epochs=int(cfg["train.epochs"]),
        batch_size=int(cfg["train.batch_size"]),
        base_lr=float(cfg["train.base_lr"]),
        weight_decay=float(cfg["train.weight_decay"]),
        seed=args.seed,
        mask_ratio=float(cfg["model.mask_ratio"]),
    )
    out = make_run_dir(args.out or data_root() / "runs", "pretrain")
    man = RunManifest("pretrain", cfg, args.seed, inputs, [str(out / "final.ckpt")], _code_version(), time.time())
    TR.pretrain(pairs, mcfg, tcfg, out)
    write_manifest(out, man)
    print(out)
    return 0


def cmd_finetune(args) -> int:
    cfg = load_config("finetune", args.config)
    task = cfg["train.task"]
    if task not in ("stereo", "flow"):
        raise CliError(f"train.task must be stereo or flow, got {task!r}")
    mcfg = _model_config(cfg, out_channels=2 if task == "flow" else 1)
    size = int(cfg["train.image_size"])
    train_set = TR.make_dense_dataset(task, int(cfg["train.n_pairs"]), seed=args.seed, image_size=size)
    eval_set = TR.make_dense_dataset(
        task, int(cfg["train.n_eval_pairs"]), seed=args.seed + 10_000, image_size=size
    )
    params = None
    ckpt = cfg["train.init_checkpoint"]
    if ckpt:
        if not Path(ckpt).exists():
            raise CliError(f"init checkpoint not found: {ckpt}")
        params, _ = T.load_checkpoint(ckpt)
    tcfg = TR.TrainConfig(
        epochs=int(cfg["train.epochs"]),
        batch_size=int(cfg["train.batch_size"]),
        base_lr=float(cfg["train.base_lr"]),
        weight_decay=float(cfg["train.weight_decay"]),
        seed=args.seed,
        loss=cfg["train.loss"],
        augment=bool(cfg["train.augment"]),
    )
    out = make_run_dir(args.out or data_root() / "runs", "finetune")
    man = RunManifest("finetune", cfg, args.seed, [ckpt] if ckpt else [], [str(out / "final.ckpt")], _code_version(), time.time())
    TR.finetune(train_set, task, mcfg, tcfg, out, params=params, eval_samples=eval_set)
    write_manifest(out, man)
    print(out)
    return 0


def cmd_infer(args) -> int:
    cfg = load_config("infer", args.config)
    task = cfg["infer.task"]
    for p in (args.checkpoint, args.image_a, args.image_b):
        if not p or not Path(p).exists():
            raise CliError(f"missing input: {p}")
    params, conf = T.load_checkpoint(args.checkpoint)
    mcfg = M.ModelConfig(**conf)
    img_a = F.read_ppm(args.image_a)
    img_b = F.read_ppm(args.image_b)
    sp = TR.scale_param_for_task(task)
    tile = int(cfg["infer.tile"])
    clamp_max = float(cfg["infer.clamp_max"])
    mu, d_raw = I.tiled_predict(
        img_a,
        img_b,
        mcfg,
        params,
        sp,
        tile_hw=(tile, tile) if tile else None,
        overlap=float(cfg["infer.overlap"]),
        clamp=(0.0, clamp_max) if clamp_max > 0 else None,
    )
    out = Path(args.out or "prediction")
    out.mkdir(parents=True, exist_ok=True)
    if task == "flow":
        F.write_flo(out / "pred.flo", mu.astype(np.float32))
    else:
        F.write_pfm(out / "pred.pfm", mu[..., 0].astype(np.float32))
    F.write_pfm(out / "d_raw.pfm", d_raw.astype(np.float32))
    print(out)
    return 0


def _read_field(path: str) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise CliError(f"missing input: {p}")
    if p.suffix == ".flo":
        return F.read_flo(p)
    if p.suffix == ".pfm":
        return F.read_pfm(p)
    raise CliError(f"unsupported field format: {p}")


def cmd_eval(args) -> int:
    load_config("eval", args.config)
    pred = _read_field(args.pred)
    gt = _read_field(args.gt)
    metrics = I.evaluate(pred, gt)
    out = Path(args.out or "metrics.json")
    if out.is_dir():
        out = out / "metrics.json"
    out.write_text(json.dumps(metrics, indent=1, sort_keys=True))
    print(json.dumps(metrics, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# visualization (pure reader)


def flow_to_color(flow: np.ndarray) -> np.ndarray:
    """Standard optical-flow color wheel, normalized by the per-image max norm."""
    u, v = flow[..., 0], flow[..., 1]
    mag = np.sqrt(u * u + v * v)
    scale = max(mag.max(), 1e-9)
    ang = np.arctan2(-v, -u) / np.pi  # [-1, 1]
    h = (ang + 1.0) / 2.0
    s = np.clip(mag / scale, 0, 1)
    # hsv -> rgb with value 1
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p, q, t = 1.0 - s, 1.0 - f * s, 1.0 - (1.0 - f) * s
    one = np.ones_like(s)
    lut = np.stack(
        [
            np.stack([one, t, p], -1),
            np.stack([q, one, p], -1),
            np.stack([p, one, t], -1),
            np.stack([p, q, one], -1),
            np.stack([t, p, one], -1),
            np.stack([one, p, q], -1),
        ]
    )
    idx = np.broadcast_to(i[None, ..., None], (1,) + i.shape + (3,))
    return np.take_along_axis(lut, idx, axis=0)[0]


def completion_panel(
    img_a: np.ndarray,
    img_b: np.ndarray,
    config: M.ModelConfig,
    params: dict,
    mask_ratio: float,
    seed: int,
) -> np.ndarray:
    """Side-by-side panel: second view (reference), masked first view,
    reconstruction, and the first view (target)."""
    h, w = img_a.shape[:2]
    gh, gw = h // config.patch_size, w // config.patch_size
    n_tok = gh * gw
    vis = M.sample_visible_ids(np.random.default_rng(seed), n_tok, mask_ratio)
    pred, _ = M.forward_completion(img_a, img_b, config, params, vis)
    tokens, _ = M.patchify(img_a, config.patch_size)
    _, mean, std = M.normalize_patches(tokens)
    recon_tokens = M.denormalize_patches(pred.data, mean, std)
    recon_tokens[vis] = tokens[vis]  # visible patches shown as-is
    recon = M.unpatchify(recon_tokens, (gh, gw), config.patch_size)
    masked_tokens = np.full_like(tokens, 0.5)
    masked_tokens[vis] = tokens[vis]
    masked = M.unpatchify(masked_tokens, (gh, gw), config.patch_size)
    panel = np.concatenate([img_b, masked, np.clip(recon, 0, 1), img_a], axis=1)
    return panel


def cmd_viz(args) -> int:
    cfg = load_config("viz", args.config)
    out = Path(args.out or "viz")
    out.mkdir(parents=True, exist_ok=True)
    if args.flow:
        flow = _read_field(args.flow)
        F.write_ppm(out / "flow_color.ppm", flow_to_color(flow))
    if args.checkpoint and args.image_a and args.image_b:
        params, conf = T.load_checkpoint(args.checkpoint)
        mcfg = M.ModelConfig(**conf)
        panel = completion_panel(
            F.read_ppm(args.image_a),
            F.read_ppm(args.image_b),
            mcfg,
            params,
            float(cfg["viz.mask_ratio"]),
            args.seed,
        )
        F.write_ppm(out / "completion_panel.ppm", panel)
    print(out)
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config("sweep", args.config)
    param = cfg["sweep.param"]
    values = cfg["sweep.values"]
    if not isinstance(values, list) or not values:
        raise CliError("sweep.values must be a non-empty list")
    out = make_run_dir(args.out or data_root() / "runs", "sweep")
    rows = []
    for val in values:
        sub = {k: v for k, v in cfg.items() if not k.startswith("sweep.")}
        sub[param] = val
        task = sub.get("train.task", "stereo")
        mcfg = _model_config(sub, out_channels=2 if task == "flow" else 1)
        size = int(sub["train.image_size"])
        train_set = TR.make_dense_dataset(task, int(sub["train.n_pairs"]), seed=args.seed, image_size=size)
        eval_set = TR.make_dense_dataset(task, int(sub["train.n_eval_pairs"]), seed=args.seed + 10_000, image_size=size)
        tcfg = TR.TrainConfig(
            epochs=int(sub["train.epochs"]),
            batch_size=int(sub["train.batch_size"]),
            base_lr=float(sub["train.base_lr"]),
            seed=args.seed,
            loss=sub["train.loss"],
        )
        run = out / f"run_{str(val).replace('.', '_')}"
        params = TR.finetune(train_set, task, mcfg, tcfg, run, eval_samples=eval_set)
        metrics = TR._eval_dense(eval_set, task, mcfg, params)
        rows.append({"value": val, **metrics})
    table = out / "table.json"
    table.write_text(json.dumps({"param": param, "rows": rows}, indent=1, sort_keys=True))
    for r in rows:
        print(f"{param}={r['value']}: epe={r['epe']:.4f} bad_1={r['bad_1']:.1f}")
    man = RunManifest("sweep", cfg, args.seed, [], [str(table)], _code_version(), time.time())
    write_manifest(out, man)
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="crocoforge", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="flat dotted-key JSON config")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--out", default=None)

    p = sub.add_parser("gen-scenes", help="synthesize posed point-cloud scenes")
    common(p)
    p.set_defaults(fn=cmd_gen_scenes)

    p = sub.add_parser("mine-pairs", help="mine co-visible crop pairs from scenes")
    common(p)
    p.add_argument("--scenes", default=None)
    p.set_defaults(fn=cmd_mine_pairs)

    p = sub.add_parser("pretrain", help="masked cross-view completion pre-training")
    common(p)
    p.add_argument("--pairs", default=None, help="mined pair directory (default: synthetic pairs)")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="dense stereo/flow finetuning")
    common(p)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("infer", help="tiled dense prediction on an image pair")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image-a", required=True)
    p.add_argument("--image-b", required=True)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="score a prediction against ground truth")
    common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("viz", help="visualization panels (pure reader)")
    common(p)
    p.add_argument("--flow", default=None, help=".flo file to color-code")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--image-a", default=None)
    p.add_argument("--image-b", default=None)
    p.set_defaults(fn=cmd_viz)

    p = sub.add_parser("sweep", help="run a small comparison grid")
    common(p)
    p.set_defaults(fn=cmd_sweep)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, ContractViolation, F.FileFormatError, S.DegenerateSceneError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
