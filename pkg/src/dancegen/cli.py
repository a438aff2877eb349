"""Command-line pipeline: compose, train-toy, invert, generate, evaluate.

Every command reads an optional JSON run configuration (``--config``); flags
override it. Outputs land in ``--out``, defaulting to
``$DANCEGEN_OUT/<command>`` (or ``./runs/<command>``), and every output
directory gets a ``manifest.json`` with the config digest and toolkit version.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .backends import IdentityAutoencoder, TrainingConfig, load_checkpoint, save_checkpoint, train_toy_denoiser
from .compose import (
    compose_scene,
    generate_augmentations,
    load_image,
    load_mask,
    load_scene_manifest,
    save_image,
    save_mask,
    write_scene_manifest,
)
from .diffusion import GuidanceConfig, make_schedule
from .embeddings import GeneralizationBatch, invert_augmented, optimize_generalizable
from .errors import ConfigurationError, ContractError, DanceGenError
from .guidance import ConsistencyTarget, FrameJob, generate_video, write_video
from .serialization import config_digest, write_json
from .inversion import load_embeddings, optimize_null_text, pose_aware_invert, save_embeddings
from .metrics import default_embedders, evaluate, toy_detector, write_report
from .pose import PoseSequence, load_pose_sequence, rasterize_pose, save_pose_sequence
from .toyworld import ToyWorld, dance_sequence

ENV_OUT = "DANCEGEN_OUT"


@dataclass
class RunConfig:
    scene_manifest: str | None = None
    poses: str | None = None
    checkpoint: str | None = None
    world: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    dataset_size: int = 1024
    schedule_profile: str = "scaled-linear-1000-subsampled"
    guidance: dict = field(default_factory=dict)
    seed: int = 0
    out: str | None = None
    workers: int = 1
    fps: float = 8.0

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**doc)
        cfg.guidance_config()  # validate early
        return cfg

    def toy_world(self) -> ToyWorld:
        known = {f.name for f in fields(ToyWorld)}
        unknown = set(self.world) - known
        if unknown:
            raise ConfigurationError(f"unknown world keys: {sorted(unknown)}")
        doc = dict(self.world)
        for key in ("canvas", "scale_range"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return ToyWorld(**doc)

    def guidance_config(self) -> GuidanceConfig:
        return GuidanceConfig.from_dict(self.guidance)

    def training_config(self) -> TrainingConfig:
        known = {f.name for f in fields(TrainingConfig)}
        unknown = set(self.training) - known
        if unknown:
            raise ConfigurationError(f"unknown training keys: {sorted(unknown)}")
        return TrainingConfig(**{"seed": self.seed, **self.training})

    def schedule(self):
        return make_schedule(self.guidance_config().num_steps, self.schedule_profile)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["guidance"] = self.guidance_config().to_dict()
        return d

    def digest(self) -> str:
        return config_digest(self.to_dict())


def _manifest(out: Path, command: str, cfg: RunConfig, **extra) -> Path:
    doc = {"command": command, "version": __version__, "config_digest": cfg.digest(), "config": cfg.to_dict(), **extra}
    return write_json(out / "manifest.json", doc)


def _out_dir(cfg: RunConfig, command: str) -> Path:
    if cfg.out:
        out = Path(cfg.out)
    else:
        out = Path(os.environ.get(ENV_OUT, "runs")) / command
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- compose ---------------------------------------------------------------


def _write_scene(directory: Path, scene) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    save_image(directory / "image.png", scene.image)
    save_mask(directory / "background_mask.png", scene.background_mask)
    save_pose_sequence(directory / "poses.json", PoseSequence([list(scene.poses)]))


def load_scene_dir(directory):
    """Read back a scene directory: ``(image, background_mask, poses)``."""
    directory = Path(directory)
    image = load_image(directory / "image.png")
    mask = load_mask(directory / "background_mask.png")
    poses = load_pose_sequence(directory / "poses.json").frames[0]
    return image, mask, poses


def cmd_compose(cfg: RunConfig, augment: int, toy_persons: int | None, frames: int | None) -> Path:
    out = _out_dir(cfg, "compose")
    prompt = None
    if toy_persons is not None:
        world = cfg.toy_world()
        rng = np.random.default_rng([cfg.seed, 3])
        spec, bg, slots = world.random_scene(rng, num_persons=toy_persons)
        prompt = world.prompt_embedding(bg, slots).tolist()
        cfg.scene_manifest = str(write_scene_manifest(out / "source", spec))
    elif cfg.scene_manifest:
        spec = load_scene_manifest(cfg.scene_manifest)
        doc = json.loads(Path(cfg.scene_manifest).read_text())
        prompt = doc.get("prompt_embedding")
    else:
        raise ConfigurationError("compose needs a scene manifest (--manifest) or --toy-persons")
    reference = compose_scene(spec)
    scenes = [reference] + generate_augmentations(spec, augment, cfg.seed)
    names = []
    for i, scene in enumerate(scenes):
        name = f"scene_{i:03d}"
        _write_scene(out / name, scene)
        names.append(name)
    if frames:
        seq = dance_sequence(list(reference.poses), frames, cfg.seed, cfg.fps)
        cfg.poses = str(out / "driving_poses.json")
        save_pose_sequence(cfg.poses, seq)
    write_json(out / "compose.json", {"scenes": names, "prompt_embedding": prompt, "canvas": list(spec.canvas)})
    _manifest(out, "compose", cfg, num_augmented=augment)
    return out


# --- train-toy -------------------------------------------------------------


def cmd_train_toy(cfg: RunConfig) -> Path:
    out = _out_dir(cfg, "train-toy")
    world = cfg.toy_world()
    tcfg = cfg.training_config()
    data = world.training_set(cfg.dataset_size, cfg.seed)
    log = open(out / "train_log.jsonl", "w")
    try:
        model = train_toy_denoiser(
            data,
            cfg.schedule(),
            tcfg,
            progress=lambda step, loss: log.write(json.dumps({"step": step, "loss": loss}) + "\n"),
        )
    finally:
        log.close()
    model.metadata = {"world": world.to_dict(), "training": tcfg.to_dict()}
    save_checkpoint(out / "toy.ckpt", model)
    _manifest(out, "train-toy", cfg, checkpoint="toy.ckpt", final_loss=model.epoch_losses[-1])
    return out


# --- invert ----------------------------------------------------------------


def _load_backend(cfg: RunConfig):
    if not cfg.checkpoint:
        raise ConfigurationError("no backend checkpoint given (--checkpoint)")
    backend = load_checkpoint(cfg.checkpoint)
    return backend, IdentityAutoencoder(backend.latent_shape[1:] + backend.latent_shape[:1])


def _prompt(compose_doc: dict, backend) -> np.ndarray:
    if compose_doc.get("prompt_embedding") is not None:
        return np.asarray(compose_doc["prompt_embedding"], dtype=np.float64)
    return backend.empty_embedding()


def cmd_invert(cfg: RunConfig, scenes_dir, mode: str) -> Path:
    out = _out_dir(cfg, "invert")
    gcfg = cfg.guidance_config()
    scenes_dir = Path(scenes_dir)
    compose_doc = json.loads((scenes_dir / "compose.json").read_text())
    backend, ae = _load_backend(cfg)
    schedule = backend.schedule
    if schedule.num_steps != gcfg.num_steps:
        raise ConfigurationError(f"checkpoint uses T={schedule.num_steps}, config asks for {gcfg.num_steps}")
    h, w = backend.latent_shape[1:]
    c = _prompt(compose_doc, backend)
    image, _, poses = load_scene_dir(scenes_dir / compose_doc["scenes"][0])
    traj = pose_aware_invert(image, c, rasterize_pose(poses, (w, h)), backend, ae, schedule)
    emb = optimize_null_text(traj, backend, schedule, gcfg)
    log_rows = [{"stage": "null-text", **s.to_dict()} for s in emb.history]
    if mode == "generalizable":
        M = gcfg.num_augmented
        available = compose_doc["scenes"][1:]
        if M > len(available):
            raise ConfigurationError(f"generalizable mode needs {M} augmentations, found {len(available)}")
        scenes = []
        for name in available[:M]:
            img, mask, aug_poses = load_scene_dir(scenes_dir / name)
            scenes.append(_SceneView(img, aug_poses, mask))
        batch = GeneralizationBatch(traj, invert_augmented(scenes, c, backend, ae, schedule))
        emb = optimize_generalizable(batch, c, backend, schedule, gcfg, null_init=emb)
        log_rows += [{"stage": "generalizable", **s.to_dict()} for s in emb.history]
    save_embeddings(out / "embeddings.bin", emb)
    np.save(out / "start_latent.npy", traj.start)
    with open(out / "loss_log.jsonl", "w") as fh:
        for row in log_rows:
            fh.write(json.dumps(row) + "\n")
    _manifest(out, "invert", cfg, mode=emb.mode, scenes=str(scenes_dir), checkpoint=str(cfg.checkpoint))
    return out


@dataclass
class _SceneView:
    image: np.ndarray
    poses: list
    background_mask: np.ndarray


# --- generate --------------------------------------------------------------


def cmd_generate(cfg: RunConfig, inversion_dir, embeddings_path, frames: int | None, guidance: bool) -> Path:
    out = _out_dir(cfg, "generate")
    inversion_dir = Path(inversion_dir)
    inv_manifest = json.loads((inversion_dir / "manifest.json").read_text())
    if not cfg.checkpoint:
        cfg.checkpoint = inv_manifest["checkpoint"]
    backend, ae = _load_backend(cfg)
    emb = load_embeddings(embeddings_path or inversion_dir / "embeddings.bin")
    start = np.load(inversion_dir / "start_latent.npy")
    if not cfg.poses:
        raise ConfigurationError("no driving pose sequence given (--poses)")
    seq = load_pose_sequence(cfg.poses)
    pose_frames = seq.frames[:frames] if frames else seq.frames
    scenes_dir = Path(inv_manifest["scenes"])
    compose_doc = json.loads((scenes_dir / "compose.json").read_text())
    image, mask, poses = load_scene_dir(scenes_dir / compose_doc["scenes"][0])
    target = ConsistencyTarget.from_scene(_SceneView(image, poses, mask))
    gcfg = cfg.guidance_config()
    if not guidance:
        gcfg = GuidanceConfig.from_dict({**gcfg.to_dict(), "background_weight": 0.0, "keypoint_weight": 0.0})
        cfg.guidance = gcfg.to_dict()
    job = FrameJob(pose_frames, start, emb, gcfg)
    video = generate_video(job, target, backend, ae, backend.schedule, workers=cfg.workers)
    write_video(out, video, seq.fps or cfg.fps, cfg.to_dict())
    save_pose_sequence(out / "poses.json", PoseSequence(pose_frames, seq.fps))
    _manifest(
        out,
        "generate",
        cfg,
        num_frames=len(video),
        guidance={"delta": gcfg.base_step_size, "lambda2": gcfg.background_weight, "lambda3": gcfg.keypoint_weight},
    )
    return out


# --- evaluate --------------------------------------------------------------


def cmd_evaluate(cfg: RunConfig, frames_dir, reference_path) -> Path:
    out = _out_dir(cfg, "evaluate")
    frames_dir = Path(frames_dir)
    names = sorted(p.name for p in frames_dir.glob("frame_*.png"))
    if not names:
        raise ContractError(f"no frame_*.png files in {frames_dir}")
    if not cfg.poses:
        raise ConfigurationError("no ground-truth pose sequence given (--poses)")
    gt = load_pose_sequence(cfg.poses)
    frames = [load_image(frames_dir / n) for n in names]
    reference = load_image(reference_path)
    report = evaluate(frames, reference, gt, toy_detector, default_embedders())
    write_report(out / "report.json", report, cfg.to_dict())
    _manifest(out, "evaluate", cfg, frames=str(frames_dir), reference=str(reference_path))
    return out


# --- argument parsing ------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dancegen", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, help=f"output directory (default ${ENV_OUT}/<command>)")
        p.add_argument("--workers", type=int, help="frame-level worker threads")
        return p

    p = common(sub.add_parser("compose", help="compose a reference scene and its augmentations"))
    p.add_argument("--manifest", type=Path, help="scene manifest (JSON)")
    p.add_argument("--toy-persons", type=int, help="generate a toy scene with this many persons instead")
    p.add_argument("--augment", "-M", type=int, help="number of augmentations (default: config num_augmented)")
    p.add_argument("--frames", type=int, help="also write a toy driving pose sequence of this length")

    common(sub.add_parser("train-toy", help="train the toy denoiser"))

    p = common(sub.add_parser("invert", help="invert the reference and optimize embeddings"))
    p.add_argument("--scenes", type=Path, required=True, help="output directory of compose")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--mode", choices=("null", "generalizable"), default="generalizable")

    p = common(sub.add_parser("generate", help="generate frames for a driving pose sequence"))
    p.add_argument("--inversion", type=Path, required=True, help="output directory of invert")
    p.add_argument("--embeddings", type=Path, help="embeddings file (default: the inversion's)")
    p.add_argument("--poses", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--frames", type=int, help="only the first N frames")
    p.add_argument("--no-guidance", action="store_true", help="disable consistency guidance")

    p = common(sub.add_parser("evaluate", help="score generated frames"))
    p.add_argument("--frames", type=Path, required=True, help="directory of frame_*.png")
    p.add_argument("--reference", type=Path, required=True)
    p.add_argument("--poses", type=Path, required=True, help="ground-truth pose sequence")
    return parser


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for name in ("seed", "workers", "out"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value if not isinstance(value, Path) else str(value))
    for name in ("checkpoint", "poses", "manifest"):
        value = getattr(args, name, None)
        if value is not None and not isinstance(value, int):
            setattr(cfg, "scene_manifest" if name == "manifest" else name, str(value))
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
        if args.command == "compose":
            augment = args.augment if args.augment is not None else cfg.guidance_config().num_augmented
            out = cmd_compose(cfg, augment, args.toy_persons, args.frames)
        elif args.command == "train-toy":
            out = cmd_train_toy(cfg)
        elif args.command == "invert":
            out = cmd_invert(cfg, args.scenes, "generalizable" if args.mode == "generalizable" else "null")
        elif args.command == "generate":
            out = cmd_generate(cfg, args.inversion, args.embeddings, args.frames, not args.no_guidance)
        else:
            out = cmd_evaluate(cfg, args.frames, args.reference)
    except (DanceGenError, OSError, ValueError) as exc:
        print(f"dancegen {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
