"""Two-stage training: student distillation, then the segmentation head.

Stage 1 trains the denoising student against the frozen teacher with a cosine
distance loss; stage 2 freezes both networks and trains the segmentation head
on synthetic masks. Both stages log JSON lines and end in a checkpoint that
round-trips bit-exactly.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch.optim import SGD

from . import serialization
from .data import ImageStore
from .exceptions import ConfigurationError, TrainingDiverged, WeightLoadError
from .losses import LossConfig, cosine_distance_loss, downsample_mask, focal_loss, l1_loss
from .pyramid import PYRAMID_CHANNELS, scaled_channels
from .segmentation import SegmentationHead, build_seg_input, image_score
from .student import StudentConfig, StudentNet
from .synthesis import SynthesisConfig, sample_training_pair
from .teacher import TeacherNet, load_pretrained, random_teacher

LOSS_EXPLOSION_LIMIT = 1e4


@dataclass(frozen=True)
class TrainConfig:
    stage1_iters: int = 3000
    stage2_iters: int = 4000
    batch_size: int = 16
    lr_student: float = 0.5
    lr_seg_blocks: float = 0.1
    lr_rcm: float = 0.01
    image_size: int = 256
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    channel_scale: float = 1.0
    use_rcm: bool = True
    use_aff: bool = True
    use_pcar: bool = True
    focal_gamma: float = 4.0
    teacher_weights: str = ""  # path to a weight archive; empty = random init
    # synthesis knobs; defaults match the standard recipe, small-image runs
    # tighten them (coarser blob scales, higher threshold, opaque paste)
    beta_min: float = 0.15
    beta_max: float = 1.0
    perlin_threshold: float = 0.5
    perlin_scales: tuple[int, ...] = (2, 4, 8, 16, 32)

    def __post_init__(self):
        for name in ("lr_student", "lr_seg_blocks", "lr_rcm"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.image_size % 32:
            raise ConfigurationError(f"image_size must be divisible by 32, got {self.image_size}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ConfigurationError("iteration counts must be >= 0")
        if self.channel_scale <= 0:
            raise ConfigurationError(f"channel_scale must be > 0, got {self.channel_scale}")
        if not (0.0 <= self.beta_min <= self.beta_max <= 1.0):
            raise ConfigurationError(
                f"need 0 <= beta_min <= beta_max <= 1, got {self.beta_min}, {self.beta_max}"
            )
        scales = tuple(int(s) for s in self.perlin_scales)
        if not scales or any(s < 1 for s in scales):
            raise ConfigurationError(f"perlin_scales must be positive ints, got {self.perlin_scales}")
        object.__setattr__(self, "perlin_scales", scales)


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def synthesis_config(cfg: TrainConfig) -> SynthesisConfig:
    return SynthesisConfig(
        beta_range=(cfg.beta_min, cfg.beta_max),
        perlin_scale_choices=cfg.perlin_scales,
        binarize_threshold=cfg.perlin_threshold,
        rng_seed=cfg.seed,
    )


def parse_config_text(text: str) -> TrainConfig:
    """Parse the flat ``key = value`` config format ('#' starts a comment)."""
    known = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in known:
            raise ConfigurationError(f"line {lineno}: unknown config key {key!r}")
        kind = known[key]
        try:
            if kind == "bool":
                values[key] = _BOOL_WORDS[val.lower()]
            elif kind == "int":
                values[key] = int(val)
            elif kind == "float":
                values[key] = float(val)
            elif kind.startswith("tuple"):
                values[key] = tuple(int(p) for p in val.replace(",", " ").split())
            else:
                values[key] = val
        except (KeyError, ValueError):
            raise ConfigurationError(
                f"line {lineno}: cannot parse {val!r} as {kind} for key {key!r}"
            ) from None
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    return parse_config_text(Path(path).read_text())


def config_text(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ", ".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def save_config(path, cfg: TrainConfig):
    Path(path).write_text(config_text(cfg))


def _capture_rng(np_rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    torch_state = torch.get_rng_state().numpy().astype(np.uint8)
    return torch_state, np_rng.bit_generator.state


def _restore_rng(torch_state: np.ndarray, numpy_state: dict) -> np.random.Generator:
    torch.set_rng_state(torch.from_numpy(np.ascontiguousarray(torch_state)))
    rng = np.random.default_rng()
    rng.bit_generator.state = numpy_state
    return rng


@dataclass
class Checkpoint:
    """Everything needed to resume or run inference, minus the teacher weights."""

    stage: str  # "student" or "segmentation"
    iteration: int
    config: TrainConfig
    teacher_digest: str
    student_state: dict
    seg_state: Optional[dict]
    torch_rng: np.ndarray
    numpy_rng: dict

    def _tensors_meta(self):
        tensors = {f"student/{k}": v for k, v in self.student_state.items()}
        if self.seg_state is not None:
            tensors.update({f"seg/{k}": v for k, v in self.seg_state.items()})
        tensors["rng/torch"] = self.torch_rng
        meta = {
            "kind": "checkpoint",
            "stage": self.stage,
            "iteration": self.iteration,
            "teacher_digest": self.teacher_digest,
            "config": asdict(self.config),
            "numpy_rng": self.numpy_rng,
            "has_seg": self.seg_state is not None,
        }
        return tensors, meta

    def digest(self) -> str:
        return serialization.digest_tensors(*self._tensors_meta())

    def save(self, path) -> str:
        tensors, meta = self._tensors_meta()
        return serialization.save_tensor_archive(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        tensors, meta = serialization.load_tensor_archive(path)
        if meta.get("kind") != "checkpoint":
            raise WeightLoadError(f"{path} is not a checkpoint archive")
        student_state = {
            k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("student/")
        }
        seg_state = None
        if meta["has_seg"]:
            seg_state = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("seg/")}
        return cls(
            stage=meta["stage"],
            iteration=meta["iteration"],
            config=TrainConfig(**meta["config"]),
            teacher_digest=meta["teacher_digest"],
            student_state=student_state,
            seg_state=seg_state,
            torch_rng=tensors["rng/torch"],
            numpy_rng=meta["numpy_rng"],
        )


def build_teacher(cfg: TrainConfig) -> TeacherNet:
    """Teacher per config: from a weight archive if given, else random init."""
    if cfg.teacher_weights:
        return load_pretrained(cfg.teacher_weights, channel_scale=cfg.channel_scale)
    return random_teacher(channel_scale=cfg.channel_scale, seed=cfg.seed)


def build_student(cfg: TrainConfig) -> StudentNet:
    return StudentNet(
        StudentConfig(
            channel_scale=cfg.channel_scale, use_aff=cfg.use_aff, use_pcar=cfg.use_pcar
        )
    )


def build_seg_head(cfg: TrainConfig) -> SegmentationHead:
    in_channels = sum(scaled_channels(PYRAMID_CHANNELS, cfg.channel_scale))
    return SegmentationHead(
        in_channels,
        use_rcm=cfg.use_rcm,
        use_aff=cfg.use_aff,
        use_pcar=cfg.use_pcar,
        channel_scale=cfg.channel_scale,
    )


def _load_module_state(module: torch.nn.Module, state: dict):
    tensors = {k: torch.from_numpy(v.copy() if not v.flags["C_CONTIGUOUS"] else v)
               for k, v in state.items()}
    module.load_state_dict(tensors)


class _Logger:
    def __init__(self, path=None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict):
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _guard_loss(value: float, stage: str, iteration: int, snapshot_fn, log_path):
    if math.isfinite(value) and value <= LOSS_EXPLOSION_LIMIT:
        return
    snapshot = None
    if log_path is not None:
        snapshot = Path(log_path).with_suffix(".diverged.ckpt")
        snapshot_fn(snapshot)
    raise TrainingDiverged(
        f"{stage} loss {value} at iteration {iteration}"
        + (f"; diagnostic snapshot: {snapshot}" if snapshot else "")
    )


class _BatchSampler:
    """Draws (clean, anomalous, mask) batches from normals + textures."""

    def __init__(self, dataset: ImageStore, textures: ImageStore, cfg: TrainConfig):
        if len(dataset) == 0:
            raise ConfigurationError("training dataset is empty")
        if len(textures) == 0:
            raise ConfigurationError("texture store is empty")
        self.dataset = dataset
        self.textures = textures
        self.cfg = cfg
        self.syn = synthesis_config(cfg)
        self._cache: dict[int, np.ndarray] = {}

    def _normal(self, index: int) -> np.ndarray:
        if index not in self._cache:
            size = (self.cfg.image_size, self.cfg.image_size)
            self._cache[index] = self.dataset.load(index, size)
        return self._cache[index]

    def draw(self, rng: np.random.Generator):
        clean, anomalous, masks = [], [], []
        for _ in range(self.cfg.batch_size):
            idx = int(rng.integers(len(self.dataset)))
            normal = self._normal(idx)
            anom, mask = sample_training_pair(normal, self.textures, self.syn, rng)
            clean.append(normal)
            anomalous.append(anom)
            masks.append(mask)
        # contiguous copy matters: some conv backward kernels misbehave on
        # strided inputs at small channel counts
        to_bchw = lambda ims: torch.from_numpy(
            np.ascontiguousarray(np.stack(ims).astype(np.float32).transpose(0, 3, 1, 2))
        )
        mask_tensor = torch.from_numpy(np.stack(masks).astype(np.float32))
        return to_bchw(clean), to_bchw(anomalous), mask_tensor


def train_student(
    dataset: ImageStore,
    textures: ImageStore,
    cfg: TrainConfig,
    teacher: Optional[TeacherNet] = None,
    log_path=None,
    device: str = "cpu",
) -> Checkpoint:
    """Stage 1: fit the student to reproduce teacher features of clean images.

    The student sees pseudo-anomalous images; the frozen teacher sees the
    corresponding clean ones. Returns a stage-1 checkpoint (no seg weights).
    """
    sampler = _BatchSampler(dataset, textures, cfg)
    torch.manual_seed(cfg.seed)
    if teacher is None:
        teacher = build_teacher(cfg)
    dev = torch.device(device)
    teacher.to(dev)
    rng = np.random.default_rng(cfg.seed)
    student = build_student(cfg)
    student.to(dev)
    student.train()
    opt = SGD(
        student.parameters(),
        lr=cfg.lr_student,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )
    logger = _Logger(log_path)
    start = time.monotonic()

    steps_done = 0

    def checkpoint() -> Checkpoint:
        torch_state, numpy_state = _capture_rng(rng)
        return Checkpoint(
            stage="student",
            iteration=steps_done,
            config=cfg,
            teacher_digest=teacher.digest(),
            student_state=serialization.module_state_arrays(student),
            seg_state=None,
            torch_rng=torch_state,
            numpy_rng=numpy_state,
        )

    for it in range(cfg.stage1_iters):
        clean, anomalous, _ = sampler.draw(rng)
        clean, anomalous = clean.to(dev), anomalous.to(dev)
        with torch.no_grad():
            teacher_py = teacher(clean)
        student_py = student(anomalous)
        loss = cosine_distance_loss(teacher_py, student_py)
        value = float(loss.detach())
        _guard_loss(value, "student", it, lambda p: checkpoint().save(p), log_path)
        opt.zero_grad()
        loss.backward()
        opt.step()
        steps_done += 1
        logger.write(
            {
                "stage": "student",
                "iteration": it,
                "loss_cos": value,
                "elapsed_s": round(time.monotonic() - start, 3),
            }
        )
    return checkpoint()


def train_segmentation(
    dataset: ImageStore,
    textures: ImageStore,
    cfg: TrainConfig,
    student_ckpt: Checkpoint,
    teacher: Optional[TeacherNet] = None,
    log_path=None,
    device: str = "cpu",
) -> Checkpoint:
    """Stage 2: train the segmentation head; teacher and student stay frozen.

    Both networks consume the same pseudo-anomalous images; supervision is the
    synthetic mask downsampled to the map resolution. The head's residual
    blocks train at ``lr_seg_blocks`` and its RCM at ``lr_rcm``.
    """
    sampler = _BatchSampler(dataset, textures, cfg)
    if teacher is None:
        teacher = build_teacher(cfg)
    if teacher.digest() != student_ckpt.teacher_digest:
        raise WeightLoadError(
            "teacher weights do not match the ones the student was trained against"
        )
    dev = torch.device(device)
    teacher.to(dev)
    student = build_student(student_ckpt.config)
    _load_module_state(student, student_ckpt.student_state)
    student.to(dev)
    student.eval()
    for p in student.parameters():
        p.requires_grad_(False)

    rng = _restore_rng(student_ckpt.torch_rng, student_ckpt.numpy_rng)
    head = build_seg_head(cfg)
    head.to(dev)
    head.train()
    rcm_params = list(head.rcm.parameters()) if head.rcm is not None else []
    rcm_ids = {id(p) for p in rcm_params}
    block_params = [p for p in head.parameters() if id(p) not in rcm_ids]
    groups = [{"params": block_params, "lr": cfg.lr_seg_blocks}]
    if rcm_params:
        groups.append({"params": rcm_params, "lr": cfg.lr_rcm})
    opt = SGD(groups, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    loss_cfg = LossConfig(gamma=cfg.focal_gamma)
    logger = _Logger(log_path)
    start = time.monotonic()

    steps_done = 0

    def checkpoint() -> Checkpoint:
        torch_state, numpy_state = _capture_rng(rng)
        return Checkpoint(
            stage="segmentation",
            iteration=steps_done,
            config=cfg,
            teacher_digest=teacher.digest(),
            student_state=serialization.module_state_arrays(student),
            seg_state=serialization.module_state_arrays(head),
            torch_rng=torch_state,
            numpy_rng=numpy_state,
        )

    for it in range(cfg.stage2_iters):
        _, anomalous, masks = sampler.draw(rng)
        anomalous, masks = anomalous.to(dev), masks.to(dev)
        with torch.no_grad():
            teacher_py = teacher(anomalous)
            student_py = student(anomalous)
            seg_in = build_seg_input(teacher_py, student_py)
        prob = head(seg_in)
        target = downsample_mask(masks, cfg.image_size // prob.shape[-1])
        focal = focal_loss(prob, target, loss_cfg)
        l1 = l1_loss(prob, target)
        loss = focal + l1
        value = float(loss.detach())
        _guard_loss(value, "segmentation", it, lambda p: checkpoint().save(p), log_path)
        opt.zero_grad()
        loss.backward()
        opt.step()
        steps_done += 1
        logger.write(
            {
                "stage": "segmentation",
                "iteration": it,
                "loss_seg": value,
                "loss_focal": float(focal.detach()),
                "loss_l1": float(l1.detach()),
                "elapsed_s": round(time.monotonic() - start, 3),
            }
        )
    return checkpoint()


class InferenceEngine:
    """Rebuilds the networks from a checkpoint once; runs per-image inference."""

    def __init__(
        self, ckpt: Checkpoint, teacher: Optional[TeacherNet] = None, device: str = "cpu"
    ):
        if ckpt.stage != "segmentation" or ckpt.seg_state is None:
            raise WeightLoadError("inference needs a stage-2 (segmentation) checkpoint")
        self.config = ckpt.config
        self.device = torch.device(device)
        self.teacher = teacher if teacher is not None else build_teacher(ckpt.config)
        if self.teacher.digest() != ckpt.teacher_digest:
            raise WeightLoadError("teacher weights do not match the checkpoint")
        self.teacher.to(self.device)
        self.student = build_student(ckpt.config)
        _load_module_state(self.student, ckpt.student_state)
        self.student.to(self.device)
        self.student.eval()
        self.head = build_seg_head(ckpt.config)
        _load_module_state(self.head, ckpt.seg_state)
        self.head.to(self.device)
        self.head.eval()

    @torch.no_grad()
    def infer(self, image: np.ndarray) -> tuple[np.ndarray, float]:
        """Anomaly map at the input's resolution plus an image-level score.

        ``image`` is H x W x 3 float in [0, 1]. Inputs whose sides are not
        divisible by 32 are resized to the configured square size first; the
        map is always upsampled back to H x W.
        """
        h, w = image.shape[:2]
        x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1), dtype=np.float32))
        x = x.unsqueeze(0).to(self.device)
        if h % 32 or w % 32:
            size = (self.config.image_size, self.config.image_size)
            x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        prob = self.head(build_seg_input(self.teacher(x), self.student(x)))
        full = F.interpolate(prob.unsqueeze(1), size=(h, w), mode="bilinear", align_corners=False)
        amap = full[0, 0].cpu().numpy().astype(np.float32)
        return amap, image_score(amap)


def infer(
    image: np.ndarray, ckpt: Checkpoint, teacher: Optional[TeacherNet] = None
) -> tuple[np.ndarray, float]:
    """One-shot convenience wrapper around :class:`InferenceEngine`."""
    return InferenceEngine(ckpt, teacher).infer(image)
