"""Training loop for semi-supervised segmentation with mixed-prototype
consistency, plus configuration handling, checkpoints, evaluation, and
the ablation matrix runner.

One semi-supervised step:

1. build the mixed sample(s) by pairing the shuffled labeled batch;
2. student forwards the labeled and unlabeled batches, the teacher
   (no grad) the unlabeled batch, the auxiliary network the mixed batch;
3. teacher mean predictions become entropy-weighted reliable pseudo-labels;
4. masked average pooling extracts labeled / unlabeled / mixed prototypes
   from the tapped decoder features;
5. prototype fusion (per the configured variant) with the ramp value
   lambda_con(t) yields global prototypes;
6. cosine similarity maps of the student features against the global
   prototypes feed the two consistency losses;
7. supervised losses for the labeled (student) and mixed (auxiliary)
   branches complete the objective;
8. one optimizer step each for student and auxiliary, then the teacher
   EMA update.

The trainer is bitwise deterministic for a fixed seed, and checkpoints
capture everything needed to continue a run identically.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import augment as aug
from .errors import InvalidParam, NonFiniteLoss
from .losses import LossBundle, consistency_loss, supervised_loss, total_loss
from .metrics import MetricReport, aggregate_reports, evaluate_masks
from .netcore import NetworkTriple, SegNet, SegNetConfig
from .prototypes import (
    FusionCoefficients,
    PrototypeSet,
    fuse_global,
    fuse_labeled_mixed,
    fuse_unlabeled_mixed,
    masked_prototype,
    masked_prototype_weighted,
    similarity_map,
)
from .uncertainty import reliable_pseudo_label, voxel_entropy
from .volumes import (
    DatasetSplit,
    ProbabilityVolume,
    VolumeSample,
    normalize_intensity,
    random_crop,
    sliding_window_predict,
)

FUSION_VARIANTS = ("full", "n-n", "m-l", "m-ul", "l-ul")
METHODS = ("semi", "supervised")


# --------------------------------------------------------------------------- #
# configuration
# --------------------------------------------------------------------------- #
@dataclass
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 0.01
    iterations: int = 2000


@dataclass
class BatchConfig:
    labeled_per_step: int = 2
    unlabeled_per_step: int = 2
    mixed_per_step: int = 1


@dataclass
class RampConfig:
    # length of the warm-up in iterations; None resolves to 0.4 * iterations
    ramp_len: int | None = None


@dataclass
class ProtoConfig:
    lambda1: float = 0.5
    lambda2: float = 0.5
    lambda3: float = 0.5
    lambda4: float = 0.5
    temperature: float = 20.0
    k: int = 1
    fusion_variant: str = "full"
    detach_mixed: bool = True


@dataclass
class LossConfig:
    consistency_kind: str = "ce"
    focal_gamma: float = 2.0
    epsilon: float = 1e-5
    uc_target: str = "soft"  # unlabeled consistency target: soft or hard


@dataclass
class UncertaintyConfig:
    mode: str = "normalized"


@dataclass
class AugmentConfig:
    kind: str = "cutmix"
    cut_min: float = 0.25
    cut_max: float = 0.5


@dataclass
class MixupConfig:
    alpha: float = 1.0


@dataclass
class DataConfig:
    root: str = ""
    labeled_fraction: float = 0.2
    val_count: int = 10
    patch_shape: tuple[int, int, int] | None = None
    eval_stride: tuple[int, int, int] | None = None


@dataclass
class RunConfig:
    model: SegNetConfig = field(default_factory=SegNetConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch: BatchConfig = field(default_factory=BatchConfig)
    ramp: RampConfig = field(default_factory=RampConfig)
    proto: ProtoConfig = field(default_factory=ProtoConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    uncertainty: UncertaintyConfig = field(default_factory=UncertaintyConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    mixup: MixupConfig = field(default_factory=MixupConfig)
    data: DataConfig = field(default_factory=DataConfig)
    method: str = "semi"
    ema_decay: float = 0.99
    seed: int = 0
    precision: str = "float32"
    eval_every: int = 200
    checkpoint_every: int = 500

    def validate(self) -> None:
        if self.method not in METHODS:
            raise InvalidParam(f"method must be one of {METHODS}")
        if self.precision not in ("float32", "float64"):
            raise InvalidParam("precision must be float32 or float64")
        if self.optimizer.kind not in ("adam", "sgd"):
            raise InvalidParam("optimizer.kind must be adam or sgd")
        if self.batch.mixed_per_step != self.batch.labeled_per_step // 2:
            raise InvalidParam("batch.mixed_per_step must equal labeled_per_step // 2")
        if self.proto.fusion_variant.lower() not in FUSION_VARIANTS:
            raise InvalidParam(
                f"proto.fusion_variant must be one of {FUSION_VARIANTS}"
            )
        if not (1 <= self.proto.k <= self.model.depth):
            raise InvalidParam(f"proto.k must be in [1, {self.model.depth}]")
        if self.loss.consistency_kind not in ("ce", "kl", "mse", "mae"):
            raise InvalidParam("loss.consistency_kind must be ce/kl/mse/mae")
        if self.loss.uc_target not in ("soft", "hard"):
            raise InvalidParam("loss.uc_target must be soft or hard")
        if self.augment.kind not in ("cutmix", "mixup", "cutout", "fmix"):
            raise InvalidParam("augment.kind must be cutmix/mixup/cutout/fmix")
        if not (0.0 <= self.ema_decay <= 1.0):
            raise InvalidParam("ema_decay must be in [0, 1]")

    @property
    def ramp_len(self) -> int:
        if self.ramp.ramp_len is not None:
            return max(1, int(self.ramp.ramp_len))
        return max(1, int(round(0.4 * self.optimizer.iterations)))


def _flatten(obj, prefix: str = "") -> dict[str, object]:
    out: dict[str, object] = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(_flatten(value, prefix=f"{key}."))
        elif isinstance(value, tuple):
            out[key] = list(value)
        else:
            out[key] = value
    return out


def config_to_flat(cfg: RunConfig) -> dict[str, object]:
    """Dotted-key view of the full configuration."""
    return _flatten(cfg)


def config_hash(cfg: RunConfig) -> str:
    canon = json.dumps(config_to_flat(cfg), sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _coerce(raw, annotation):
    """Parse a string override into the annotated field type."""
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        if text.lower() in ("none", "null"):
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(text, inner[0])
    if origin is tuple or annotation is tuple:
        parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p]
        elem = args[0] if args else int
        return tuple(_coerce(p, elem) for p in parts)
    if annotation is bool:
        if text.lower() in ("true", "1", "yes", "on"):
            return True
        if text.lower() in ("false", "0", "no", "off"):
            return False
        raise InvalidParam(f"cannot parse boolean from {raw!r}")
    if annotation is int:
        return int(text)
    if annotation is float:
        return float(text)
    return text


def apply_override(cfg: RunConfig, key: str, value) -> None:
    """Set one dotted-key option, e.g. apply_override(cfg, "proto.k", "2")."""
    parts = key.split(".")
    obj = cfg
    for part in parts[:-1]:
        if not hasattr(obj, part):
            raise InvalidParam(f"unknown config section {part!r} in {key!r}")
        obj = getattr(obj, part)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(obj) or leaf not in {f.name for f in dataclasses.fields(obj)}:
        raise InvalidParam(f"unknown config key {key!r}")
    hints = typing.get_type_hints(type(obj))
    setattr(obj, leaf, _coerce(value, hints[leaf]))


def apply_overrides(cfg: RunConfig, overrides: dict[str, object]) -> RunConfig:
    for key, value in overrides.items():
        apply_override(cfg, key, value)
    return cfg


def parse_config_file(path: Path | str) -> dict[str, str]:
    """Read ``key = value`` lines (dotted keys, '#' comments) into a dict."""
    overrides: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise InvalidParam(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def load_config(path: Path | str | None = None,
                overrides: dict[str, object] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        apply_overrides(cfg, parse_config_file(path))
    if overrides:
        apply_overrides(cfg, overrides)
    cfg.proto.fusion_variant = cfg.proto.fusion_variant.lower()
    cfg.validate()
    return cfg


def config_from_flat(flat: dict[str, object]) -> RunConfig:
    cfg = RunConfig()
    for key, value in flat.items():
        if isinstance(value, list):
            value = tuple(value)
        apply_override(cfg, key, value)
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------- #
# ramp schedule
# --------------------------------------------------------------------------- #
def lambda_con(t: int, ramp_len: int) -> float:
    """Gaussian warm-up exp(-5 * (1 - min(t, T)/T)^2), rising to exactly 1."""
    if ramp_len <= 0:
        return 1.0
    frac = min(t, ramp_len) / ramp_len
    return math.exp(-5.0 * (1.0 - frac) ** 2)


@dataclass
class RampSchedule:
    t: int
    ramp_len: int

    @property
    def value(self) -> float:
        return lambda_con(self.t, self.ramp_len)


# --------------------------------------------------------------------------- #
# trainer
# --------------------------------------------------------------------------- #
class _IndexCycler:
    """Deterministic shuffled sampler over a fixed id list.

    Draws from a pending queue refilled by a seeded permutation; the queue
    is part of the checkpoint state.
    """

    def __init__(self, ids: list[str]):
        self.ids = list(ids)
        self.pending: list[int] = []

    def draw(self, n: int, rng: np.random.Generator) -> list[str]:
        if n > len(self.ids):
            raise InvalidParam(f"cannot draw {n} from pool of {len(self.ids)}")
        out: list[int] = []
        while len(out) < n:
            if not self.pending:
                self.pending = [int(i) for i in rng.permutation(len(self.ids))]
            out.append(self.pending.pop(0))
        return [self.ids[i] for i in out]


class Trainer:
    """Owns the network triple, optimizers, data sampling, and step loop."""

    def __init__(
        self,
        config: RunConfig,
        samples: dict[str, VolumeSample],
        split: DatasetSplit,
        classes: int | None = None,
    ):
        config.validate()
        split.validate()
        self.cfg = config
        self.split = split
        self.samples = {vid: normalize_intensity(s) for vid, s in samples.items()}
        if classes is None:
            labels = [int(s.label.max()) for s in samples.values() if s.label is not None]
            classes = max(labels) + 1 if labels else 2
        self.classes = max(2, int(classes))
        self.dtype = torch.float64 if config.precision == "float64" else torch.float32

        if config.method == "semi" and len(split.unlabeled) < config.batch.unlabeled_per_step:
            raise InvalidParam("not enough unlabeled samples for the configured batch")
        if len(split.labeled) < config.batch.labeled_per_step:
            raise InvalidParam("not enough labeled samples for the configured batch")

        torch.manual_seed(config.seed)
        model_cfg = dataclasses.replace(config.model, classes=self.classes,
                                        feature_tap_k=config.proto.k)
        if config.method == "semi":
            self.nets = NetworkTriple.create(model_cfg, ema_decay=config.ema_decay)
            modules = [self.nets.student, self.nets.teacher, self.nets.auxiliary]
        else:
            student = SegNet(model_cfg)
            self.nets = NetworkTriple(student=student, teacher=student,
                                      auxiliary=student, ema_decay=config.ema_decay)
            modules = [student]
        for m in modules:
            m.to(dtype=self.dtype, memory_format=torch.channels_last_3d)

        self.opt_student = self._make_optimizer(self.nets.student)
        self.opt_aux = (self._make_optimizer(self.nets.auxiliary)
                        if config.method == "semi" else None)

        self.data_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xDA7A]))
        self._labeled_cycler = _IndexCycler(split.labeled)
        self._unlabeled_cycler = _IndexCycler(split.unlabeled)
        self.t = 0

    # ------------------------------------------------------------------ #
    def _make_optimizer(self, net: SegNet) -> torch.optim.Optimizer:
        lr = self.cfg.optimizer.learning_rate
        if self.cfg.optimizer.kind == "adam":
            return torch.optim.Adam(net.parameters(), lr=lr)
        return torch.optim.SGD(net.parameters(), lr=lr, momentum=0.9)

    def _fetch(self, vid: str) -> VolumeSample:
        sample = self.samples[vid]
        patch = self.cfg.data.patch_shape
        if patch is not None and tuple(patch) != sample.shape:
            sample = random_crop(sample, patch, self.data_rng)
        return sample

    def _to_tensors(self, batch: list[VolumeSample]) -> tuple[torch.Tensor, torch.Tensor]:
        images = np.stack([s.image for s in batch])[:, None]
        labels = np.stack([s.label for s in batch])
        x = torch.from_numpy(images).to(self.dtype)
        x = x.contiguous(memory_format=torch.channels_last_3d)
        y = torch.from_numpy(labels.astype(np.int64))
        return x, y

    def sample_batches(self) -> tuple[list[VolumeSample], list[VolumeSample]]:
        labeled_ids = self._labeled_cycler.draw(self.cfg.batch.labeled_per_step, self.data_rng)
        labeled = [self._fetch(v) for v in labeled_ids]
        unlabeled = []
        if self.cfg.method == "semi":
            unlabeled_ids = self._unlabeled_cycler.draw(
                self.cfg.batch.unlabeled_per_step, self.data_rng)
            unlabeled = [self._fetch(v) for v in unlabeled_ids]
        return labeled, unlabeled

    def _build_mixed(self, labeled: list[VolumeSample]) -> list[VolumeSample]:
        return aug.build_mixed_batch(
            labeled,
            self.data_rng,
            kind=self.cfg.augment.kind,
            cut_min=self.cfg.augment.cut_min,
            cut_max=self.cfg.augment.cut_max,
            mixup_alpha=self.cfg.mixup.alpha,
            classes=self.classes,
        )

    # ------------------------------------------------------------------ #
    def _forward_losses(
        self,
        labeled: list[VolumeSample],
        unlabeled: list[VolumeSample],
        mixed: list[VolumeSample],
        lam: float,
    ) -> tuple[torch.Tensor, LossBundle, dict]:
        """Compute the step objective; returns (total, bundle, internals).

        Pure in the network parameters: no optimizer or EMA mutation here,
        which keeps the objective checkable by finite differences.
        """
        cfg = self.cfg
        k = cfg.proto.k
        xl, yl = self._to_tensors(labeled)
        sup_out = self.nets.student(xl, tap_k=k)
        sup_l = supervised_loss(sup_out.head_probs, sup_out.mean_probs, yl,
                                focal_gamma=cfg.loss.focal_gamma,
                                epsilon=cfg.loss.epsilon)
        if cfg.method == "supervised":
            total, bundle = total_loss(sup_l, None, None, None, 0.0)
            return total, bundle, {}

        xu, _ = self._to_tensors_unlabeled(unlabeled)
        xm, ym = self._to_tensors(mixed)
        stu_u = self.nets.student(xu, tap_k=k)
        with torch.no_grad():
            tea_u = self.nets.teacher(xu, tap_k=k)
        aux_m = self.nets.auxiliary(xm, tap_k=k)

        soft_pl, hard_pl = reliable_pseudo_label(tea_u.mean_probs, cfg.uncertainty.mode)
        entropy_u = voxel_entropy(tea_u.mean_probs)

        p_l = masked_prototype(sup_out.tap_features_upsampled, yl, self.classes,
                               source="labeled")
        p_u = masked_prototype_weighted(tea_u.tap_features_upsampled, hard_pl,
                                        entropy_u, self.classes,
                                        mode=cfg.uncertainty.mode)
        aux_feats = aux_m.tap_features_upsampled
        if cfg.proto.detach_mixed:
            aux_feats = aux_feats.detach()
        p_m = masked_prototype(aux_feats, ym, self.classes, source="mixed")

        coeffs = FusionCoefficients(cfg.proto.lambda1, cfg.proto.lambda2,
                                    cfg.proto.lambda3, cfg.proto.lambda4)
        variant = cfg.proto.fusion_variant
        if variant in ("full", "m-ul", "l-ul"):
            p_lm = fuse_labeled_mixed(p_l, p_m, coeffs)
        else:  # n-n, m-l: skip the labeled+mixed fusion
            p_lm = PrototypeSet(dict(p_l.vectors), source="labeled_fused")
        if variant in ("full", "m-l", "l-ul"):
            p_um = fuse_unlabeled_mixed(p_u, p_m, coeffs)
        else:  # n-n, m-ul: skip the unlabeled+mixed fusion
            p_um = PrototypeSet(dict(p_u.vectors), source="unlabeled_fused")
        if variant == "l-ul":
            p_glob = PrototypeSet(dict(p_lm.vectors), source="global")
        else:
            p_glob = fuse_global(p_lm, p_um, lam)

        sim_l = similarity_map(sup_out.tap_features_upsampled, p_glob,
                               cfg.proto.temperature, classes=self.classes)
        sim_u = similarity_map(stu_u.tap_features_upsampled, p_glob,
                               cfg.proto.temperature, classes=self.classes)

        sup_m = supervised_loss(aux_m.head_probs, aux_m.mean_probs, ym,
                                focal_gamma=cfg.loss.focal_gamma,
                                epsilon=cfg.loss.epsilon)
        l_lc = consistency_loss(sim_l.probs, yl, cfg.loss.consistency_kind)
        uc_target = soft_pl if cfg.loss.uc_target == "soft" else hard_pl
        l_uc = consistency_loss(sim_u.probs, uc_target, cfg.loss.consistency_kind)

        total, bundle = total_loss(sup_l, sup_m, l_lc, l_uc, lam)
        internals = {
            "p_l": p_l, "p_u": p_u, "p_m": p_m,
            "p_lm": p_lm, "p_um": p_um, "p_global": p_glob,
            "sim_l": sim_l, "sim_u": sim_u,
            "pseudo_soft": soft_pl, "pseudo_hard": hard_pl,
            "entropy": entropy_u,
        }
        return total, bundle, internals

    def _to_tensors_unlabeled(self, batch: list[VolumeSample]) -> tuple[torch.Tensor, None]:
        images = np.stack([s.image for s in batch])[:, None]
        x = torch.from_numpy(images).to(self.dtype)
        return x.contiguous(memory_format=torch.channels_last_3d), None

    def train_step(self) -> LossBundle:
        """Run one full training step and advance the counter."""
        labeled, unlabeled = self.sample_batches()
        mixed = self._build_mixed(labeled) if self.cfg.method == "semi" else []
        lam = lambda_con(self.t, self.cfg.ramp_len) if self.cfg.method == "semi" else 0.0
        total, bundle, _ = self._forward_losses(labeled, unlabeled, mixed, lam)
        if not bundle.is_finite():
            raise NonFiniteLoss(
                f"non-finite loss at step {self.t}: {bundle.as_dict()}", bundle
            )
        self.opt_student.zero_grad(set_to_none=True)
        if self.opt_aux is not None:
            self.opt_aux.zero_grad(set_to_none=True)
        total.backward()
        self.opt_student.step()
        if self.opt_aux is not None:
            self.opt_aux.step()
        if self.cfg.method == "semi":
            self.nets.ema_step()
        self.t += 1
        return bundle

    # ------------------------------------------------------------------ #
    def _infer_patch(self, patch: VolumeSample) -> ProbabilityVolume:
        x = torch.from_numpy(patch.image[None, None].astype(
            np.float64 if self.dtype == torch.float64 else np.float32))
        x = x.to(self.dtype).contiguous(memory_format=torch.channels_last_3d)
        with torch.no_grad():
            out = self.nets.student(x, tap_k=self.cfg.proto.k)
        return ProbabilityVolume(probs=out.mean_probs[0].to(torch.float32).numpy())

    def evaluate(self, ids: list[str]) -> tuple[list[MetricReport], MetricReport]:
        """Sliding-window inference with the student, then per-class metrics."""
        self.nets.student.eval()
        reports = []
        try:
            for vid in ids:
                v = self.samples[vid]
                window = self.cfg.data.patch_shape or v.shape
                stride = self.cfg.data.eval_stride or window
                probs = sliding_window_predict(v, window, stride, self._infer_patch)
                pred = probs.argmax_labels()
                reports.append(evaluate_masks(pred, v.label, self.classes, volume_id=vid))
        finally:
            self.nets.student.train()
        return reports, aggregate_reports(reports)

    # ------------------------------------------------------------------ #
    def run(
        self,
        out_dir: Path | str | None = None,
        iterations: int | None = None,
        progress: bool = False,
    ) -> tuple[list[LossBundle], list[tuple[int, MetricReport]]]:
        """Train to ``iterations`` (default: configured), logging per-step
        loss rows and periodic validation metrics; optionally persist the
        log, eval history, and checkpoints under ``out_dir``."""
        target = self.cfg.optimizer.iterations if iterations is None else iterations
        out = Path(out_dir) if out_dir is not None else None
        log_file = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            mode = "a" if self.t > 0 else "w"
            log_file = (out / "train_log.csv").open(mode)
            if self.t == 0:
                log_file.write("step," + ",".join(LossBundle.field_names()) + "\n")
        rows: list[LossBundle] = []
        evals: list[tuple[int, MetricReport]] = []
        try:
            while self.t < target:
                bundle = self.train_step()
                rows.append(bundle)
                if log_file is not None:
                    log_file.write(f"{self.t - 1},{bundle.csv_row()}\n")
                if progress and self.t % 100 == 0:
                    print(f"step {self.t}/{target} total={bundle.total:.4f}", flush=True)
                due_eval = self.cfg.eval_every and self.t % self.cfg.eval_every == 0
                if (due_eval or self.t == target) and self.split.validation:
                    _, agg = self.evaluate(self.split.validation)
                    evals.append((self.t, agg))
                if out is not None and self.cfg.checkpoint_every and \
                        self.t % self.cfg.checkpoint_every == 0:
                    self.save_checkpoint(out / "checkpoint_last.pt")
        finally:
            if log_file is not None:
                log_file.close()
        if out is not None:
            self.save_checkpoint(out / "checkpoint_last.pt")
            _write_eval_log(out / "eval_log.csv", evals)
        return rows, evals

    # ------------------------------------------------------------------ #
    def save_checkpoint(self, path: Path | str) -> None:
        """Everything needed to continue the run bit-exactly."""
        payload = {
            "format_version": 1,
            "config": config_to_flat(self.cfg),
            "config_hash": config_hash(self.cfg),
            "classes": self.classes,
            "t": self.t,
            "student": self.nets.student.state_dict(),
            "teacher": self.nets.teacher.state_dict() if self.cfg.method == "semi" else None,
            "auxiliary": self.nets.auxiliary.state_dict() if self.cfg.method == "semi" else None,
            "opt_student": self.opt_student.state_dict(),
            "opt_aux": self.opt_aux.state_dict() if self.opt_aux is not None else None,
            "data_rng": self.data_rng.bit_generator.state,
            "labeled_pending": list(self._labeled_cycler.pending),
            "unlabeled_pending": list(self._unlabeled_cycler.pending),
            "torch_rng": torch.get_rng_state(),
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)

    @classmethod
    def restore(
        cls,
        path: Path | str,
        samples: dict[str, VolumeSample] | None = None,
        split: DatasetSplit | None = None,
    ) -> "Trainer":
        payload = torch.load(path, weights_only=False)
        cfg = config_from_flat(payload["config"])
        if samples is None:
            from .synthdata import load_dataset
            samples, split, _ = load_dataset(cfg.data.root)
        trainer = cls(cfg, samples, split, classes=payload["classes"])
        trainer.t = payload["t"]
        trainer.nets.student.load_state_dict(payload["student"])
        if cfg.method == "semi":
            trainer.nets.teacher.load_state_dict(payload["teacher"])
            trainer.nets.auxiliary.load_state_dict(payload["auxiliary"])
        trainer.opt_student.load_state_dict(payload["opt_student"])
        if trainer.opt_aux is not None:
            trainer.opt_aux.load_state_dict(payload["opt_aux"])
        trainer.data_rng.bit_generator.state = payload["data_rng"]
        trainer._labeled_cycler.pending = list(payload["labeled_pending"])
        trainer._unlabeled_cycler.pending = list(payload["unlabeled_pending"])
        torch.set_rng_state(payload["torch_rng"])
        return trainer


def _write_eval_log(path: Path, evals: list[tuple[int, MetricReport]]) -> None:
    with path.open("w") as fh:
        fh.write("step,dice,jaccard,hd95,asd\n")
        for step, agg in evals:
            m = agg.mean
            fh.write(f"{step},{m.dice!r},{m.jaccard!r},{m.hd95!r},{m.asd!r}\n")


# --------------------------------------------------------------------------- #
# ablation matrix
# --------------------------------------------------------------------------- #
def run_ablation(
    base_config: RunConfig,
    matrix: list[tuple[str, dict[str, object]]],
    seeds: list[int],
    make_data,
    out_dir: Path | str | None = None,
    progress: bool = False,
) -> list[dict]:
    """Run every override row across ``seeds`` and tabulate the results.

    ``make_data(seed)`` must return (samples, split, classes). Each row of
    the returned table carries the config knobs being swept plus
    mean/std of the validation metrics and seconds per epoch-equivalent
    (one pass over the labeled set).
    """
    table: list[dict] = []
    for name, overrides in matrix:
        dices, jaccards, hd95s, asds, secs = [], [], [], [], []
        cfg_echo = None
        for seed in seeds:
            cfg = config_from_flat(config_to_flat(base_config))
            apply_overrides(cfg, overrides)
            cfg.seed = seed
            cfg.validate()
            cfg_echo = cfg
            samples, split, classes = make_data(seed)
            trainer = Trainer(cfg, samples, split, classes=classes)
            start = time.perf_counter()
            trainer.run(progress=progress)
            elapsed = time.perf_counter() - start
            _, agg = trainer.evaluate(split.validation)
            epochs = cfg.optimizer.iterations * cfg.batch.labeled_per_step / max(
                1, len(split.labeled))
            dices.append(agg.mean.dice)
            jaccards.append(agg.mean.jaccard)
            hd95s.append(agg.mean.hd95)
            asds.append(agg.mean.asd)
            secs.append(elapsed / max(epochs, 1e-9))
        coeffs = FusionCoefficients(cfg_echo.proto.lambda1, cfg_echo.proto.lambda2,
                                    cfg_echo.proto.lambda3, cfg_echo.proto.lambda4)
        table.append({
            "name": name,
            "variant": cfg_echo.proto.fusion_variant,
            "gamma1": coeffs.gamma1,
            "gamma2": coeffs.gamma2,
            "k": cfg_echo.proto.k,
            "consistency_kind": cfg_echo.loss.consistency_kind,
            "augment_kind": cfg_echo.augment.kind,
            "seeds": list(seeds),
            "dice_mean": float(np.mean(dices)), "dice_std": float(np.std(dices)),
            "jaccard_mean": float(np.mean(jaccards)), "jaccard_std": float(np.std(jaccards)),
            "hd95_mean": float(np.mean(hd95s)), "hd95_std": float(np.std(hd95s)),
            "asd_mean": float(np.mean(asds)), "asd_std": float(np.std(asds)),
            "seconds_per_epoch": float(np.mean(secs)),
        })
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(table, indent=2) + "\n")
        if table:
            cols = list(table[0].keys())
            lines = [",".join(cols)]
            for row in table:
                lines.append(",".join(str(row[c]) for c in cols))
            (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    return table


def parse_matrix_file(path: Path | str) -> list[tuple[str, dict[str, str]]]:
    """Each non-comment line: ``<name> key=value [key=value ...]``."""
    rows: list[tuple[str, dict[str, str]]] = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        parts = stripped.split()
        name = parts[0]
        overrides: dict[str, str] = {}
        for token in parts[1:]:
            if "=" not in token:
                raise InvalidParam(f"{path}:{lineno}: expected key=value, got {token!r}")
            key, value = token.split("=", 1)
            overrides[key] = value
        rows.append((name, overrides))
    return rows
