"""SGD training loop: taxonomy -> pivot -> NCL/PC losses -> model update."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .data import Sample, random_crop_flip
from .losses import LossBreakdown, ncl_loss, pc_loss, total_loss
from .metrics import evaluate
from .model import BackboneConfig, NCLNet, image_to_tensor
from .pivot import PivotPair, aggregate_contour, pool_contours
from .taxonomy import PatchLabel, contour_pixel_map, partition_patches, shrink_mask

log = logging.getLogger(__name__)

LOG_FIELDS = ["step", "epoch", "lr", "ncl", "pc", "total", "m", "n", "k"]


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    variant: str = "tiny"
    batch_size: int = 4
    crop_size: int = 512
    lr0: float = 0.007
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    max_epochs: int = 70
    omega: float = 0.01
    mu: float = 0.9
    tau: float = 0.1
    seed: int = 0
    enable_pivot: bool = True
    enable_pc: bool = True
    max_cells_per_class: int = 256
    patch_stride: int = 4

    def __post_init__(self):
        for name in ("batch_size", "crop_size", "lr0", "tau", "max_cells_per_class"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("momentum", "weight_decay", "poly_power", "omega", "max_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError("mu must lie in [0, 1]")
        if self.crop_size % 8:
            raise ValueError("crop_size must be divisible by 8")

    @classmethod
    def tiny(cls, **kw) -> "TrainConfig":
        return cls(**{"variant": "tiny", "crop_size": 64, "max_epochs": 15, **kw})

    @property
    def variant_name(self) -> str:
        if not self.enable_pivot:
            return "Base+PC" if self.enable_pc else "Base"
        return "Base+Pivot+PC" if self.enable_pc else "Base+Pivot"

    @property
    def effective_omega(self) -> float:
        return self.omega if self.enable_pivot else 0.0

    @property
    def effective_mu(self) -> float:
        return self.mu if self.enable_pc else 0.0

    def backbone(self) -> BackboneConfig:
        if self.variant == "tiny":
            return BackboneConfig.tiny()
        if self.variant == "resnet101":
            return BackboneConfig.resnet101()
        raise ValueError(f"unknown variant {self.variant!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ------------------------------------------------------------------ config file


def _coerce(raw: str, typ):
    if typ is bool or typ == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ in (int, "int"):
        return int(raw)
    if typ in (float, "float"):
        return float(raw)
    return raw.strip()


def parse_overrides(lines) -> dict:
    """Parse ``key=value`` lines (blank lines and ``#`` comments ignored)."""
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ValueError(f"unknown config key {key!r}")
        out[key] = _coerce(value, fields[key])
    return out


def load_config(path=None, overrides=(), base: TrainConfig | None = None) -> TrainConfig:
    values = dataclasses.asdict(base or TrainConfig())
    if path is not None:
        values.update(parse_overrides(Path(path).read_text().splitlines()))
    values.update(parse_overrides(overrides))
    return TrainConfig(**values)


def dump_config(config: TrainConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in config.to_dict().items())


# --------------------------------------------------------------------- schedule


def poly_lr(step: int, total_steps: int, lr0: float = 0.007, power: float = 0.9) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 - step / total_steps) ** power


def build_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.SGD:
    """SGD with weight decay on conv/linear weights only (biases and norm terms exempt)."""
    decay, no_decay = [], []
    for _, p in model.named_parameters():
        (decay if p.dim() > 1 else no_decay).append(p)
    return torch.optim.SGD(
        [
            {"params": decay, "weight_decay": config.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=config.lr0,
        momentum=config.momentum,
    )


# ------------------------------------------------------------------------- step


def _step_rng(seed: int, step: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 1, int(step), int(index)]))


def _subsample(idx: np.ndarray, limit: int, rng: np.random.Generator) -> np.ndarray:
    if len(idx) <= limit:
        return idx
    return np.sort(rng.choice(idx, size=limit, replace=False))


def compute_losses(model: NCLNet, images: torch.Tensor, masks: list[np.ndarray], config: TrainConfig, step: int = 0):
    """Forward a batch and return (total loss tensor, LossBreakdown)."""
    bundle = model(images)
    B = images.shape[0]
    stride = config.patch_stride
    labels = [partition_patches(m, stride) for m in masks]

    ncl_terms, m_tot, n_tot, k_tot = [], 0, 0, 0
    if config.enable_pivot:
        feats = []
        pooled_rows, pooled_owner = [], []
        for b in range(B):
            fmap = bundle.block1[b]
            flat = fmap.flatten(1).t()  # (Hf*Wf, C)
            lab = labels[b].labels.ravel()
            rng = _step_rng(config.seed, step, b)
            pos_idx = _subsample(np.flatnonzero(lab == PatchLabel.TAMPERED), config.max_cells_per_class, rng)
            neg_idx = _subsample(np.flatnonzero(lab == PatchLabel.AUTHENTIC), config.max_cells_per_class, rng)
            contours = aggregate_contour(fmap, labels[b])
            feats.append((flat[torch.from_numpy(pos_idx)], flat[torch.from_numpy(neg_idx)]))
            m_tot, n_tot, k_tot = m_tot + len(pos_idx), n_tot + len(neg_idx), k_tot + contours.shape[0]
            if contours.shape[0]:
                pooled_rows.append(pool_contours(contours))
                pooled_owner.append(b)
        pairs: dict[int, PivotPair] = {}
        if pooled_rows:
            se_plus, se_minus = model.pivot(torch.stack(pooled_rows))
            pairs = {b: PivotPair(se_plus[i], se_minus[i]) for i, b in enumerate(pooled_owner)}
        for b, (pos, neg) in enumerate(feats):
            ncl_terms.append(ncl_loss(pos, neg, pairs.get(b), tau=config.tau))
        ncl = torch.stack(ncl_terms).mean()
    else:
        ncl = bundle.block1.new_zeros(())

    stages = []
    for logits in bundle.stage_logits:
        h, w = logits.shape[-2:]
        gt = np.stack([shrink_mask(m, (h, w)) for m in masks])
        contour = np.stack([contour_pixel_map(lab, (h, w)) for lab in labels])
        stages.append((torch.sigmoid(logits), torch.from_numpy(gt).float(), torch.from_numpy(contour).float()))
    pc, per_stage = pc_loss(stages, mu=config.effective_mu)

    total = total_loss(ncl, pc, config.effective_omega)
    breakdown = LossBreakdown(
        ncl=float(ncl.detach()),
        pc=float(pc.detach()),
        pc_per_stage=[float(s.detach()) for s in per_stage],
        total=float(total.detach()),
        term_counts=(m_tot, n_tot, k_tot),
    )
    if not math.isfinite(breakdown.total):
        raise NonFiniteLossError(
            f"non-finite loss at step {step}: ncl={breakdown.ncl} pc={breakdown.pc} "
            f"per_stage={breakdown.pc_per_stage} counts(m,n,k)={breakdown.term_counts} "
            f"block1 range=[{float(bundle.block1.detach().min())}, {float(bundle.block1.detach().max())}]"
        )
    return total, breakdown


def collate(samples: list[Sample]) -> tuple[torch.Tensor, list[np.ndarray]]:
    images = torch.cat([image_to_tensor(s.image) for s in samples])
    return images, [s.mask for s in samples]


def train_step(model, optimizer, samples: list[Sample], config: TrainConfig, step: int, total_steps: int) -> LossBreakdown:
    """One SGD update on a batch of crop-sized samples."""
    lr = poly_lr(step, total_steps, config.lr0, config.poly_power)
    for group in optimizer.param_groups:
        group["lr"] = lr
    model.train()
    images, masks = collate(samples)
    total, breakdown = compute_losses(model, images, masks, config, step)
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    breakdown.extra["lr"] = lr
    return breakdown


# -------------------------------------------------------------------------- fit


@dataclass
class TrainState:
    config: TrainConfig
    model: NCLNet
    optimizer: torch.optim.SGD
    step: int = 0
    epoch: int = 0  # completed epochs
    best_f1: float = -1.0
    best_epoch: int = -1
    log_rows: list[dict] = field(default_factory=list)
    epoch_means: list[float] = field(default_factory=list)
    val_history: list[float] = field(default_factory=list)

    def meta(self) -> dict:
        return {
            "step": self.step,
            "epoch": self.epoch,
            "best_f1": self.best_f1,
            "best_epoch": self.best_epoch,
            "epoch_means": self.epoch_means,
            "val_history": self.val_history,
        }

    def save(self, path) -> None:
        checkpoint.save_checkpoint(path, self.model, self.optimizer, self.config.to_dict(), self.meta())


def init_state(config: TrainConfig) -> TrainState:
    torch.manual_seed(config.seed)
    model = NCLNet(config.backbone())
    return TrainState(config=config, model=model, optimizer=build_optimizer(model, config))


def load_state(path) -> TrainState:
    cfg, meta, tensors = checkpoint.read_checkpoint(path)
    config = TrainConfig(**cfg)
    model = NCLNet(config.backbone())
    optimizer = build_optimizer(model, config)
    checkpoint.restore(model, tensors, optimizer)
    checkpoint.restore_rng(meta)
    state = TrainState(config=config, model=model, optimizer=optimizer)
    for key in ("step", "epoch", "best_f1", "best_epoch", "epoch_means", "val_history"):
        setattr(state, key, meta[key])
    return state


def load_model(path) -> NCLNet:
    return load_state(path).model


def epoch_batches(train_set: list[Sample], config: TrainConfig, epoch: int) -> list[list[Sample]]:
    """Shuffled, augmented batches; depends only on (seed, epoch, sample ids)."""
    order = np.random.default_rng(np.random.SeedSequence([config.seed, 2, epoch])).permutation(len(train_set))
    crops = []
    for i in order:
        s = train_set[i]
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3, epoch, zlib.crc32(s.id.encode())]))
        crops.append(random_crop_flip(s, config.crop_size, rng))
    bs = config.batch_size
    return [crops[i : i + bs] for i in range(0, len(crops), bs)]


def steps_per_epoch(n_train: int, batch_size: int) -> int:
    return math.ceil(n_train / batch_size)


def fit(
    config: TrainConfig,
    train_set,
    val_set=None,
    out_dir=None,
    resume=None,
    stop_after_epoch: int | None = None,
) -> TrainState:
    """Train for ``config.max_epochs`` epochs.

    Each epoch is scored on ``val_set`` by fixed-threshold F1 and the best
    model is written to ``out_dir/best.safetensors``; ``last.safetensors`` is
    rewritten every epoch and can be passed back as ``resume``.
    ``stop_after_epoch`` ends the run early (used to produce mid-run
    checkpoints).
    """
    train_set = list(train_set)
    if not train_set:
        raise ValueError("training set is empty")
    state = load_state(resume) if resume is not None else init_state(config)
    if resume is not None:
        config = state.config
    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "loss_log.csv"
        if resume is None or not log_path.exists():
            with open(log_path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_FIELDS)

    per_epoch = steps_per_epoch(len(train_set), config.batch_size)
    total_steps = max(1, config.max_epochs * per_epoch)
    last = config.max_epochs if stop_after_epoch is None else min(config.max_epochs, stop_after_epoch)

    for epoch in range(state.epoch, last):
        epoch_totals = []
        for batch in epoch_batches(train_set, config, epoch):
            bd = train_step(state.model, state.optimizer, batch, config, state.step, total_steps)
            row = {**bd.log_row(state.step), "epoch": epoch, "lr": bd.extra["lr"]}
            state.log_rows.append(row)
            epoch_totals.append(bd.total)
            if log_path is not None:
                with open(log_path, "a", newline="") as fh:
                    csv.DictWriter(fh, LOG_FIELDS).writerow(row)
            state.step += 1
        state.epoch = epoch + 1
        state.epoch_means.append(math.fsum(epoch_totals) / len(epoch_totals))
        msg = f"epoch {epoch + 1}/{config.max_epochs} mean total {state.epoch_means[-1]:.4f}"
        if val_set:
            f1 = evaluate(state.model, val_set).f1_fixed
            state.val_history.append(f1)
            msg += f" val f1 {f1:.4f}"
            if f1 > state.best_f1:
                state.best_f1, state.best_epoch = f1, epoch + 1
                if out is not None:
                    state.save(out / "best.safetensors")
        log.info(msg)
        if out is not None:
            state.save(out / "last.safetensors")
    return state
