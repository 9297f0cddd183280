"""Generator-only and adversarial training with per-round checkpoints and round selection."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .data import DatasetSplit, FundusSample, iter_batches, preprocess, to_tensors
from .discriminator import Discriminator, DiscriminatorConfig, init_discriminator
from .errors import ConfigError, NumericError
from .evaluation import evaluate_samples, model_predictor, predict_samples
from .generator import Generator, GeneratorConfig, init_parameters
from .losses import LossConfig, composite_generator_loss, gan_discriminator_loss, seg_loss
from .metrics import MetricsReport, write_metrics_csv

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
COLLAPSE_HIGH, COLLAPSE_LOW = 0.99, 0.01


@dataclass
class TrainConfig:
    rounds: int = 10
    epochs_per_round: int = 30
    batch_size: int = 2
    lr: float = 2e-5
    lr_decay: float = 0.9
    loss: LossConfig = field(default_factory=LossConfig)
    adversarial: bool = True
    seed: int = 0
    # ablation overrides; None keeps the generator config's own flag
    use_multires: bool | None = None
    use_biconvlstm: bool | None = None
    val_fraction: float = 0.1
    grad_clip: float = 5.0
    augment: bool = True
    threshold: float = 0.5

    def __post_init__(self) -> None:
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        self.validate()

    def validate(self) -> None:
        if self.rounds < 1 or self.epochs_per_round < 1 or self.batch_size < 1:
            raise ConfigError("rounds, epochs_per_round and batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")

    def to_dict(self) -> dict:
        return asdict(self)

    def generator_config(self, base: GeneratorConfig) -> GeneratorConfig:
        overrides = {k: v for k, v in (("use_multires", self.use_multires),
                                       ("use_biconvlstm", self.use_biconvlstm)) if v is not None}
        return replace(base, **overrides)


@dataclass
class RoundRecord:
    round_index: int
    checkpoint_path: str
    val_f1: float
    val_metrics: MetricsReport
    wall_time: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["val_metrics"] = self.val_metrics.as_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RoundRecord":
        return cls(**{**d, "val_metrics": MetricsReport(**d["val_metrics"])})


def select_best_round(records: Sequence[RoundRecord]) -> RoundRecord:
    """Round with the highest validation F1; the earliest round wins ties."""
    if not records:
        raise ValueError("no rounds to select from")
    return min(records, key=lambda r: (-r.val_f1, r.round_index))


def lr_at(epoch: int, lr0: float, decay: float) -> float:
    return lr0 * decay ** epoch


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, generator: Generator, discriminator: Discriminator | None = None,
                    train_config: TrainConfig | None = None, history: Sequence[RoundRecord] = (),
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "generator_config": generator.config.to_dict(),
        "generator": generator.state_dict(),
        "discriminator_config": None if discriminator is None else discriminator.config.to_dict(),
        "discriminator": None if discriminator is None else discriminator.state_dict(),
        "train_config": None if train_config is None else train_config.to_dict(),
        "torch_rng_state": torch.get_rng_state(),
        "history": [r.to_dict() for r in history],
        **(extra or {}),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> dict:
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("format_version") != CHECKPOINT_FORMAT:
        raise ConfigError(f"unsupported checkpoint format {payload.get('format_version')!r} in {path}")
    return payload


def load_generator(path) -> Generator:
    payload = load_checkpoint(path)
    model = Generator(GeneratorConfig(**payload["generator_config"]))
    model.load_state_dict(payload["generator"])
    model.eval()
    return model


def load_discriminator(path) -> Discriminator | None:
    payload = load_checkpoint(path)
    if payload["discriminator"] is None:
        return None
    model = Discriminator(DiscriminatorConfig(**payload["discriminator_config"]))
    model.load_state_dict(payload["discriminator"])
    return model


# ---------------------------------------------------------------- steps

def _clip(model: nn.Module, max_norm: float) -> None:
    if max_norm and max_norm > 0:
        nn.utils.clip_grad_norm_(model.parameters(), max_norm)


def discriminator_step(discriminator, optimizer, images, real_maps, fake_maps, grad_clip=5.0, eps=1e-6):
    optimizer.zero_grad(set_to_none=True)
    d_real = discriminator(images, real_maps)
    d_fake = discriminator(images, fake_maps.detach())
    loss = gan_discriminator_loss(d_real, d_fake, eps)
    loss.backward()
    _clip(discriminator, grad_clip)
    optimizer.step()
    return loss.detach(), d_real.detach().mean(), d_fake.detach().mean()


def generator_step(generator, optimizer, images, targets, loss_config: LossConfig,
                   discriminator=None, fake=None, grad_clip=5.0):
    """One generator update. Adversarial when a discriminator is given, else segmentation only."""
    optimizer.zero_grad(set_to_none=True)
    if fake is None:
        fake = generator(images)
    seg = seg_loss(fake, targets, loss_config)
    if discriminator is None:
        loss = seg
    else:
        loss = composite_generator_loss(discriminator(images, fake), fake, targets, loss_config)
    loss.backward()
    _clip(generator, grad_clip)
    optimizer.step()
    return loss.detach(), seg.detach()


# ---------------------------------------------------------------- loop

def split_validation(samples: Sequence[FundusSample], fraction: float, seed: int):
    """Carve a held-out slice from the training images; (train, val, val_source)."""
    n = len(samples)
    n_val = min(math.ceil(fraction * n), n - 1) if fraction > 0 else 0
    if n_val <= 0:
        return list(samples), list(samples), "train"
    order = np.random.default_rng([int(seed), 7]).permutation(n)
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx]
    return train, val, "held_out"


class _JsonLog:
    def __init__(self, path: Path | None):
        self.fh = open(path, "w") if path is not None else None

    def write(self, record: dict) -> None:
        if self.fh is not None:
            self.fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()


def _prepare(samples, size):
    return [s if s.image.shape[:2] == (size, size) else preprocess(s, size) for s in samples]


def train(data: DatasetSplit, config: TrainConfig, out_dir,
          generator_config: GeneratorConfig | None = None,
          discriminator_config: DiscriminatorConfig | None = None,
          generator: Generator | None = None,
          discriminator: Discriminator | None = None) -> list[RoundRecord]:
    """Train for ``config.rounds`` rounds, checkpointing and validating after each.

    Writes ``checkpoints/round_XX.pt``, ``train_log.jsonl``, ``history.json`` and
    ``best_round.json`` under ``out_dir``.
    """
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)

    gcfg = config.generator_config(generator_config or GeneratorConfig())
    if generator is None:
        generator = init_parameters(gcfg, seed=config.seed)
    size = generator.config.input_size
    if config.adversarial and discriminator is None:
        dcfg = replace(discriminator_config or DiscriminatorConfig(), input_size=size)
        discriminator = init_discriminator(dcfg, seed=config.seed + 1)
    if not config.adversarial:
        discriminator = None

    train_samples, val_samples, val_source = split_validation(
        _prepare(data.train, size), config.val_fraction, config.seed)
    dtype = next(generator.parameters()).dtype
    device = next(generator.parameters()).device

    opt_g = torch.optim.Adam(generator.parameters(), lr=config.lr)
    sched_g = torch.optim.lr_scheduler.ExponentialLR(opt_g, gamma=config.lr_decay)
    opt_d = sched_d = None
    if discriminator is not None:
        opt_d = torch.optim.Adam(discriminator.parameters(), lr=config.lr)
        sched_d = torch.optim.lr_scheduler.ExponentialLR(opt_d, gamma=config.lr_decay)

    logger = _JsonLog(out_dir / "train_log.jsonl")
    logger.write({"event": "start", "adversarial": config.adversarial, "val_source": val_source,
                  "n_train": len(train_samples), "n_val": len(val_samples)})
    records: list[RoundRecord] = []
    step = 0
    try:
        for round_index in range(1, config.rounds + 1):
            t0 = time.perf_counter()
            for local_epoch in range(config.epochs_per_round):
                epoch = (round_index - 1) * config.epochs_per_round + local_epoch
                lr = opt_g.param_groups[0]["lr"]
                generator.train()
                collapsed = discriminator is not None
                for batch in iter_batches(train_samples, config.batch_size, config.seed, epoch,
                                          augment_data=config.augment):
                    images, targets = to_tensors(batch, dtype=dtype, device=device)
                    entry = {"step": step, "epoch": epoch, "round": round_index, "lr": lr}
                    if discriminator is None:
                        loss_g, loss_seg = generator_step(generator, opt_g, images, targets, config.loss,
                                                          grad_clip=config.grad_clip)
                    else:
                        discriminator.train()
                        fake = generator(images)
                        loss_d, d_real, d_fake = discriminator_step(
                            discriminator, opt_d, images, targets, fake, config.grad_clip, config.loss.smooth_eps)
                        loss_g, loss_seg = generator_step(generator, opt_g, images, targets, config.loss,
                                                          discriminator, fake, config.grad_clip)
                        entry.update(loss_d=float(loss_d), d_real=float(d_real), d_fake=float(d_fake))
                        both_high = d_real > COLLAPSE_HIGH and d_fake > COLLAPSE_HIGH
                        both_low = d_real < COLLAPSE_LOW and d_fake < COLLAPSE_LOW
                        collapsed = collapsed and bool(both_high or both_low)
                    entry.update(loss_g=float(loss_g), loss_seg=float(loss_seg))
                    if not all(math.isfinite(v) for k, v in entry.items() if k.startswith(("loss", "d_"))):
                        raise NumericError(
                            f"non-finite loss at step {step} (epoch {epoch}); batch ids "
                            f"{[s.id for s in batch]}; components "
                            f"{ {k: v for k, v in entry.items() if k.startswith(('loss', 'd_'))} }"
                        )
                    logger.write(entry)
                    step += 1
                if discriminator is not None and collapsed:
                    log.warning("discriminator collapse during epoch %d", epoch)
                    logger.write({"event": "discriminator_collapse", "epoch": epoch})
                sched_g.step()
                if sched_d is not None:
                    sched_d.step()

            probs = predict_samples(model_predictor(generator), val_samples)
            _, val_report = evaluate_samples(probs, val_samples, threshold=config.threshold)
            ckpt = out_dir / "checkpoints" / f"round_{round_index:02d}.pt"
            record = RoundRecord(round_index, str(ckpt), float(val_report.f1), val_report,
                                 time.perf_counter() - t0)
            records.append(record)
            save_checkpoint(ckpt, generator, discriminator, config, records)
            logger.write({"event": "round", "round": round_index, "val_f1": record.val_f1})
    finally:
        logger.close()

    best = select_best_round(records)
    (out_dir / "history.json").write_text(json.dumps([r.to_dict() for r in records], indent=2))
    (out_dir / "best_round.json").write_text(json.dumps(
        {"round_index": best.round_index, "checkpoint_path": best.checkpoint_path, "val_f1": best.val_f1},
        indent=2))
    return records


def train_generator_only(data: DatasetSplit, config: TrainConfig, out_dir, **kwargs) -> list[RoundRecord]:
    if config.adversarial:
        raise ConfigError("train_generator_only requires adversarial=False")
    return train(data, config, out_dir, **kwargs)


def train_adversarial(data: DatasetSplit, config: TrainConfig, out_dir, **kwargs) -> list[RoundRecord]:
    if not config.adversarial:
        raise ConfigError("train_adversarial requires adversarial=True")
    return train(data, config, out_dir, **kwargs)


# ---------------------------------------------------------------- ablation

ABLATION_TABLES = {
    "2": ("without_multires_biconvlstm", "without_multires", "without_biconvlstm", "mrcnet"),
    "3": ("without_adversarial", "mrcnet"),
    "4": ("mrcnet_dice", "mrcnet_iou"),
}


def ablation_grid(base: TrainConfig, tables: Sequence[str] = ("2", "3", "4")) -> dict[str, TrainConfig]:
    variants = {
        "without_multires_biconvlstm": replace(base, use_multires=False, use_biconvlstm=False),
        "without_multires": replace(base, use_multires=False, use_biconvlstm=True),
        "without_biconvlstm": replace(base, use_multires=True, use_biconvlstm=False),
        "mrcnet": replace(base, use_multires=True, use_biconvlstm=True),
        "without_adversarial": replace(base, use_multires=True, use_biconvlstm=True, adversarial=False),
        "mrcnet_dice": replace(base, loss=replace(base.loss, seg_variant="dice_only")),
        "mrcnet_iou": replace(base, loss=replace(base.loss, seg_variant="iou_only")),
    }
    grid = {}
    for t in tables:
        if t not in ABLATION_TABLES:
            raise ConfigError(f"unknown ablation table {t!r}")
        for name in ABLATION_TABLES[t]:
            grid[name] = variants[name]
    return grid


def run_ablation(data: DatasetSplit, base: TrainConfig, out_dir,
                 generator_config: GeneratorConfig | None = None,
                 discriminator_config: DiscriminatorConfig | None = None,
                 tables: Sequence[str] = ("2", "3", "4"),
                 threshold: float = 0.5, use_fov: bool = False,
                 aggregation: str = "per_image_mean") -> dict[str, MetricsReport]:
    """Train every variant under one seed and score its best round on the test split."""
    out_dir = Path(out_dir)
    gcfg = generator_config or GeneratorConfig()
    test = _prepare(data.test, gcfg.input_size)
    results = {}
    for name, cfg in ablation_grid(base, tables).items():
        run_dir = out_dir / name
        records = train(data, cfg, run_dir, gcfg, discriminator_config)
        model = load_generator(select_best_round(records).checkpoint_path)
        rows, agg = evaluate_samples(predict_samples(model_predictor(model), test), test,
                                     threshold, use_fov, aggregation)
        with open(run_dir / "metrics.csv", "w") as fh:
            write_metrics_csv([*rows, ("aggregate", agg)], fh)
        results[name] = agg
    return results
