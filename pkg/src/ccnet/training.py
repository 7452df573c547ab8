"""Complementary consistency training: sharpening, losses, ramp-up and the loop."""
from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np
import torch

from .netcore import CCNet, ConfigurationError, unique_parameters

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


@dataclass
class TrainConfig:
    max_iteration: int = 10000
    lr: float = 0.01
    lr_decay: Literal["poly", "none"] = "poly"
    lr_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    labeled_per_batch: int = 2
    unlabeled_per_batch: int = 2
    lambda_s: float = 0.3
    lambda_u_max: float = 1.0
    rampup_iterations: int | None = None
    temperature: float = 0.1
    seed: int = 1337
    detach_pseudo_labels: bool = False
    batch_reduction: Literal["mean", "sum"] = "mean"
    dice_eps: float = 1e-5
    mode: Literal["ccnet", "supervised"] = "ccnet"
    # model
    base_channels: int = 16
    shared_encoder: bool = False
    init_aux_from_main: bool = False
    norm: str = "batchnorm"
    encoder_convs: tuple[int, ...] = (1, 2, 3, 3, 3)
    decoder_convs: tuple[int, ...] = (3, 3, 2, 1)
    # data
    patch_size: tuple[int, int, int] = (112, 112, 80)
    augment: bool = True
    checkpoint_every: int = 1000

    def __post_init__(self):
        self.patch_size = tuple(int(s) for s in self.patch_size)
        self.encoder_convs = tuple(int(s) for s in self.encoder_convs)
        self.decoder_convs = tuple(int(s) for s in self.decoder_convs)
        self.validate()

    def validate(self) -> None:
        if not 0 < self.temperature <= 1:
            raise ConfigurationError(f"temperature must lie in (0, 1], got {self.temperature}")
        if self.lambda_s <= 0:
            raise ConfigurationError("lambda_s must be positive")
        if self.lambda_u_max < 0:
            raise ConfigurationError("lambda_u_max must be nonnegative")
        if self.labeled_per_batch < 1 or self.unlabeled_per_batch < 0:
            raise ConfigurationError("need labeled_per_batch >= 1 and unlabeled_per_batch >= 0")
        if self.max_iteration < 0:
            raise ConfigurationError("max_iteration must be nonnegative")
        if self.batch_reduction not in ("mean", "sum"):
            raise ConfigurationError(f"unknown batch_reduction {self.batch_reduction!r}")
        if self.mode not in ("ccnet", "supervised"):
            raise ConfigurationError(f"unknown training mode {self.mode!r}")
        if self.lr_decay not in ("poly", "none"):
            raise ConfigurationError(f"unknown lr_decay {self.lr_decay!r}")
        if len(self.patch_size) != 3 or any(s % 16 or s <= 0 for s in self.patch_size):
            raise ConfigurationError(f"patch_size {self.patch_size} must be 3 multiples of 16")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("patch_size", "encoder_convs", "decoder_convs"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


# --- pseudo labels and losses -------------------------------------------------

def sharpen(p: torch.Tensor, temperature: float = 0.1) -> torch.Tensor:
    """Temperature sharpening of a two-class probability map.

    ``p`` is either a (B, 2, ...) softmax map or a bare foreground probability
    tensor. The foreground channel becomes ``p^(1/T) / (p^(1/T) + (1-p)^(1/T))``
    and the background its complement.
    """
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    two_class = p.dim() >= 2 and p.shape[1] == 2 and p.dim() == 5
    fg = p[:, 1] if two_class else p
    bg = 1 - fg
    # divide by max(fg, bg) >= 0.5 so the powers cannot both underflow
    m = torch.maximum(fg, bg)
    a = (fg / m) ** (1.0 / temperature)
    b = (bg / m) ** (1.0 / temperature)
    s = a / (a + b)
    if two_class:
        return torch.stack([1 - s, s], dim=1)
    return s


def dice_loss(p: torch.Tensor, y: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Soft Dice loss ``1 - 2 sum(p*y) / (sum(p) + sum(y) + eps)`` over all given voxels."""
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(y.shape)}")
    y = y.to(p.dtype)
    return 1 - 2 * (p * y).sum() / (p.sum() + y.sum() + eps)


def _foreground(p: torch.Tensor) -> torch.Tensor:
    return p[:, 1] if p.dim() == 5 else p


def _reduce(values: list[torch.Tensor], reduction: str) -> torch.Tensor:
    total = torch.stack(values).sum()
    return total / len(values) if reduction == "mean" else total


def supervised_loss(pM: torch.Tensor, pA1: torch.Tensor | None, pA2: torch.Tensor | None,
                    y: torch.Tensor | None, reduction: str = "mean",
                    eps: float = 1e-5) -> torch.Tensor:
    """Per-case Dice of the three models against the ground truth, reduced over the batch.

    ``pA1``/``pA2`` may be None to get the main-model-only supervised loss.
    """
    if y is None:
        raise ValueError("supervised_loss needs ground-truth labels (labeled sub-batch only)")
    maps = [m for m in (pM, pA1, pA2) if m is not None]
    per_case = []
    for i in range(y.shape[0]):
        per_case.append(sum(dice_loss(_foreground(m)[i], y[i], eps) for m in maps))
    return _reduce(per_case, reduction)


def mse(target: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    if target.shape != p.shape:
        raise ValueError(f"shape mismatch: {tuple(target.shape)} vs {tuple(p.shape)}")
    return ((target - p) ** 2).mean()


def unsupervised_loss(pM, pA1, pA2, yM, yA1, yA2, reduction: str = "mean") -> torch.Tensor:
    """The four cross pseudo-label MSE terms.

    Main pseudo-labels supervise both auxiliaries, and each auxiliary's
    pseudo-labels supervise the other auxiliary. The voxelwise mean is taken
    per case; cases are then averaged or summed.
    """
    per_case = []
    for i in range(pM.shape[0]):
        per_case.append(mse(yM[i], pA1[i]) + mse(yM[i], pA2[i])
                        + mse(yA2[i], pA1[i]) + mse(yA1[i], pA2[i]))
    return _reduce(per_case, reduction)


def rampup_weight(iteration: int, config: TrainConfig) -> float:
    """Gaussian warm-up ``lambda_u_max * exp(-5 (1 - t)^2)`` with ``t`` clipped to [0, 1]."""
    horizon = config.rampup_iterations or config.max_iteration
    if horizon <= 0:
        return float(config.lambda_u_max)
    t = min(max(iteration / horizon, 0.0), 1.0)
    return float(config.lambda_u_max * math.exp(-5.0 * (1.0 - t) ** 2))


def total_loss(sup, unsup, iteration: int, config: TrainConfig):
    return config.lambda_s * sup + rampup_weight(iteration, config) * unsup


def learning_rate(iteration: int, config: TrainConfig) -> float:
    if config.lr_decay == "none" or config.max_iteration == 0:
        return config.lr
    frac = min(iteration / config.max_iteration, 1.0)
    return config.lr * (1.0 - frac) ** config.lr_power


# --- state and loop -----------------------------------------------------------

@dataclass
class TrainState:
    config: TrainConfig
    net: CCNet
    optimizer: torch.optim.Optimizer
    iteration: int = 0
    history: list[dict] = field(default_factory=list)

    @property
    def theta(self):
        return self.net.main

    @property
    def theta1(self):
        return self.net.aux1

    @property
    def theta2(self):
        return self.net.aux2


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def build_net(config: TrainConfig) -> CCNet:
    return CCNet(base_channels=config.base_channels, shared_encoder=config.shared_encoder,
                 norm=config.norm, init_aux_from_main=config.init_aux_from_main,
                 encoder_convs=config.encoder_convs, decoder_convs=config.decoder_convs)


def trainable_modules(net: CCNet, config: TrainConfig):
    return [net.main] if config.mode == "supervised" else [net.main, net.aux1, net.aux2]


def init_state(config: TrainConfig, net: CCNet | None = None,
               device: str | torch.device = "cpu") -> TrainState:
    seed_everything(config.seed)
    net = (net if net is not None else build_net(config)).to(device)
    params = unique_parameters(trainable_modules(net, config))
    optimizer = torch.optim.SGD(params, lr=config.lr, momentum=config.momentum,
                                weight_decay=config.weight_decay)
    return TrainState(config=config, net=net, optimizer=optimizer)


def compute_losses(net: CCNet, x: torch.Tensor, y: torch.Tensor, n_labeled: int,
                   iteration: int, config: TrainConfig) -> dict[str, torch.Tensor]:
    """Forward all models on ``x`` (labeled cases first) and assemble the loss terms."""
    if n_labeled < 1:
        raise ValueError("each step needs at least one labeled case")
    red, eps = config.batch_reduction, config.dice_eps
    if config.mode == "supervised":
        pM = net.main(x[:n_labeled])
        sup = supervised_loss(pM, None, None, y[:n_labeled], red, eps)
        unsup = torch.zeros((), dtype=sup.dtype, device=sup.device)
        lam = 0.0
        return {"L_sup": sup, "L_unsup": unsup, "lambda_u": lam,
                "L_total": config.lambda_s * sup}
    pM, pA1, pA2 = net(x)
    sup = supervised_loss(pM[:n_labeled], pA1[:n_labeled], pA2[:n_labeled], y[:n_labeled], red, eps)
    yM, yA1, yA2 = (sharpen(p, config.temperature) for p in (pM, pA1, pA2))
    if config.detach_pseudo_labels:
        yM, yA1, yA2 = yM.detach(), yA1.detach(), yA2.detach()
    unsup = unsupervised_loss(pM, pA1, pA2, yM, yA1, yA2, red)
    lam = rampup_weight(iteration, config)
    return {"L_sup": sup, "L_unsup": unsup, "lambda_u": lam,
            "L_total": config.lambda_s * sup + lam * unsup}


def train_step(state: TrainState, labeled_batch: tuple[torch.Tensor, torch.Tensor],
               unlabeled_batch: torch.Tensor | None = None) -> TrainState:
    """One optimizer update of all trainable parameter sets."""
    config = state.config
    xl, yl = labeled_batch
    x = xl if unlabeled_batch is None or len(unlabeled_batch) == 0 else torch.cat([xl, unlabeled_batch])
    lr = learning_rate(state.iteration, config)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.net.train()
    losses = compute_losses(state.net, x, yl, len(xl), state.iteration, config)
    record = {"iteration": state.iteration,
              "L_sup": float(losses["L_sup"].detach()),
              "L_unsup": float(losses["L_unsup"].detach()),
              "lambda_u": float(losses["lambda_u"]),
              "L_total": float(losses["L_total"].detach()),
              "lr": lr}
    if not all(math.isfinite(record[k]) for k in ("L_sup", "L_unsup", "L_total")):
        raise TrainingDiverged(f"non-finite loss at iteration {state.iteration}", record)
    state.optimizer.zero_grad(set_to_none=True)
    losses["L_total"].backward()
    state.optimizer.step()
    state.iteration += 1
    state.history.append(record)
    return state


class PatchSampler:
    """Draws augmented labeled/unlabeled patch batches from preprocessed cases."""

    def __init__(self, labeled, unlabeled, config: TrainConfig, seed: int | None = None):
        from . import datapipe

        if not labeled:
            raise ConfigurationError("training needs at least one labeled case")
        self._dp = datapipe
        self.patch = datapipe.PatchSpec(config.patch_size)
        self.labeled = [datapipe.pad_to_patch(c, self.patch) for c in labeled]
        self.unlabeled = [datapipe.pad_to_patch(c, self.patch) for c in unlabeled]
        self.config = config
        self.rng = np.random.default_rng(config.seed if seed is None else seed)

    def _draw(self, cases, n, with_label):
        xs, ys = [], []
        for _ in range(n):
            case = cases[self.rng.integers(len(cases))]
            x, y = self._dp.sample_patch(case, self.patch, self.rng)
            if self.config.augment:
                x, y = self._dp.augment(x, y, self.rng)
            xs.append(x)
            if with_label:
                ys.append(y)
        xs = torch.from_numpy(np.stack(xs)[:, None].astype(np.float32))
        return xs, (torch.from_numpy(np.stack(ys).astype(np.float32)) if with_label else None)

    def next(self):
        xl, yl = self._draw(self.labeled, self.config.labeled_per_batch, True)
        n_u = self.config.unlabeled_per_batch if self.config.mode == "ccnet" else 0
        xu = None
        if n_u:
            # without unlabeled cases the consistency term runs on the labeled batch alone
            xu = self._draw(self.unlabeled, n_u, False)[0] if self.unlabeled else None
        return (xl, yl), xu


def train(config: TrainConfig, labeled, unlabeled=(), out_dir: str | Path | None = None,
          device: str | torch.device = "cpu", net: CCNet | None = None,
          callback: Callable[[TrainState], None] | None = None,
          metadata: dict | None = None) -> TrainState:
    """Run ``config.max_iteration`` steps; writes a JSON-lines log and checkpoints when
    ``out_dir`` is given."""
    from .checkpoint import save_checkpoint

    if not labeled:
        raise ConfigurationError("dataset has no labeled case")
    state = init_state(config, net=net, device=device)
    sampler = PatchSampler(list(labeled), list(unlabeled), config)
    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "train_log.jsonl", "w")
    try:
        while state.iteration < config.max_iteration:
            (xl, yl), xu = sampler.next()
            xl, yl = xl.to(device), yl.to(device)
            xu = xu.to(device) if xu is not None else None
            train_step(state, (xl, yl), xu)
            rec = state.history[-1]
            if log_file is not None:
                log_file.write(json.dumps(rec) + "\n")
                log_file.flush()
                every = config.checkpoint_every
                if every and state.iteration % every == 0 and state.iteration < config.max_iteration:
                    save_checkpoint(out_dir / "checkpoints" / f"iter_{state.iteration:06d}.pt",
                                    state.net, config, state.iteration, metadata)
            if state.iteration % 100 == 0 or state.iteration == 1:
                logger.info("iter %d  L_sup %.4f  L_unsup %.4f  lambda_u %.4f  L_total %.4f",
                            rec["iteration"], rec["L_sup"], rec["L_unsup"], rec["lambda_u"],
                            rec["L_total"])
            if callback is not None:
                callback(state)
    finally:
        if log_file is not None:
            log_file.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoints" / "final.pt", state.net, config,
                        state.iteration, metadata)
    return state
