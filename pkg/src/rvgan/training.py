"""Alternating adversarial training: discriminators, then G_coarse, then G_fine.

Scale pairing: ``D_c`` judges ``G_c`` against the 2x-downsampled ground truth,
``D_f`` judges ``G_f``; per-scale losses are summed.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .container import ContainerError, read_container, write_container
from .data import FoldSplit, PatchSet, patches_to_tensors
from .discriminators import AutoencoderDiscriminator, DiscriminatorSpec, build_discriminator
from .generators import (
    CoarseGenerator,
    FineGenerator,
    GeneratorSpec,
    SpecError,
    build_coarse_generator,
    build_fine_generator,
    check_generator_pair,
    downsample2x,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    generator_objective,
    hinge_d,
    hinge_g,
    reconstruction,
    weighted_feature_matching,
)

log = logging.getLogger(__name__)

NETWORKS = ("g_coarse", "g_fine", "d_coarse", "d_fine")
CHECKPOINT_VERSION = 1
LOG_FIELDS = ("step", "adv_d", "adv_g", "rec", "wfm", "total_g", "total_d")
# full-size runs take 24-48 h on a single datacenter GPU; never run in CI
FULL_RUN_WALL_TIME_HOURS = (24, 48)


class NonFiniteLossError(RuntimeError):
    def __init__(self, message: str, breakdown: dict | None = None, snapshot: Path | None = None):
        super().__init__(message)
        self.breakdown = breakdown
        self.snapshot = snapshot


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class ModelSpecs:
    g_coarse: GeneratorSpec
    g_fine: GeneratorSpec
    d_coarse: DiscriminatorSpec
    d_fine: DiscriminatorSpec

    def __post_init__(self):
        check_generator_pair(self.g_coarse, self.g_fine)
        if self.d_fine.input_size != self.g_fine.input_size or self.d_coarse.input_size != self.g_coarse.input_size:
            raise SpecError("discriminator input sizes must match their generator's scale")
        for d in (self.d_fine, self.d_coarse):
            if d.in_channels != self.g_fine.in_channels + self.g_fine.out_channels:
                raise SpecError("discriminator in_channels must equal image + segmentation channels")

    @classmethod
    def default(cls, patch_size: int = 128, base_channels: int = 64, disc_base_channels: int | None = None,
                norm: bool = True) -> "ModelSpecs":
        db = base_channels if disc_base_channels is None else disc_base_channels
        return cls(
            g_coarse=GeneratorSpec(patch_size // 2, base_channels, norm=norm),
            g_fine=GeneratorSpec(patch_size, base_channels, norm=norm),
            d_coarse=DiscriminatorSpec(patch_size // 2, db, norm=norm),
            d_fine=DiscriminatorSpec(patch_size, db, norm=norm),
        )

    def to_dict(self) -> dict:
        return {k: getattr(self, k).to_dict() for k in NETWORKS}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpecs":
        return cls(GeneratorSpec.from_dict(d["g_coarse"]), GeneratorSpec.from_dict(d["g_fine"]),
                   DiscriminatorSpec.from_dict(d["d_coarse"]), DiscriminatorSpec.from_dict(d["d_fine"]))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 24
    epochs: int = 100
    n_critic: int = 2
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 1000
    desk_scale: bool = False
    deterministic: bool = True
    max_steps: int | None = None

    def __post_init__(self):
        if self.lr <= 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("invalid optimizer constants")
        if min(self.batch_size, self.epochs, self.n_critic, self.checkpoint_every) < 1:
            raise ValueError("batch_size, epochs, n_critic and checkpoint_every must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


DESK_BASE_CHANNELS = 16
DESK_EPOCHS = 1


def desk_scale(config: TrainConfig, specs: ModelSpecs) -> tuple[TrainConfig, ModelSpecs]:
    """Shrink widths to 16 channels and training to a single epoch."""
    def shrink(s):
        return replace(s, base_channels=DESK_BASE_CHANNELS)

    specs = ModelSpecs(shrink(specs.g_coarse), shrink(specs.g_fine), shrink(specs.d_coarse), shrink(specs.d_fine))
    return replace(config, epochs=DESK_EPOCHS, desk_scale=True), specs


def set_determinism(enabled: bool = True):
    enabled = enabled or os.environ.get("RVGAN_DETERMINISTIC", "") == "1"
    torch.use_deterministic_algorithms(enabled, warn_only=True)


@dataclass
class TrainState:
    specs: ModelSpecs
    nets: dict[str, nn.Module]
    opts: dict[str, torch.optim.Optimizer]
    step: int = 0
    epoch: int = 0
    step_in_epoch: int = 0
    d_updates: int = 0
    g_updates: int = 0

    @property
    def g_coarse(self) -> CoarseGenerator:
        return self.nets["g_coarse"]

    @property
    def g_fine(self) -> FineGenerator:
        return self.nets["g_fine"]

    @property
    def d_coarse(self) -> AutoencoderDiscriminator:
        return self.nets["d_coarse"]

    @property
    def d_fine(self) -> AutoencoderDiscriminator:
        return self.nets["d_fine"]


def build_networks(specs: ModelSpecs, seed: int = 0) -> dict[str, nn.Module]:
    torch.manual_seed(seed)
    return {
        "g_coarse": build_coarse_generator(specs.g_coarse),
        "g_fine": build_fine_generator(specs.g_fine),
        "d_coarse": build_discriminator(specs.d_coarse),
        "d_fine": build_discriminator(specs.d_fine),
    }


def init_state(config: TrainConfig, specs: ModelSpecs) -> TrainState:
    set_determinism(config.deterministic)
    nets = build_networks(specs, config.seed)
    opts = {name: torch.optim.Adam(net.parameters(), lr=config.lr, betas=(config.beta1, config.beta2))
            for name, net in nets.items()}
    for net in nets.values():
        net.train()
    return TrainState(specs, nets, opts)


def coarse_target(y: torch.Tensor) -> torch.Tensor:
    """2x area-downsampled ground truth, re-thresholded at 0 back to {-1, 1}."""
    yc = downsample2x(y)
    return torch.where(yc > 0, torch.ones_like(yc), -torch.ones_like(yc))


def _set_requires_grad(nets, flag: bool):
    for net in nets:
        for p in net.parameters():
            p.requires_grad_(flag)


def scale_generator_terms(d: AutoencoderDiscriminator, x, y, fake, w: LossWeights) -> dict[str, torch.Tensor]:
    """Generator-side terms for one scale: hinge, reconstruction and weighted feature matching."""
    logits_fake, taps_fake = d(x, fake)
    with torch.no_grad():
        _, taps_real = d(x, y)
    adv_g = hinge_g(logits_fake)
    rec = reconstruction(fake, y)
    wfm = weighted_feature_matching(taps_real, taps_fake, w)
    return {"adv_g": adv_g, "rec": rec, "wfm": wfm, "objective": generator_objective(adv_g, rec, wfm, w)}


def discriminator_stage(state: TrainState, x, y, xc, yc, config: TrainConfig) -> float:
    """``n_critic`` updates of both discriminators on real pairs then generated pairs."""
    g_c, g_f, d_c, d_f = state.g_coarse, state.g_fine, state.d_coarse, state.d_fine
    with torch.no_grad():
        out_c = g_c(xc)
        fake_c = out_c.seg_map
        fake_f = g_f(x, out_c.handoff_features).seg_map
    _set_requires_grad((d_c, d_f), True)
    loss_val = math.nan
    for _ in range(config.n_critic):
        state.opts["d_fine"].zero_grad(set_to_none=True)
        state.opts["d_coarse"].zero_grad(set_to_none=True)
        loss = (hinge_d(d_f(x, y).logits, d_f(x, fake_f).logits)
                + hinge_d(d_c(xc, yc).logits, d_c(xc, fake_c).logits))
        if not torch.isfinite(loss):
            return loss.item()
        loss.backward()
        state.opts["d_fine"].step()
        state.opts["d_coarse"].step()
        state.d_updates += 1
        loss_val = loss.item()
    return loss_val


def coarse_generator_stage(state: TrainState, xc, yc, config: TrainConfig) -> dict[str, float]:
    g_c, d_c = state.g_coarse, state.d_coarse
    _set_requires_grad((state.d_coarse, state.d_fine), False)
    try:
        state.opts["g_coarse"].zero_grad(set_to_none=True)
        terms = scale_generator_terms(d_c, xc, yc, g_c(xc).seg_map, config.weights)
        if torch.isfinite(terms["objective"]):
            terms["objective"].backward()
            state.opts["g_coarse"].step()
            state.g_updates += 1
    finally:
        _set_requires_grad((state.d_coarse, state.d_fine), True)
    return {k: v.item() for k, v in terms.items()}


def fine_generator_stage(state: TrainState, x, y, xc, config: TrainConfig) -> dict[str, float]:
    g_c, g_f, d_f = state.g_coarse, state.g_fine, state.d_fine
    _set_requires_grad((state.d_coarse, state.d_fine), False)
    try:
        with torch.no_grad():
            handoff = g_c(xc).handoff_features
        state.opts["g_fine"].zero_grad(set_to_none=True)
        terms = scale_generator_terms(d_f, x, y, g_f(x, handoff).seg_map, config.weights)
        if torch.isfinite(terms["objective"]):
            terms["objective"].backward()
            state.opts["g_fine"].step()
            state.g_updates += 1
    finally:
        _set_requires_grad((state.d_coarse, state.d_fine), True)
    return {k: v.item() for k, v in terms.items()}


def train_step(state: TrainState, batch, config: TrainConfig,
               snapshot_dir: str | Path | None = None) -> tuple[TrainState, LossBreakdown]:
    """One D -> G_c -> G_f cycle on a fine-scale ``(x, y)`` batch.

    The returned losses are the values computed inside each stage (the last
    critic iteration for the discriminators).
    """
    x, y = batch
    xc, yc = downsample2x(x), coarse_target(y)
    adv_d = discriminator_stage(state, x, y, xc, yc, config)
    gc = coarse_generator_stage(state, xc, yc, config)
    gf = fine_generator_stage(state, x, y, xc, config)
    parts = {k: gc[k] + gf[k] for k in ("adv_g", "rec", "wfm")}
    breakdown = LossBreakdown(adv_d=adv_d, total_d=adv_d, total_g=gc["objective"] + gf["objective"], **parts)
    state.step += 1
    if not all(math.isfinite(v) for v in asdict(breakdown).values()):
        snapshot = None
        if snapshot_dir is not None:
            snapshot = checkpoint_save(state, Path(snapshot_dir) / f"nonfinite_step{state.step:07d}.rvgc", config)
        raise NonFiniteLossError(f"non-finite loss at step {state.step}: {asdict(breakdown)}",
                                 asdict(breakdown), snapshot)
    return state, breakdown


def full_objective(nets: dict[str, nn.Module], x, y, w: LossWeights) -> tuple[torch.Tensor, dict]:
    """Composite objective over both scales with nothing detached.

    Returns ``total_d + total_g`` as one differentiable scalar; used for
    gradient-reach checks rather than for training.
    """
    xc, yc = downsample2x(x), coarse_target(y)
    out_c = nets["g_coarse"](xc)
    fake_f = nets["g_fine"](x, out_c.handoff_features).seg_map
    parts = {}
    total = x.new_zeros(())
    for scale, d, xs, ys, fake in (("coarse", nets["d_coarse"], xc, yc, out_c.seg_map),
                                   ("fine", nets["d_fine"], x, y, fake_f)):
        real_logits, taps_real = d(xs, ys)
        fake_logits, taps_fake = d(xs, fake)
        adv_d = hinge_d(real_logits, fake_logits)
        adv_g = hinge_g(fake_logits)
        rec = reconstruction(fake, ys)
        wfm = weighted_feature_matching(taps_real, taps_fake, w)
        parts[scale] = {"adv_d": adv_d, "adv_g": adv_g, "rec": rec, "wfm": wfm}
        total = total + adv_d + generator_objective(adv_g, rec, wfm, w)
    return total, parts


# checkpoint serialization ---------------------------------------------------

def _state_arrays(state: TrainState) -> tuple[dict[str, np.ndarray], dict]:
    arrays = {}
    opt_meta = {}
    for name in NETWORKS:
        for key, t in state.nets[name].state_dict().items():
            arrays[f"net/{name}/{key}"] = t.detach().cpu().numpy()
        sd = state.opts[name].state_dict()
        for idx, slots in sd["state"].items():
            for slot, t in slots.items():
                arrays[f"opt/{name}/{idx}/{slot}"] = torch.as_tensor(t).detach().cpu().numpy()
        opt_meta[name] = sd["param_groups"]
    arrays["rng/torch"] = torch.get_rng_state().numpy()
    return arrays, opt_meta


def checkpoint_save(state: TrainState, path: str | Path, config: TrainConfig | None = None) -> Path:
    arrays, opt_meta = _state_arrays(state)
    meta = {
        "kind": "train_state",
        "checkpoint_version": CHECKPOINT_VERSION,
        "specs": state.specs.to_dict(),
        "counters": {"step": state.step, "epoch": state.epoch, "step_in_epoch": state.step_in_epoch,
                     "d_updates": state.d_updates, "g_updates": state.g_updates},
        "optimizers": opt_meta,
        "config": config.to_dict() if config is not None else None,
    }
    return write_container(path, arrays, meta)


def checkpoint_load(path: str | Path, config: TrainConfig | None = None,
                    specs: ModelSpecs | None = None) -> TrainState:
    """Restore a :class:`TrainState`; ``specs`` (if given) must match the stored ones."""
    try:
        arrays, meta = read_container(path)
    except ContainerError as exc:
        raise CheckpointError(str(exc)) from exc
    if meta.get("kind") != "train_state":
        raise CheckpointError(f"{path} is not a training checkpoint")
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('checkpoint_version')} != {CHECKPOINT_VERSION}")
    stored = ModelSpecs.from_dict(meta["specs"])
    if specs is not None and specs != stored:
        raise CheckpointError(f"checkpoint specs differ from the requested specs:\n"
                              f"  stored:    {stored.to_dict()}\n  requested: {specs.to_dict()}")
    if config is None:
        config = TrainConfig.from_dict(meta["config"]) if meta.get("config") else TrainConfig()
    state = init_state(config, stored)
    for name in NETWORKS:
        prefix = f"net/{name}/"
        sd = {k[len(prefix):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix)}
        expected = state.nets[name].state_dict()
        if set(sd) != set(expected) or any(sd[k].shape != expected[k].shape for k in expected):
            raise CheckpointError(f"parameter layout of {name} does not match its spec")
        state.nets[name].load_state_dict(sd)
        prefix = f"opt/{name}/"
        opt_state: dict[int, dict] = {}
        for k, v in arrays.items():
            if k.startswith(prefix):
                idx, slot = k[len(prefix):].split("/")
                opt_state.setdefault(int(idx), {})[slot] = torch.from_numpy(v)
        groups = [dict(g, betas=tuple(g["betas"])) for g in meta["optimizers"][name]]
        state.opts[name].load_state_dict({"state": opt_state, "param_groups": groups})
    torch.set_rng_state(torch.from_numpy(arrays["rng/torch"]))
    c = meta["counters"]
    state.step, state.epoch, state.step_in_epoch = c["step"], c["epoch"], c["step_in_epoch"]
    state.d_updates, state.g_updates = c["d_updates"], c["g_updates"]
    return state


# training loop --------------------------------------------------------------

def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Sample order for one epoch; depends only on (seed, epoch) so resumes replay it."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def latest_checkpoint(directory: str | Path) -> Path | None:
    ckpts = sorted(Path(directory).glob("step*.rvgc"))
    return ckpts[-1] if ckpts else None


@dataclass
class TrainResult:
    state: TrainState
    log_path: Path
    epoch_log_path: Path
    checkpoints: list[Path]


def train(config: TrainConfig, specs: ModelSpecs, patches: PatchSet, fold: FoldSplit | None,
          work_dir: str | Path, resume_from: str | Path | None = None,
          on_step: Callable[[int, LossBreakdown], None] | None = None) -> TrainResult:
    """Train on the fold's training images (all patches when ``fold`` is None)."""
    work_dir = Path(work_dir)
    ckpt_dir = work_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    if fold is not None:
        unknown = set(fold.train_ids) - set(patches.image_ids)
        if unknown:
            raise ValueError(f"fold {fold.fold_index} references images absent from the dataset: {sorted(unknown)}")
        patches = patches.subset(fold.train_ids)
    if len(patches) == 0:
        raise ValueError("no training patches")
    x_all, y_all = patches_to_tensors(patches)
    if x_all.shape[-1] != specs.g_fine.input_size:
        raise SpecError(f"patch size {x_all.shape[-1]} != fine generator input size {specs.g_fine.input_size}")

    state = checkpoint_load(resume_from, config, specs) if resume_from else init_state(config, specs)
    n = len(patches)
    per_epoch = steps_per_epoch(n, config.batch_size)
    log_path = work_dir / "losses.csv"
    epoch_log_path = work_dir / "epochs.jsonl"
    if not resume_from:
        for p in (log_path, epoch_log_path):
            p.unlink(missing_ok=True)
    new_log = not log_path.exists()
    checkpoints = []
    with open(log_path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if new_log:
            writer.writeheader()
        done = False
        while state.epoch < config.epochs and not done:
            order = epoch_order(n, config.seed, state.epoch)
            for b in range(state.step_in_epoch, per_epoch):
                idx = torch.from_numpy(order[b * config.batch_size:(b + 1) * config.batch_size])
                state, bd = train_step(state, (x_all[idx], y_all[idx]), config, snapshot_dir=ckpt_dir)
                state.step_in_epoch = b + 1
                writer.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v)
                                 for k, v in bd.as_row(state.step).items()})
                if on_step is not None:
                    on_step(state.step, bd)
                if state.step % config.checkpoint_every == 0:
                    fh.flush()
                    checkpoints.append(checkpoint_save(state, ckpt_dir / f"step{state.step:07d}.rvgc", config))
                if config.max_steps is not None and state.step >= config.max_steps:
                    done = True
                    break
            if not done:
                _write_epoch_summary(log_path, epoch_log_path, state, fh)
                state.epoch += 1
                state.step_in_epoch = 0
    final = ckpt_dir / f"step{state.step:07d}.rvgc"
    if not checkpoints or checkpoints[-1] != final:
        checkpoints.append(checkpoint_save(state, final, config))
    return TrainResult(state, log_path, epoch_log_path, checkpoints)


def _write_epoch_summary(log_path: Path, epoch_log_path: Path, state: TrainState, fh):
    fh.flush()
    with open(log_path, newline="") as rf:
        rows = list(csv.DictReader(rf))
    first_step = state.step - state.step_in_epoch
    rows = [r for r in rows if int(r["step"]) > first_step]
    summary = {"epoch": state.epoch, "steps": len(rows), "last_step": state.step}
    for k in LOG_FIELDS[1:]:
        summary[k] = float(np.mean([float(r[k]) for r in rows])) if rows else math.nan
    with open(epoch_log_path, "a") as ef:
        ef.write(json.dumps(summary) + "\n")
