"""Training loop, optimisers, evaluation and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Parameter, Tape
from .checkpoint import CheckpointError, read_container, write_container
from .config import Config, parse_config
from .data import Dataset, Molecule
from .position import (
    EmppModel,
    MaskedMolecule,
    MaskingError,
    ModelConfig,
    empp_losses,
    mask_molecule,
    predict,
    predicted_position,
    sample_mask_indices,
)
from .sphere import SphereGrid, make_grid

log = logging.getLogger(__name__)

MODES = ("self_supervised", "auxiliary")


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))


class SGD:
    """Gradient descent with heavy-ball momentum."""

    def __init__(self, params: Sequence[Parameter], momentum: float = 0.9):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            p.value -= lr * v


class Adam:
    def __init__(self, params: Sequence[Parameter], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad**2
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_gradients(params: Sequence[Parameter], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(p.grad**2)) for p in params))
    if max_norm > 0 and norm > max_norm:
        for p in params:
            p.grad *= max_norm / norm
    return norm


# --------------------------------------------------------------------------
# model construction and checkpoints
# --------------------------------------------------------------------------


def model_config(cfg: Config, train: Sequence[Molecule] = ()) -> ModelConfig:
    mc = ModelConfig(
        layers=cfg["backbone.layers"],
        hidden=cfg["backbone.hidden"],
        cutoff=cfg["cutoff"],
        head_lmax=cfg["head.lmax"],
        n_bins=cfg["radius.bins"],
        r_min=cfg["radius.min"],
        r_max=cfg["radius.max"],
        encode_property=cfg["property.encoding"],
    )
    energies = np.array([m.energy for m in train if m.energy is not None])
    if len(energies):
        mc.label_min = float(energies.min())
        mc.label_max = float(max(energies.max(), energies.min() + 1e-6))
        mc.energy_mean = float(energies.mean())
        mc.energy_std = float(max(energies.std(), 1e-6))
    return mc


def grid_from_config(cfg: Config) -> SphereGrid:
    return make_grid(cfg["grid.n_theta"], cfg["grid.n_phi"], cfg["grid.kind"], lmax=max(cfg["head.lmax"], cfg["label.lmax"]))


def save_checkpoint(path, model: EmppModel, cfg: Config) -> None:
    text = {"config": cfg.to_text(), "model": json.dumps(model.cfg.to_dict(), sort_keys=True)}
    write_container(path, model.state_dict(), text)


def load_checkpoint(path) -> tuple[EmppModel, Config]:
    arrays, text = read_container(path)
    if "config" not in text or "model" not in text:
        raise CheckpointError(f"{path}: missing embedded configuration")
    cfg = parse_config(text["config"])
    model = EmppModel(ModelConfig.from_dict(json.loads(text["model"])), seed=cfg["seed"])
    model.load_state_dict(arrays)
    return model, cfg


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    radius: float
    direction: float
    total: float
    property_mae: float | None
    lr: float
    wall: float
    seed: int
    config_hash: str

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


def append_report(path, record: EpochRecord) -> None:
    """One JSON line per epoch, flushed and synced before returning."""
    with open(path, "a") as fh:
        fh.write(record.to_json() + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def read_report(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def mask_batch(mols: Sequence[Molecule], n: int, rng: np.random.Generator, cutoff: float) -> list[MaskedMolecule]:
    out = []
    for mol in mols:
        for i in sample_mask_indices(mol, n, rng, cutoff):
            out.append(mask_molecule(mol, int(i), cutoff))
    return out


@dataclass
class TrainResult:
    model: EmppModel
    history: list[EpochRecord] = field(default_factory=list)
    steps: int = 0


def train(
    cfg: Config,
    data: Dataset,
    mode: str = "self_supervised",
    report_path=None,
    grid: SphereGrid | None = None,
    model: EmppModel | None = None,
    time_budget: float | None = None,
) -> TrainResult:
    """Optimise the masking loss (plus energy MAE in auxiliary mode).

    ``time_budget`` (seconds) stops early at a step boundary; the cosine
    schedule is still laid out over the configured epoch count.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    train_mols = data.subset("train")
    if not train_mols:
        raise ValueError("training split is empty")
    if mode == "auxiliary" and any(m.energy is None for m in train_mols):
        raise ValueError("auxiliary mode needs an energy label on every training molecule")
    seed = cfg["seed"]
    rng = np.random.default_rng(seed)
    model = model or EmppModel(model_config(cfg, train_mols), seed=seed)
    grid = grid or grid_from_config(cfg)
    params = model.parameters()
    opt = SGD(params, cfg["train.momentum"]) if cfg["train.optimizer"] == "sgd" else Adam(params)
    batch = cfg["train.batch"]
    steps_per_epoch = math.ceil(len(train_mols) / batch)
    total_steps = steps_per_epoch * cfg["train.epochs"]
    result = TrainResult(model)
    start = time.perf_counter()
    step = 0
    for epoch in range(cfg["train.epochs"]):
        order = rng.permutation(len(train_mols))
        sums = np.zeros(3)
        mae_sum = 0.0
        seen = 0
        for b in range(steps_per_epoch):
            mols = [train_mols[i] for i in order[b * batch : (b + 1) * batch]]
            masked = mask_batch(mols, cfg["mask.n"], rng, cfg["cutoff"])
            for p in params:
                p.zero_grad()
            tape = Tape()
            loss = empp_losses(tape, model, masked, grid, cfg["head.tau"], cfg["label.sigma"], cfg["label.lmax"])
            objective = loss.total
            if mode == "auxiliary":
                pred = model.predict_energy(tape, mols)
                target = np.array([m.energy for m in mols])
                err = tape.sub(pred, tape.constant(target))
                mae = tape.scale(tape.mean(tape.abs(err)), 1.0 / model.cfg.energy_std)
                objective = tape.add(mae, tape.scale(loss.total, cfg["loss.weight"]))
                mae_sum += float(np.abs(pred.value - target).sum())
            tape.backward(objective)
            clip_gradients(params, cfg["train.clip"])
            lr = cosine_lr(cfg["train.lr"], step, total_steps)
            opt.step(lr)
            step += 1
            f = loss.as_floats()
            sums += np.array([f["radius"], f["direction"], f["total"]]) * len(mols)
            seen += len(mols)
            if time_budget is not None and time.perf_counter() - start > time_budget:
                break
        rec = EpochRecord(
            epoch, *(sums / max(seen, 1)),
            property_mae=mae_sum / max(seen, 1) if mode == "auxiliary" else None,
            lr=cosine_lr(cfg["train.lr"], step, total_steps),
            wall=time.perf_counter() - start,
            seed=seed,
            config_hash=cfg.hash,
        )
        result.history.append(rec)
        log.info("epoch %d  radius %.4f  direction %.4f  total %.4f", epoch, rec.radius, rec.direction, rec.total)
        if report_path is not None:
            append_report(report_path, rec)
        if time_budget is not None and time.perf_counter() - start > time_budget:
            log.warning("time budget reached after %d steps", step)
            break
    result.steps = step
    return result


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


@dataclass
class EvalResult:
    angular_error_deg: np.ndarray  # per neighbour case
    radius_bin_error: np.ndarray  # per neighbour case
    position_error: np.ndarray  # per masked atom

    @property
    def direction_ok(self) -> float:
        return float(np.mean(self.angular_error_deg < 10.0))

    @property
    def radius_ok(self) -> float:
        return float(np.mean(self.radius_bin_error <= 2))

    @property
    def joint_ok(self) -> float:
        return float(np.mean((self.angular_error_deg < 10.0) & (self.radius_bin_error <= 2)))

    def summary(self) -> dict[str, float]:
        return {
            "cases": int(len(self.angular_error_deg)),
            "mean_angular_error_deg": float(self.angular_error_deg.mean()),
            "direction_ok": self.direction_ok,
            "radius_ok": self.radius_ok,
            "joint_ok": self.joint_ok,
            "mean_position_error": float(self.position_error.mean()),
        }


def evaluate(model: EmppModel, mols: Sequence[Molecule], grid: SphereGrid, tau: float = 0.1,
             indices: Sequence[int] | None = None, chunk: int = 16) -> EvalResult:
    """Mask each listed atom (default: every atom with neighbours) and score argmax predictions."""
    masked = []
    for mol in mols:
        for i in (range(len(mol)) if indices is None else indices):
            try:
                masked.append(mask_molecule(mol, int(i), model.cfg.cutoff))
            except MaskingError:
                continue
    ang, rbin, perr = [], [], []
    bins = model.cfg.bins
    for c in range(0, len(masked), chunk):
        for pr in predict(model, masked[c : c + chunk], grid, tau):
            off = pr.masked.offsets()
            dist = np.linalg.norm(off, axis=1)
            d_hat = grid.points[np.argmax(pr.direction, axis=1)]
            cos = np.clip(np.sum(d_hat * off, axis=1) / dist, -1.0, 1.0)
            ang.append(np.degrees(np.arccos(cos)))
            rbin.append(np.abs(np.argmax(pr.radius, axis=1) - bins.index(dist)))
            est, _ = predicted_position(pr.radius, pr.direction, pr.neighbor_positions, grid, bins)
            perr.append(np.linalg.norm(est - pr.masked.target))
    return EvalResult(np.concatenate(ang), np.concatenate(rbin), np.array(perr))
