"""Initialisation, SGD with per-group cosine learning rates, training loop, checkpoints, prediction."""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig, RunConfig, parse_text
from .data import Sample, augment, to_uint8
from .errors import CheckpointError, ContractViolation, NonFiniteLoss
from .layers import ScoreHead, resize
from .losses import model_loss
from .refinement import RMFormer

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RMFCKPT\x00"
CHECKPOINT_VERSION = 1
CSV_FIELDS = ("step", "lr_backbone", "lr_other", "loss_cps", "loss_rrs1", "loss_rrs2", "total")


# initialisation ---------------------------------------------------------

def _trunc_normal(t, std=0.02):
    # bounds are absolute in torch; cut at two standard deviations
    nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std)


def _init_module(m):
    if isinstance(m, ScoreHead):
        # a 1x1 score projection is a per-pixel linear layer; small weights start maps near 0.5
        # (apply() visits children first, so this overrides the conv init below)
        _trunc_normal(m.proj.weight)
        nn.init.zeros_(m.proj.bias)
    elif isinstance(m, nn.Linear):
        _trunc_normal(m.weight)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.Conv2d):
        nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, (nn.LayerNorm, nn.BatchNorm2d)):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)
    if hasattr(m, "relative_position_bias_table"):
        _trunc_normal(m.relative_position_bias_table)


def init_params(seed, model_config: ModelConfig, dtype=torch.float32) -> RMFormer:
    """Build the model with deterministic weights for ``seed``."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = RMFormer(model_config)
        model.apply(_init_module)
    finally:
        torch.random.set_rng_state(gen_state)
    return model.to(dtype)


def param_tags(model: RMFormer) -> Dict[str, str]:
    """'backbone' for every parameter of the shared coarse stage, 'other' for the rest."""
    return {name: ("backbone" if name.startswith("cps.") else "other") for name, _ in model.named_parameters()}


# optimisation -----------------------------------------------------------

def lr_schedule(step, total_steps, base_lr):
    if not 0 <= step <= total_steps:
        raise ContractViolation(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1 + math.cos(math.pi * step / total_steps))


def make_optimizer(model, train_cfg):
    tags = param_tags(model)
    named = dict(model.named_parameters())
    groups = [
        {"params": [named[n] for n in named if tags[n] == "backbone"], "name": "backbone", "base_lr": train_cfg.lr_backbone},
        {"params": [named[n] for n in named if tags[n] == "other"], "name": "other", "base_lr": train_cfg.lr_other},
    ]
    for g in groups:
        g["lr"] = g["base_lr"]
    return torch.optim.SGD(groups, lr=train_cfg.lr_other, momentum=train_cfg.momentum, weight_decay=0.0)


def total_steps(cfg: RunConfig, n_samples):
    if cfg.train.steps > 0:
        return cfg.train.steps
    return cfg.train.epochs * math.ceil(n_samples / cfg.train.batch_size)


def batch_indices(step, batch_size, n, seed):
    """Dataset indices for ``step``: every epoch walks a seeded permutation."""
    out = []
    for i in range(batch_size):
        j = step * batch_size + i
        perm = np.random.default_rng([seed, j // n]).permutation(n)
        out.append(int(perm[j % n]))
    return out


def make_batch(dataset: List[Sample], step, cfg: RunConfig, side):
    idx = batch_indices(step, cfg.train.batch_size, len(dataset), cfg.train.seed)
    images, masks = [], []
    for i, k in enumerate(idx):
        aug_seed = int(np.random.SeedSequence([cfg.train.seed, step, i]).generate_state(1)[0])
        s = augment(dataset[k], aug_seed, cfg.train.flip_prob, cfg.train.crop_fraction)
        images.append(torch.from_numpy(s.image).permute(2, 0, 1))
        masks.append(torch.from_numpy(s.mask)[None])
    images = resize(torch.stack(images), side)
    masks = (resize(torch.stack(masks), side) >= 0.5).float()
    return images, masks


# checkpoints ------------------------------------------------------------

@dataclass
class Checkpoint:
    arrays: Dict[str, np.ndarray]
    step: int
    config_text: str
    version: int = CHECKPOINT_VERSION

    @property
    def config(self) -> RunConfig:
        return parse_text(self.config_text).validate()


def capture(model, optimizer, step, cfg: RunConfig) -> Checkpoint:
    arrays = {f"model/{k}": v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                buf = optimizer.state.get(p, {}).get("momentum_buffer")
                if buf is not None:
                    arrays[f"optim/{names[id(p)]}"] = buf.detach().cpu().numpy().copy()
    return Checkpoint(arrays, step, cfg.to_text())


def save_checkpoint(ckpt: Checkpoint, path):
    """Header JSON (names, dtypes, shapes, offsets) followed by raw little-endian array bytes."""
    entries, blobs, offset = [], [], 0
    for name in sorted(ckpt.arrays):
        a = np.asarray(ckpt.arrays[name], order="C")  # ascontiguousarray would turn 0-d into 1-d
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"version": ckpt.version, "step": ckpt.step, "config": ckpt.config_text,
                         "arrays": entries}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", ckpt.version, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    try:
        version, hlen = struct.unpack("<IQ", data[8:20])
    except struct.error:
        raise CheckpointError(f"{path}: truncated header") from None
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}")
    try:
        header = json.loads(data[20:20 + hlen])
    except ValueError:
        raise CheckpointError(f"{path}: corrupt header (version {version})") from None
    base = 20 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(data):
            raise CheckpointError(f"{path}: array {e['name']} truncated (version {version})")
        arr = np.frombuffer(data, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=start)
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    return Checkpoint(arrays, header["step"], header["config"], version)


def restore(ckpt: Checkpoint, model, optimizer=None):
    state = {k[len("model/"):]: torch.from_numpy(v) for k, v in ckpt.arrays.items() if k.startswith("model/")}
    model.load_state_dict(state)
    if optimizer is not None:
        named = dict(model.named_parameters())
        for k, v in ckpt.arrays.items():
            if k.startswith("optim/"):
                p = named[k[len("optim/"):]]
                optimizer.state[p]["momentum_buffer"] = torch.from_numpy(v).to(p.dtype).clone()


def model_from_checkpoint(ckpt: Checkpoint) -> RMFormer:
    model = init_params(0, ckpt.config.model)
    restore(ckpt, model)
    return model.eval()


# training ---------------------------------------------------------------

@dataclass
class TrainResult:
    model: RMFormer
    checkpoint: Checkpoint
    losses: List[dict]


def train(cfg: RunConfig, dataset: List[Sample], out_dir=None, resume: Optional[Checkpoint] = None,
          stop_after: Optional[int] = None) -> TrainResult:
    """SGD training; writes ``loss.csv`` and checkpoints under ``out_dir`` when given.

    ``stop_after`` ends the loop early (after that many total steps) without changing the
    schedule, which is what a resumed run needs to line up with an uninterrupted one.
    """
    if not dataset:
        raise ContractViolation("training needs a non-empty dataset")
    cfg.validate()
    torch.use_deterministic_algorithms(True)
    model = init_params(cfg.train.seed, cfg.model)
    model.train()
    opt = make_optimizer(model, cfg.train)
    n_steps = total_steps(cfg, len(dataset))
    start = 0
    if resume is not None:
        restore(resume, model, opt)
        start = resume.step
    end = n_steps if stop_after is None else min(n_steps, stop_after)
    side = cfg.model.scales[-1]
    out_dir = Path(out_dir) if out_dir is not None else None
    csv_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "loss.csv"
        if start == 0 or not csv_path.exists():
            with open(csv_path, "w", newline="") as fh:
                csv.writer(fh).writerow(CSV_FIELDS)
    losses = []
    for step in range(start, end):
        for g in opt.param_groups:
            g["lr"] = lr_schedule(step, n_steps, g["base_lr"])
        images, masks = make_batch(dataset, step, cfg, side)
        out = model(images)
        report = model_loss(out, masks, cfg.loss.weights, cfg.loss.edge_width, cfg.loss.supervise_refined)
        bad = report.first_non_finite()
        if bad is not None:
            raise NonFiniteLoss(step, *bad)
        opt.zero_grad(set_to_none=True)
        report.total_tensor.backward()
        opt.step()
        row = {"step": step, "lr_backbone": opt.param_groups[0]["lr"], "lr_other": opt.param_groups[1]["lr"]}
        row.update({f"loss_{k}": report.stage_sums.get(k, 0.0) for k in ("cps", "rrs1", "rrs2")})
        row["total"] = report.total
        losses.append(row)
        if csv_path is not None:
            with open(csv_path, "a", newline="") as fh:
                csv.writer(fh).writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in CSV_FIELDS])
        if step % 50 == 0 or step == end - 1:
            log.info("step %d/%d total %.4f", step, n_steps, report.total)
        every = cfg.train.checkpoint_every
        if out_dir is not None and every and (step + 1) % every == 0 and step + 1 < end:
            save_checkpoint(capture(model, opt, step + 1, cfg), out_dir / f"checkpoint_{step + 1:06d}.ckpt")
    ckpt = capture(model, opt, end, cfg)
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir / "final.ckpt")
    return TrainResult(model, ckpt, losses)


# inference --------------------------------------------------------------

@torch.no_grad()
def predict(model: RMFormer, image) -> Dict[str, np.ndarray]:
    """Stage maps for one (H, W, 3) image in [0, 1]; the input is resized to the top scale."""
    model.eval()
    x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    x = resize(x, model.cfg.scales[-1]).clamp(0, 1).to(next(model.parameters()).dtype)
    out = model(x)
    maps = {k: v[0, 0].float().numpy() for k, v in out.named().items()}
    maps["_selections"] = {
        f"rrs{i}_{b.side}": b.indices[0].numpy() for i, s in enumerate(out.stages, start=1)
        for b in s.blocks if b.indices is not None
    }
    return maps


def selection_mask(indices, side):
    m = np.zeros(side * side, dtype=np.float32)
    m[indices] = 1.0
    return m.reshape(side, side)


def write_prediction(maps, out_dir, stem, dump_selection=False):
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for key, suffix in (("P_l", "pl"), ("P_m", "pm"), ("P_h", "ph")):
        if key in maps:
            path = out_dir / f"{stem}_{suffix}.png"
            Image.fromarray(to_uint8(maps[key]), "L").save(path)
            written.append(path)
    if dump_selection:
        for name, idx in maps["_selections"].items():
            side = int(name.rsplit("_", 1)[1])
            path = out_dir / f"{stem}_sel_{name}.png"
            Image.fromarray(to_uint8(selection_mask(idx, side)), "L").save(path)
            written.append(path)
    return written
