"""Training engine: SGD with momentum, warmup/cosine schedule, the epoch
loop wiring all losses, checkpoint persistence, and inference drivers.

Epoch 0 trains with smoothed cross-entropy plus triplet only and fills
the feature memory at its end; from epoch 1 on, neighbor clustering and
soft-label distillation join in (subject to the ablation switches) and
the memory rows of the samples in each batch are refreshed right after
the step. All randomness is a pure function of (seed, purpose, epoch,
step, index), so interrupted runs resume exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig, RunConfig, TrainConfig
from .container import load_container, save_container
from .data import SampleRecord, augment, generate_dataset, pk_sample
from .encoder import (
    EncoderParams,
    PartRegionSpec,
    default_part_regions,
    encoder_forward,
    fused_attention_map,
    init_encoder_params,
    params_from_arrays,
)
from .errors import ConfigError, NumericalError
from .losses import (
    build_soft_label,
    psd_loss,
    smoothed_cross_entropy,
    soft_margin_triplet,
    total_loss,
)
from .memory import (
    MemoryBank,
    bank_init,
    bank_update,
    csl_loss,
    effective_k,
    select_positives,
)
from .metrics import RetrievalResult, compute_metrics

_SEED_DATA = 0xDA7A
_SEED_BATCH = 0xBA7C
_SEED_FLIP = 0xF11B


class SGD:
    """Plain SGD with heavy-ball momentum and L2 weight decay."""

    def __init__(self, params: dict[str, Tensor], momentum: float, weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(t.data) for name, t in params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self, lr: float) -> None:
        for name, t in self.params.items():
            if t.grad is None:
                continue
            g = t.grad + self.weight_decay * t.data
            v = self.momentum * self.velocity[name] + g
            self.velocity[name] = v
            t.data = t.data - lr * v


def lr_at(step: int, config: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warmup from zero to the peak, then cosine decay to zero.

    The decay maps the final step of the run to exactly zero.
    """
    if step < 0:
        raise ConfigError("step must be non-negative")
    warmup = config.warmup_epochs * steps_per_epoch
    total = config.epochs * steps_per_epoch
    if warmup > 0 and step < warmup:
        return config.peak_lr * step / warmup
    span = max(1, total - 1 - warmup)
    t = min(1.0, max(0.0, (step - warmup) / span))
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * t))


def training_records(config: RunConfig) -> list[SampleRecord]:
    """The source-domain training set (never the shifted domain)."""
    return generate_dataset(
        config.data.num_ids, config.data.images_per_id, config.data.domain_a,
        seed=[config.train.seed, _SEED_DATA],
        image_h=config.model.image_h, image_w=config.model.image_w)


def target_records(config: RunConfig) -> list[SampleRecord]:
    return generate_dataset(
        config.data.num_ids, config.data.images_per_id, config.data.domain_b,
        seed=[config.train.seed, _SEED_DATA],
        image_h=config.model.image_h, image_w=config.model.image_w)


def part_regions(config: ModelConfig) -> PartRegionSpec:
    return default_part_regions(config.grid_h, config.grid_w, config.num_parts)


@dataclass
class TrainState:
    params: EncoderParams
    optimizer: SGD
    bank: MemoryBank | None
    epoch_next: int
    global_step: int


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    history: list[dict] = field(default_factory=list)
    epochs_run: int = 0
    steps_run: int = 0


def save_checkpoint(stem: str | Path, state: TrainState, config: RunConfig) -> Path:
    stem = Path(stem)
    tensors: dict[str, np.ndarray] = {}
    for name, t in state.params.named().items():
        tensors[f"param.{name}"] = t.data
        tensors[f"opt.{name}"] = state.optimizer.velocity[name]
    meta = {
        "version": 1,
        "epoch_next": state.epoch_next,
        "global_step": state.global_step,
        "config": config.model_dump(mode="json"),
        "bank": None,
    }
    if state.bank is not None:
        for i, rows in enumerate(state.bank.rows):
            tensors[f"bank.rows.{i}"] = rows
        tensors["bank.ids"] = state.bank.sample_ids.astype(np.float32)
        meta["bank"] = {"momentum": state.bank.momentum, "epoch": state.bank.epoch}
    save_container(stem.with_suffix(".patb"), tensors)
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")
    return stem.with_suffix(".patb")


def load_checkpoint(stem: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    stem = Path(stem)
    if stem.suffix == ".patb":
        stem = stem.with_suffix("")
    arrays = load_container(stem.with_suffix(".patb"))
    meta_path = stem.with_suffix(".json")
    if not meta_path.exists():
        raise ConfigError(f"checkpoint metadata {meta_path} not found")
    meta = json.loads(meta_path.read_text())
    return arrays, meta


def _restore_state(config: RunConfig, arrays: dict[str, np.ndarray], meta: dict) -> TrainState:
    stored = RunConfig.model_validate(meta["config"])
    ours = config.model_dump()
    theirs = stored.model_dump()
    ours["train"].pop("checkpoint_every")
    theirs["train"].pop("checkpoint_every")
    if ours != theirs:
        raise ConfigError("checkpoint was written with a different configuration")
    params = params_from_arrays(
        config.model,
        {n[len("param."):]: a for n, a in arrays.items() if n.startswith("param.")})
    opt = SGD(params.named(), config.train.sgd_momentum, config.train.weight_decay)
    for name in opt.velocity:
        opt.velocity[name] = np.asarray(arrays[f"opt.{name}"], dtype=np.float32)
    bank = None
    if meta.get("bank") is not None:
        rows = []
        i = 0
        while f"bank.rows.{i}" in arrays:
            rows.append(np.asarray(arrays[f"bank.rows.{i}"], dtype=np.float32))
            i += 1
        bank = MemoryBank(
            rows=rows,
            sample_ids=np.asarray(arrays["bank.ids"], dtype=np.int64),
            momentum=float(meta["bank"]["momentum"]),
            initialized=True,
            epoch=int(meta["bank"]["epoch"]),
        )
    return TrainState(params=params, optimizer=opt, bank=bank,
                      epoch_next=int(meta["epoch_next"]),
                      global_step=int(meta["global_step"]))


def train(config: RunConfig, out_dir: str | Path, resume: str | Path | None = None) -> TrainResult:
    """Run the full loop; writes per-epoch JSONL logs and checkpoints."""
    mc, tc = config.model, config.train
    if config.data.num_ids != mc.num_classes:
        raise ConfigError(
            f"classifier covers {mc.num_classes} classes but data has "
            f"{config.data.num_ids} identities")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = training_records(config)
    regions = part_regions(mc)
    steps_per_epoch = max(1, len(records) // tc.batch_size)

    if resume is not None:
        arrays, meta = load_checkpoint(resume)
        state = _restore_state(config, arrays, meta)
    else:
        params = init_encoder_params(mc, tc.seed)
        state = TrainState(
            params=params,
            optimizer=SGD(params.named(), tc.sgd_momentum, tc.weight_decay),
            bank=None, epoch_next=0, global_step=0)

    log_path = out / "train_log.jsonl"
    mode = "a" if resume is not None else "w"
    result = TrainResult(checkpoint=out / "checkpoint.patb", log_path=log_path)
    with log_path.open(mode) as log:
        for epoch in range(state.epoch_next, tc.epochs):
            batches = pk_sample(records, tc.p, tc.k_per_id,
                                seed=[tc.seed, _SEED_BATCH, epoch])[:steps_per_epoch]
            sums = {"triplet": 0.0, "psd": 0.0, "total": 0.0}
            csl_sums = np.zeros(mc.num_parts)
            last_lr = 0.0
            for batch in batches:
                last_lr = lr_at(state.global_step, tc, steps_per_epoch)
                breakdown = _train_step(state, config, records, regions, batch, last_lr, epoch)
                sums["triplet"] += breakdown.triplet
                sums["psd"] += breakdown.psd
                sums["total"] += breakdown.total
                csl_sums += np.asarray(breakdown.csl_per_part)
                state.global_step += 1
                result.steps_run += 1
            if epoch == 0 and tc.use_csl and state.bank is None:
                state.bank = bank_init(records, state.params, regions, mc,
                                       momentum=config.csl.momentum,
                                       batch_size=tc.batch_size)
            if state.bank is not None:
                state.bank.epoch = epoch + 1
            state.epoch_next = epoch + 1
            n = max(1, len(batches))
            entry = {
                "epoch": epoch,
                "lr": last_lr,
                "triplet": sums["triplet"] / n,
                "csl": (csl_sums / n).tolist(),
                "psd": sums["psd"] / n,
                "total": sums["total"] / n,
                "steps": len(batches),
            }
            log.write(json.dumps(entry) + "\n")
            result.history.append(entry)
            result.epochs_run += 1
            save_checkpoint(out / "checkpoint", state, config)
            if tc.checkpoint_every and (epoch + 1) % tc.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_epoch_{epoch:03d}", state, config)
    return result


def _train_step(state: TrainState, config: RunConfig, records, regions,
                batch: list[int], lr: float, epoch: int):
    mc, tc = config.model, config.train
    images = np.stack([
        augment(records[i].image, seed=[tc.seed, _SEED_FLIP, state.global_step, i])
        for i in batch
    ])
    labels = np.array([records[i].identity for i in batch])
    out = encoder_forward(Tensor(images), state.params, regions, mc)

    triplet = soft_margin_triplet(out.global_feat, labels)
    csl_active = tc.use_csl and state.bank is not None and epoch >= 1
    k_eff = effective_k(state.bank, config.csl.k) if csl_active else 0
    csl_active = csl_active and k_eff >= 1
    psd_active = csl_active and tc.use_psd

    csl_terms: list[list[Tensor]] = [[] for _ in range(mc.num_parts)]
    neighbor_ids: list[list[int]] = [[] for _ in batch]
    if csl_active:
        for part in range(mc.num_parts):
            feats = out.local_feats[part].data
            for si, rec_idx in enumerate(batch):
                positives = select_positives(state.bank, part, feats[si], rec_idx, k_eff)
                row = ad.reshape(ad.gather_rows(out.local_feats[part], [si], axis=0),
                                 (mc.embed_dim,))
                csl_terms[part].append(
                    csl_loss(state.bank, part, row, positives, config.csl.tau))
                neighbor_ids[si].extend(int(x) for x in positives.ids)

    classification_terms: list[Tensor] = []
    for si in range(len(batch)):
        logits_row = ad.reshape(ad.gather_rows(out.logits, [si], axis=0), (mc.num_classes,))
        label = int(labels[si])
        if psd_active and neighbor_ids[si]:
            soft = build_soft_label(label, neighbor_ids[si], config.psd.alpha, mc.num_classes)
            classification_terms.append(
                psd_loss(logits_row, soft, label, config.psd.lam, config.psd.smoothing))
        else:
            classification_terms.append(
                smoothed_cross_entropy(logits_row, label, config.psd.smoothing))

    total, breakdown = total_loss(triplet, csl_terms, classification_terms,
                                  csl_on=csl_active, psd_on=psd_active)
    if not np.isfinite(breakdown.total):
        raise NumericalError(
            f"non-finite loss at epoch {epoch}, step {state.global_step}")
    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step(lr)
    if state.bank is not None and epoch >= 1:
        for part in range(mc.num_parts):
            feats = out.local_feats[part].data
            for si, rec_idx in enumerate(batch):
                bank_update(state.bank, rec_idx, part, feats[si])
    return breakdown


def inference_features(records, params: EncoderParams, regions: PartRegionSpec,
                       config: ModelConfig, batch_size: int = 64):
    """Gradient-free forward over records: global + per-part features, logits."""
    n = len(records)
    out_global = np.zeros((n, config.embed_dim), dtype=np.float32)
    out_local = [np.zeros((n, config.embed_dim), dtype=np.float32)
                 for _ in range(config.num_parts)]
    for start in range(0, n, batch_size):
        chunk = records[start : start + batch_size]
        images = np.stack([r.image for r in chunk])
        out = encoder_forward(Tensor(images), params, regions, config)
        out_global[start : start + len(chunk)] = out.global_feat.data
        for i in range(config.num_parts):
            out_local[i][start : start + len(chunk)] = out.local_feats[i].data
    return out_global, out_local


def _records_for_split(config: RunConfig, split: str) -> list[SampleRecord]:
    if split == "target":
        return target_records(config)
    if split == "train":
        return training_records(config)
    raise ConfigError(f"unknown split {split!r}, expected 'target' or 'train'")


def evaluate_checkpoint(config: RunConfig, ckpt: str | Path, split: str = "target",
                        ) -> RetrievalResult:
    """All-vs-all retrieval on the chosen split using the global feature only."""
    arrays, _ = load_checkpoint(ckpt)
    params = params_from_arrays(
        config.model,
        {n[len("param."):]: a for n, a in arrays.items() if n.startswith("param.")})
    return evaluate_params(config, params, split)


def evaluate_params(config: RunConfig, params: EncoderParams, split: str = "target",
                    ) -> RetrievalResult:
    records = _records_for_split(config, split)
    regions = part_regions(config.model)
    feats, _ = inference_features(records, params, regions, config.model,
                                  batch_size=config.train.batch_size)
    ids = np.array([r.identity for r in records])
    cams = np.array([r.camera for r in records])
    return compute_metrics(feats, ids, cams, feats, ids, cams)


def dump_dataset(records, container_path: str | Path, meta_path: str | Path) -> None:
    """Write images as named tensors plus one JSON metadata line per record."""
    tensors = {f"image_{r.index:05d}": r.image for r in records}
    save_container(container_path, tensors)
    with Path(meta_path).open("w") as fh:
        for r in records:
            fh.write(json.dumps(
                {"index": r.index, "id": r.identity, "camera": r.camera,
                 "domain": r.domain}) + "\n")


def embed_checkpoint(config: RunConfig, ckpt: str | Path, out_dir: str | Path,
                     split: str = "train") -> dict:
    """Dump global and per-part features for a split next to their metadata."""
    arrays, _ = load_checkpoint(ckpt)
    params = params_from_arrays(
        config.model,
        {n[len("param."):]: a for n, a in arrays.items() if n.startswith("param.")})
    records = _records_for_split(config, split)
    regions = part_regions(config.model)
    feats, locals_ = inference_features(records, params, regions, config.model)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensors = {"global": feats}
    for i, lf in enumerate(locals_):
        tensors[f"part_{i + 1}"] = lf
    container_path = out / "features.patb"
    meta_path = out / "features.jsonl"
    save_container(container_path, tensors)
    with meta_path.open("w") as fh:
        for r in records:
            fh.write(json.dumps(
                {"index": r.index, "id": r.identity, "camera": r.camera,
                 "domain": r.domain}) + "\n")
    return {"container": str(container_path), "meta": str(meta_path),
            "count": len(records)}


def write_pgm(path: str | Path, values: np.ndarray) -> None:
    """Binary 8-bit PGM; input values are scaled so the max maps to 255."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ConfigError("PGM export needs a 2-d array")
    peak = arr.max()
    scaled = np.zeros_like(arr) if peak <= 0 else arr / peak
    pixels = np.round(scaled * 255.0).astype(np.uint8)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())


def attention_map_files(config: RunConfig, ckpt: str | Path, out_dir: str | Path,
                        token: str | None = None, index: int = 0,
                        split: str = "train") -> list[str]:
    """Render fused attention maps to PGM, one file per requested token."""
    arrays, _ = load_checkpoint(ckpt)
    params = params_from_arrays(
        config.model,
        {n[len("param."):]: a for n, a in arrays.items() if n.startswith("param.")})
    records = _records_for_split(config, split)
    if not (0 <= index < len(records)):
        raise ConfigError(f"record index {index} outside dataset of {len(records)}")
    regions = part_regions(config.model)
    out = encoder_forward(Tensor(records[index].image[None]), params, regions,
                          config.model, retain_attention=True)
    tokens = [token] if token else ["cls"] + [f"p{i + 1}" for i in range(config.model.num_parts)]
    outdir = Path(out_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    files = []
    for tok in tokens:
        grid = fused_attention_map(out, tok, config.model, regions)
        path = outdir / f"attnmap_{tok}_{index:05d}.pgm"
        write_pgm(path, grid)
        files.append(str(path))
    return files
