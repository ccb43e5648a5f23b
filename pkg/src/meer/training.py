"""Two-stage training: multi-task disentanglement, then joint GAN refinement.

Stage 1 feeds mixed unmasked/masked batches through the encoder and MDM
and optimizes the pattern-classification and identity losses jointly.
Stage 2 restores unmasked faces from masked inputs, alternating a
discriminator update with a generator/encoder update that re-encodes the
restored face for the id-preserving and auxiliary identity terms.

All runs are deterministic for a fixed seed: batch order is a pure
function of the seed, and checkpoints round-trip value-exactly.
"""

from __future__ import annotations

import math
import os
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import face_data, losses
from .face_data import DatasetManifest
from .generator_gan import Decoder, PatchDiscriminator, plain_skips, suppress_skips
from .losses import LossWeights
from .model_core import ArcClassifier, ModelConfig, RecognitionModel

CHECKPOINT_VERSION = 1
NUM_WORKERS_ENV = "MEER_NUM_WORKERS"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 30
    lr_initial: float = 0.01
    lr_min: float = 1e-4
    lr_milestones: tuple | None = None  # epoch indices; None -> 50% and 75% of epochs
    weight_decay: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    seed: int = 0
    masked_ratio: float = 0.5
    mdm_on: bool = True
    sc_count: int = 3
    mis_on: bool = True
    stage2_pattern_loss: bool = False
    debug: bool = False

    def __post_init__(self):
        if self.lr_milestones is not None:
            ms = tuple(int(m) for m in self.lr_milestones)
            if any(b <= a for a, b in zip(ms, ms[1:])):
                raise ValueError(f"lr_milestones must be strictly increasing, got {ms}")
            self.lr_milestones = ms
        if self.lr_min <= 0 or self.lr_initial < self.lr_min:
            raise ValueError("need lr_initial >= lr_min > 0")
        if not 0.0 <= self.masked_ratio <= 1.0:
            raise ValueError(f"masked_ratio must be in [0, 1], got {self.masked_ratio}")
        if self.sc_count not in (0, 1, 3):
            raise ValueError(f"sc_count must be 0, 1 or 3, got {self.sc_count}")

    def milestone_epochs(self) -> tuple:
        if self.lr_milestones is not None:
            return self.lr_milestones
        return tuple(sorted({max(1, self.epochs // 2), max(1, self.epochs * 3 // 4)}))


@dataclass(frozen=True)
class LrSchedule:
    initial: float
    milestone_steps: tuple
    floor: float = 1e-4


def lr_at(step: int, schedule: LrSchedule) -> float:
    """Piecewise-constant rate, divided by 10 at each milestone (right-exclusive
    boundaries: the new value applies from the milestone step on), floored."""
    drops = sum(1 for m in schedule.milestone_steps if step >= m)
    return max(schedule.initial / (10.0 ** drops), schedule.floor)


def resolve_schedule(cfg: TrainConfig, steps_per_epoch: int) -> LrSchedule:
    steps = tuple(m * steps_per_epoch for m in cfg.milestone_epochs())
    return LrSchedule(initial=cfg.lr_initial, milestone_steps=steps, floor=cfg.lr_min)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


# ---------------------------------------------------------------------------
# in-memory dataset

class FaceDataset:
    """Manifest records loaded eagerly into arrays.

    File reads can be parallelized with the MEER_NUM_WORKERS environment
    variable; order is preserved, so loading stays deterministic.
    """

    def __init__(self, manifest: DatasetManifest, image_size: int):
        if not manifest.records:
            raise ValueError("manifest has no records")
        self.records = list(manifest.records)
        self.num_identities = manifest.num_identities
        paths = [r.path for r in self.records]
        imgs = _load_many(paths)
        for p, im in zip(paths, imgs):
            if im.shape[1] != image_size or im.shape[2] != image_size:
                raise ValueError(
                    f"{p}: expected {image_size}x{image_size} image, got "
                    f"{im.shape[1]}x{im.shape[2]}"
                )
        self.images = np.stack(imgs)
        self.labels = np.array([r.identity_label for r in self.records], dtype=np.int64)
        self.patterns = np.array([r.pattern_class for r in self.records], dtype=np.int64)
        self.is_masked = np.array(
            [r.mask_flag == face_data.SIMULATED_MASKED for r in self.records], dtype=bool
        )

        paired_paths = [r.paired_unmasked_path for r in self.records]
        masked_with_pair = [i for i in np.nonzero(self.is_masked)[0] if paired_paths[i]]
        self.pair_indices = np.array(masked_with_pair, dtype=np.int64)
        if self.pair_indices.size:
            self.paired_images = np.stack(_load_many([paired_paths[i] for i in masked_with_pair]))
        else:
            self.paired_images = np.zeros((0, 3, image_size, image_size), dtype=np.float32)

    def __len__(self):
        return len(self.records)


def _load_many(paths: list[str]) -> list[np.ndarray]:
    workers = int(os.environ.get(NUM_WORKERS_ENV, "0") or 0)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(face_data.load_image, paths))
    return [face_data.load_image(p) for p in paths]


def _pool_stream(pool: np.ndarray, rng: np.random.Generator):
    while True:
        for i in rng.permutation(pool):
            yield int(i)


def stage1_batches(ds: FaceDataset, cfg: TrainConfig, rng: np.random.Generator):
    """Yields index arrays; one epoch is ceil(N / batch) batches.

    When both masked and unmasked records exist, each batch holds
    round(batch_size * masked_ratio) masked samples; otherwise batches
    draw from whichever pool is non-empty.
    """
    masked = np.nonzero(ds.is_masked)[0]
    unmasked = np.nonzero(~ds.is_masked)[0]
    steps = math.ceil(len(ds) / cfg.batch_size)
    if masked.size == 0 or unmasked.size == 0:
        stream = _pool_stream(np.arange(len(ds)), rng)
        for _ in range(steps):
            yield np.array([next(stream) for _ in range(cfg.batch_size)])
        return
    k = int(round(cfg.batch_size * cfg.masked_ratio))
    k = min(max(k, 0), cfg.batch_size)
    ms = _pool_stream(masked, rng)
    us = _pool_stream(unmasked, rng)
    for _ in range(steps):
        idx = [next(ms) for _ in range(k)] + [next(us) for _ in range(cfg.batch_size - k)]
        yield np.array(idx)


# ---------------------------------------------------------------------------
# loss CSV log

class LossCsvLogger:
    COLUMNS = ("step", "l_sm", "l_arc", "L_D", "L_Dadv", "L_rec", "L_idp", "total")

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._fh = open(self.path, "w", encoding="utf-8")
        self._fh.write(",".join(self.COLUMNS) + "\n")

    def log(self, step: int, **terms) -> None:
        row = [str(step)]
        for col in self.COLUMNS[1:]:
            row.append(f"{float(terms.get(col, 0.0)):.8g}")
        self._fh.write(",".join(row) + "\n")

    def close(self) -> None:
        self._fh.close()


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path: str | Path, *, stage: int, model_cfg: ModelConfig,
                    train_cfg: TrainConfig, weights: LossWeights, num_identities: int,
                    modules: dict, optimizers: dict, step: int, epoch: int) -> Path:
    payload = {
        "version": CHECKPOINT_VERSION,
        "stage": stage,
        "model_config": asdict(model_cfg),
        "train_config": asdict(train_cfg),
        "loss_weights": asdict(weights),
        "num_identities": num_identities,
        "modules": {name: m.state_dict() for name, m in modules.items()},
        "optimizers": {name: o.state_dict() for name, o in optimizers.items()},
        "step": step,
        "epoch": epoch,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {payload.get('version')}")
    return payload


def restore_models(payload: dict):
    """Rebuild (model, classifier[, decoder, discriminator]) from a checkpoint."""
    model_cfg = ModelConfig(**payload["model_config"])
    train_cfg = TrainConfig(**payload["train_config"])
    model = RecognitionModel(model_cfg, mdm_on=train_cfg.mdm_on)
    model.load_state_dict(payload["modules"]["model"])
    classifier = ArcClassifier(payload["num_identities"], model_cfg.embed_dim)
    classifier.load_state_dict(payload["modules"]["classifier"])
    out = [model, classifier]
    if payload["stage"] >= 2:
        decoder = Decoder(model_cfg, sc_count=train_cfg.sc_count)
        decoder.load_state_dict(payload["modules"]["decoder"])
        discriminator = PatchDiscriminator()
        discriminator.load_state_dict(payload["modules"]["discriminator"])
        out += [decoder, discriminator]
    return tuple(out)


def load_recognition_model(path: str | Path) -> RecognitionModel:
    payload = load_checkpoint(path)
    model = restore_models(payload)[0]
    model.eval()
    return model


# ---------------------------------------------------------------------------
# optimizers

def _param_groups(modules, weight_decay: float):
    decay, no_decay = [], []
    for m in modules:
        for p in m.parameters():
            (decay if p.ndim > 1 else no_decay).append(p)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def _make_optimizer(modules, cfg: TrainConfig):
    return torch.optim.AdamW(
        _param_groups(modules, cfg.weight_decay),
        lr=cfg.lr_initial,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
    )


def _set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _check_finite(loss: torch.Tensor, step: int, batch_idx: np.ndarray) -> None:
    if not torch.isfinite(loss):
        raise TrainingDivergedError(
            f"non-finite loss at step {step}; batch indices {batch_idx.tolist()}"
        )


def _assert_decomposition(x_id, x_mask, x) -> None:
    if not torch.allclose(x_id + x_mask, x, rtol=1e-5, atol=1e-6):
        raise AssertionError("identity/mask decomposition does not reproduce the hybrid feature")


# ---------------------------------------------------------------------------
# stage 1

@dataclass
class Stage1Result:
    checkpoint_path: Path
    final_loss: float
    step: int
    model: RecognitionModel
    classifier: ArcClassifier
    history: dict = field(default_factory=dict)


def train_stage1(
    manifest: DatasetManifest,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    weights: LossWeights,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
) -> Stage1Result:
    if not manifest.records:
        raise ValueError("cannot train on an empty manifest")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    seed_everything(cfg.seed)
    ds = FaceDataset(manifest, model_cfg.image_size)
    model = RecognitionModel(model_cfg, mdm_on=cfg.mdm_on)
    classifier = ArcClassifier(ds.num_identities, model_cfg.embed_dim)
    optimizer = _make_optimizer([model, classifier], cfg)

    step, start_epoch = 0, 0
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        model.load_state_dict(payload["modules"]["model"])
        classifier.load_state_dict(payload["modules"]["classifier"])
        optimizer.load_state_dict(payload["optimizers"]["optimizer"])
        step, start_epoch = payload["step"], payload["epoch"]

    steps_per_epoch = math.ceil(len(ds) / cfg.batch_size)
    schedule = resolve_schedule(cfg, steps_per_epoch)
    logger = LossCsvLogger(out_dir / "stage1_losses.csv")
    history = {"total": [], "l_sm": [], "l_arc": []}

    model.train()
    final_loss = float("nan")
    try:
        for epoch in range(start_epoch, cfg.epochs):
            rng = np.random.default_rng([cfg.seed, 1, epoch])
            for idx in stage1_batches(ds, cfg, rng):
                images = torch.from_numpy(ds.images[idx])
                y_id = torch.from_numpy(ds.labels[idx])
                y_mask = torch.from_numpy(ds.patterns[idx])

                out = model(images)
                if cfg.debug and out.attention is not None:
                    _assert_decomposition(out.x_id, out.x_mask, out.encoder.x)
                l_arc = losses.arcface_loss(out.z_id, classifier.weight, y_id,
                                            weights.arcface_scale, weights.arcface_margin)
                l_sm = losses.mask_pattern_loss(out.mask_logits, y_mask)
                loss = losses.stage1_loss(l_sm, l_arc, weights.lam)
                _check_finite(loss, step, idx)

                _set_lr(optimizer, lr_at(step, schedule))
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()

                final_loss = loss.item()
                history["total"].append(final_loss)
                history["l_sm"].append(l_sm.item())
                history["l_arc"].append(l_arc.item())
                logger.log(step, l_sm=l_sm.item(), l_arc=l_arc.item(), total=final_loss)
                step += 1
    finally:
        logger.close()

    ckpt = save_checkpoint(
        out_dir / "stage1.pt", stage=1, model_cfg=model_cfg, train_cfg=cfg,
        weights=weights, num_identities=ds.num_identities,
        modules={"model": model, "classifier": classifier},
        optimizers={"optimizer": optimizer}, step=step, epoch=cfg.epochs,
    )
    return Stage1Result(ckpt, final_loss, step, model, classifier, history)


# ---------------------------------------------------------------------------
# stage 2

@dataclass
class Stage2Result:
    checkpoint_path: Path
    step: int
    model: RecognitionModel
    classifier: ArcClassifier
    decoder: Decoder
    discriminator: PatchDiscriminator
    history: dict = field(default_factory=dict)


def train_stage2(
    stage1_ckpt: str | Path,
    paired_manifest: DatasetManifest,
    cfg: TrainConfig,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
    weights: LossWeights | None = None,
) -> Stage2Result:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    base = load_checkpoint(stage1_ckpt)
    model_cfg = ModelConfig(**base["model_config"])
    if weights is None:
        weights = LossWeights(**base["loss_weights"])

    seed_everything(cfg.seed)
    ds = FaceDataset(paired_manifest, model_cfg.image_size)
    if ds.pair_indices.size == 0:
        raise ValueError("stage 2 needs a manifest with masked/unmasked pairs")

    model = RecognitionModel(model_cfg, mdm_on=cfg.mdm_on)
    model.load_state_dict(base["modules"]["model"])
    classifier = ArcClassifier(base["num_identities"], model_cfg.embed_dim)
    classifier.load_state_dict(base["modules"]["classifier"])
    decoder = Decoder(model_cfg, sc_count=cfg.sc_count)
    discriminator = PatchDiscriminator()

    g_opt = _make_optimizer([model, classifier, decoder], cfg)
    d_opt = _make_optimizer([discriminator], cfg)

    step, start_epoch = 0, 0
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        for name, module in (("model", model), ("classifier", classifier),
                             ("decoder", decoder), ("discriminator", discriminator)):
            module.load_state_dict(payload["modules"][name])
        g_opt.load_state_dict(payload["optimizers"]["generator"])
        d_opt.load_state_dict(payload["optimizers"]["discriminator"])
        step, start_epoch = payload["step"], payload["epoch"]

    n_pairs = ds.pair_indices.size
    steps_per_epoch = math.ceil(n_pairs / cfg.batch_size)
    schedule = resolve_schedule(cfg, steps_per_epoch)
    logger = LossCsvLogger(out_dir / "stage2_losses.csv")
    history = {"L_rec": [], "L_D": [], "L_Dadv": [], "L_idp": [], "total": []}

    model.train()
    decoder.train()
    discriminator.train()
    try:
        for epoch in range(start_epoch, cfg.epochs):
            rng = np.random.default_rng([cfg.seed, 2, epoch])
            stream = _pool_stream(np.arange(n_pairs), rng)
            for _ in range(steps_per_epoch):
                pos = np.array([next(stream) for _ in range(cfg.batch_size)])
                rec_idx = ds.pair_indices[pos]
                imgs_sm = torch.from_numpy(ds.images[rec_idx])
                imgs_ru = torch.from_numpy(ds.paired_images[pos])
                y = torch.from_numpy(ds.labels[rec_idx])

                lr = lr_at(step, schedule)
                _set_lr(g_opt, lr)
                _set_lr(d_opt, lr)

                out_sm = model(imgs_sm)
                if cfg.debug and out_sm.attention is not None:
                    _assert_decomposition(out_sm.x_id, out_sm.x_mask, out_sm.encoder.x)
                if cfg.mis_on and out_sm.attention is not None:
                    skips = suppress_skips(out_sm.encoder, out_sm.attention)
                else:
                    skips = plain_skips(out_sm.encoder)
                fake = decoder(skips, out_sm.x_id)

                # discriminator step (fake gradients blocked)
                l_dadv = losses.gan_discriminator_loss(
                    discriminator(imgs_ru), discriminator(fake.detach()))
                d_loss = losses.stage2_discriminator_loss(l_dadv, weights)
                _check_finite(d_loss, step, rec_idx)
                d_opt.zero_grad()
                d_loss.backward()
                d_opt.step()

                # generator/encoder step on the joint objective
                out_ru = model(imgs_ru)
                out_fu = model(fake)
                l_d = losses.gan_generator_loss(discriminator(fake))
                l_rec = losses.reconstruction_loss(fake, imgs_ru)
                l_idp = losses.id_preserving_loss(out_fu.z_id, out_ru.z_id)
                l_id = losses.arcface_loss(
                    torch.cat([out_ru.z_id, out_sm.z_id]), classifier.weight,
                    torch.cat([y, y]), weights.arcface_scale, weights.arcface_margin)
                l_id_prime = losses.arcface_loss(out_fu.z_id, classifier.weight, y,
                                                 weights.arcface_scale, weights.arcface_margin)
                g_loss = losses.stage2_generator_loss(l_d, l_id, l_id_prime, l_rec, l_idp, weights)
                l_sm = torch.zeros(())
                if cfg.stage2_pattern_loss:
                    y_mask = torch.from_numpy(ds.patterns[rec_idx])
                    l_sm = losses.mask_pattern_loss(out_sm.mask_logits, y_mask)
                    g_loss = g_loss + l_sm
                _check_finite(g_loss, step, rec_idx)
                g_opt.zero_grad()
                g_loss.backward()
                g_opt.step()

                history["L_rec"].append(l_rec.item())
                history["L_D"].append(l_d.item())
                history["L_Dadv"].append(l_dadv.item())
                history["L_idp"].append(l_idp.item())
                history["total"].append(g_loss.item())
                logger.log(step, l_sm=l_sm.item(), l_arc=l_id.item(),
                           L_D=l_d.item(), L_Dadv=l_dadv.item(), L_rec=l_rec.item(),
                           L_idp=l_idp.item(), total=g_loss.item())
                step += 1
    finally:
        logger.close()

    ckpt = save_checkpoint(
        out_dir / "stage2.pt", stage=2, model_cfg=model_cfg, train_cfg=cfg,
        weights=weights, num_identities=base["num_identities"],
        modules={"model": model, "classifier": classifier,
                 "decoder": decoder, "discriminator": discriminator},
        optimizers={"generator": g_opt, "discriminator": d_opt},
        step=step, epoch=cfg.epochs,
    )
    return Stage2Result(ckpt, step, model, classifier, decoder, discriminator, history)


# ---------------------------------------------------------------------------
# train-set accuracies (used by the overfit checks)

@torch.no_grad()
def identity_accuracy(model: RecognitionModel, classifier: ArcClassifier,
                      ds: FaceDataset, batch_size: int = 64) -> float:
    model.eval()
    correct = 0
    for start in range(0, len(ds), batch_size):
        images = torch.from_numpy(ds.images[start : start + batch_size])
        logits = classifier.cosine_logits(model(images).z_id)
        pred = logits.argmax(dim=1).numpy()
        correct += int((pred == ds.labels[start : start + batch_size]).sum())
    model.train()
    return correct / len(ds)


@torch.no_grad()
def pattern_accuracy(model: RecognitionModel, ds: FaceDataset, batch_size: int = 64) -> float:
    model.eval()
    correct = 0
    for start in range(0, len(ds), batch_size):
        images = torch.from_numpy(ds.images[start : start + batch_size])
        pred = model(images).mask_logits.argmax(dim=1).numpy()
        correct += int((pred == ds.patterns[start : start + batch_size]).sum())
    model.train()
    return correct / len(ds)
