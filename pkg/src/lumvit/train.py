"""Three-stage training: AdamW, warmup + cosine schedule, freezing,
per-epoch metrics and checkpoints.

Stage 1 trains everything with the full-precision embed (the learnable
mask included). Stage 2 switches the embed to binarized kernels and
freezes the mask. Stage 3 also freezes the binarized kernels and
fine-tunes the rest.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_io
from .autodiff import Tensor
from .baselines import cs_reconstruct_cube, magnitude_mask, magnitude_stats, random_mask
from .config import RunConfig
from .data import (AugmentConfig, LabeledSampleSet, Standardizer, augment, extract_samples,
                   gen_synthetic, load_cube, load_labels, upsample_to_27)
from .embed import BINARIZED, FULL_PRECISION
from .errors import NumericError, PipelineError, ValidationError
from .mask import FixedMask, d_ops, ratio_loss, total_loss
from .model import Model, ModelConfig

log = logging.getLogger("lumvit.train")

METRICS_MAGIC = "# LUMMETRICS1"
METRICS_COLUMNS = ("epoch", "train_loss", "val_oa", "mean_d_ops", "lr")

GROUPS = {
    "mask": lambda name: name.startswith("mask."),
    "bi-conv-kernels": lambda name: name == "embed.W",
}


@dataclass
class StageConfig:
    stage_id: int
    epochs: int
    warmup_epochs: int
    base_lr: float
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.03
    batch_size: int = 64
    frozen_sets: tuple = ()
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    drop_path: float = 0.1
    embed_mode: str = FULL_PRECISION
    eps: float = 1e-8
    grad_clip: float | None = None

    def __post_init__(self):
        if self.stage_id not in (1, 2, 3):
            raise ValidationError(f"stage id must be 1, 2 or 3, got {self.stage_id}")
        if self.epochs < 1 or not 0 <= self.warmup_epochs <= self.epochs:
            raise ValidationError(f"need 1 <= epochs and 0 <= warmup <= epochs, got "
                                  f"{self.epochs}/{self.warmup_epochs}")
        unknown = set(self.frozen_sets) - set(GROUPS)
        if unknown:
            raise ValidationError(f"unknown frozen sets {sorted(unknown)}")
        self.betas = tuple(self.betas)
        self.frozen_sets = tuple(self.frozen_sets)
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)

    def is_frozen(self, name: str) -> bool:
        return any(GROUPS[g](name) for g in self.frozen_sets)


# per-stage structure of the fine-tuning table; lr and wd are preset-specific
_TABLE = {
    1: dict(betas=(0.9, 0.999), frozen_sets=(), embed_mode=FULL_PRECISION,
            augment=AugmentConfig(0.1, 0.25, 0.8, 1.0)),
    2: dict(betas=(0.6, 0.9999), frozen_sets=("mask",), embed_mode=BINARIZED,
            augment=AugmentConfig(0.1, 0.0, 0.0, 0.0)),
    3: dict(betas=(0.9, 0.999), frozen_sets=("mask", "bi-conv-kernels"), embed_mode=BINARIZED,
            augment=AugmentConfig(0.1, 0.25, 0.8, 1.0)),
}
STAGE_EPOCHS = {1: 50, 2: 20, 3: 80}
_LR = {"imagenet": {1: 5e-4, 2: 1e-4, 3: 1e-4}, "hsi": {1: 1e-2, 2: 2e-3, 3: 2e-3}}
_WD = {"imagenet": {1: 0.03, 2: 5e-5, 3: 0.03}, "hsi": {1: 1e-3, 2: 5e-5, 3: 1e-3}}
SINGLE_EPOCHS, SINGLE_WARMUP = 100, 5


def scaled_epochs(epochs: int, multiplier: float) -> int:
    return max(1, int(math.floor(epochs * multiplier + 0.5)))


def stage_config(stage_id: int, preset: str = "hsi", multiplier: float = 0.5, batch_size: int = 64,
                 **overrides) -> StageConfig:
    if preset not in _LR:
        raise ValidationError(f"unknown preset '{preset}'")
    epochs = scaled_epochs(STAGE_EPOCHS[stage_id], multiplier)
    kw = dict(_TABLE[stage_id], stage_id=stage_id, epochs=epochs,
              warmup_epochs=int(math.floor(epochs / 10 + 0.5)),
              base_lr=_LR[preset][stage_id], weight_decay=_WD[preset][stage_id], batch_size=batch_size)
    if "epochs" in overrides and "warmup_epochs" not in overrides:
        overrides["warmup_epochs"] = int(math.floor(overrides["epochs"] / 10 + 0.5))
    kw.update(overrides)
    return StageConfig(**kw)


def single_stage_config(preset: str = "hsi", multiplier: float = 1.0, batch_size: int = 64,
                        **overrides) -> StageConfig:
    """One from-scratch run with binarized kernels and a learnable mask."""
    epochs = scaled_epochs(SINGLE_EPOCHS, multiplier)
    kw = dict(_TABLE[1], stage_id=1, epochs=epochs, warmup_epochs=min(SINGLE_WARMUP, epochs),
              base_lr=_LR[preset][1], weight_decay=_WD[preset][1], batch_size=batch_size,
              embed_mode=BINARIZED)
    kw.update(overrides)
    return StageConfig(**kw)


def stages_for(cfg: RunConfig) -> list[StageConfig]:
    ov = {int(k): dict(v) for k, v in cfg.stage_overrides.items()}
    common = dict(grad_clip=cfg.grad_clip)
    if cfg.recipe == "single":
        return [single_stage_config(cfg.preset, cfg.stage_multiplier, cfg.batch_size,
                                    **{**common, **ov.get(1, {})})]
    return [stage_config(s, cfg.preset, cfg.stage_multiplier, cfg.batch_size,
                         **{**common, **ov.get(s, {})}) for s in (1, 2, 3)]


# ---------------------------------------------------------------------------
# optimizer and schedule


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to 0."""
    if not 0 <= warmup_steps <= total_steps:
        raise ValidationError(f"warmup_steps {warmup_steps} outside [0, {total_steps}]")
    if warmup_steps and step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return base_lr
    progress = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def decays(name: str, param: Tensor) -> bool:
    """Weight decay skips vectors, the class/position tokens and the mask."""
    return param.ndim >= 2 and name not in ("vit.cls", "vit.pos") and not name.startswith("mask.")


class AdamW:
    """Decoupled weight decay Adam with bias correction."""

    def __init__(self, eps: float = 1e-8):
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), weight_decay: float = 0.0,
             frozen=(), no_decay=None) -> None:
        b1, b2 = betas
        frozen = set(frozen)
        live = [(n, p) for n, p in params.items() if n not in frozen and p.grad is not None]
        for name, p in live:
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in parameter '{name}'")
        for name, p in live:
            g = p.grad
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            wd = weight_decay if (no_decay is None or name not in no_decay) else 0.0
            if wd:
                p.data *= (1 - lr * wd)
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype, copy=False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state(self, arrays: dict[str, np.ndarray], steps: dict[str, int]) -> None:
        self.m, self.v, self.t = {}, {}, {}
        for name, t in steps.items():
            self.m[name] = np.array(arrays[f"adam.m.{name}"])
            self.v[name] = np.array(arrays[f"adam.v.{name}"])
            self.t[name] = int(t)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params.values() if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g *= scale
    return total


# ---------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    train: LabeledSampleSet
    val: LabeledSampleSet
    num_classes: int
    norm: Standardizer
    upsample: int = 3

    @property
    def bands(self) -> int:
        return self.train.num_channels

    def images(self, split: str, idx) -> np.ndarray:
        sset = self.train if split == "train" else self.val
        return upsample_to_27(sset.windows(idx), self.upsample)


def load_source(cfg: RunConfig):
    """(cube data (H, W, C), label map) for the configured data source."""
    src = cfg.data
    if "synthetic" in src:
        s = dict(src["synthetic"])
        cube, labels = gen_synthetic(s.get("classes", 8), s.get("bands", 64), s.get("size", 96),
                                     s.get("noise_sigma", 0.01), s.get("seed", 7))
        return cube.data, labels
    if "cube" in src and "labels" in src:
        return load_cube(src["cube"]).data, load_labels(src["labels"])
    raise ValidationError("data must give either 'synthetic' parameters or 'cube' and 'labels' paths")


def prepare_data(cfg: RunConfig, data: np.ndarray | None = None, labels: np.ndarray | None = None,
                 norm: Standardizer | None = None) -> Dataset:
    """Windows, split and standardization; ``norm`` reuses stored statistics."""
    if data is None:
        data, labels = load_source(cfg)
    data = np.asarray(data, dtype=np.float64)
    if cfg.baseline == "cs":
        # every input the classifier sees is a CS reconstruction
        cs_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4]))
        data = cs_reconstruct_cube(data, cfg.cs_tile, cfg.d_tar, cs_rng)
    train, val = extract_samples(data, labels, cfg.window, cfg.split, seed=cfg.seed)
    if norm is None:
        norm = Standardizer.fit(train)
    padded = norm.apply(train.padded, np.float32)
    num_classes = int(np.max(labels))
    return Dataset(train.with_padded(padded), val.with_padded(padded), num_classes, norm, cfg.upsample)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    oa: float
    per_class: np.ndarray
    confusion: np.ndarray

    @property
    def total(self) -> int:
        return int(self.confusion.sum())


def evaluate_predictions(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> EvalReport:
    pred = np.asarray(pred, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValidationError("cannot evaluate an empty sample set")
    if pred.shape != labels.shape:
        raise ValidationError(f"{pred.shape[0]} predictions for {labels.shape[0]} labels")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (labels, pred), 1)
    support = conf.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, np.diag(conf) / np.maximum(support, 1), np.nan)
    return EvalReport(float(np.trace(conf)) / labels.size, per_class, conf)


def predict_logits(model: Model, images: np.ndarray, mode: str = "auto", fixed: FixedMask | None = None,
                   dmd: bool = False, **dmd_kw) -> np.ndarray:
    with ad.no_grad():
        if dmd:
            return model.forward_dmd(images, fixed=fixed, **dmd_kw).data
        logits, _ = model.forward(images, train=False, mask_mode=mode, fixed=fixed)
        return logits.data


def evaluate(model: Model, dataset: Dataset, split: str = "val", mode: str = "auto",
             fixed: FixedMask | None = None, dmd: bool = False, batch: int = 256,
             return_logits: bool = False, **dmd_kw):
    """OA, per-class accuracy and confusion matrix over one split.

    ``mode="dense"`` evaluates without masking (before mask); ``fixed``
    uses the given deployment mask with sampling disabled; ``dmd=True``
    routes acquisition through the DMD simulator.
    """
    sset = dataset.train if split == "train" else dataset.val
    n = len(sset)
    if n == 0:
        raise ValidationError("cannot evaluate an empty sample set")
    chunks = []
    for start in range(0, n, batch):
        idx = np.arange(start, min(n, start + batch))
        chunks.append(predict_logits(model, dataset.images(split, idx).astype(model.dtype),
                                     mode, fixed, dmd, **dmd_kw))
    logits = np.concatenate(chunks)
    report = evaluate_predictions(logits.argmax(axis=1), sset.labels, dataset.num_classes)
    return (report, logits) if return_logits else report


def deployment_report(model: Model, dataset: Dataset, split: str = "val", batch: int = 256,
                      **dmd_kw) -> dict:
    """Before-mask (dense) and after-mask (fixed deployment mask) OA in 64-bit."""
    m64 = model.astype(np.float64)
    before = evaluate(m64, dataset, split, mode="dense", batch=batch)
    fm = m64.export_mask()
    via_dmd = m64.embed_mode == BINARIZED and m64.cfg.kind != "cs"
    after = evaluate(m64, dataset, split, mode="fixed", fixed=fm, dmd=via_dmd, batch=batch, **dmd_kw)
    return {"before": before, "after": after, "fixed": fm}


# ---------------------------------------------------------------------------
# stages


def _no_decay_names(params: dict[str, Tensor]) -> set[str]:
    return {n for n, p in params.items() if not decays(n, p)}


def _check_preconditions(model: Model, cfg: StageConfig) -> None:
    done = getattr(model, "completed_stage", 0)
    if cfg.stage_id >= 2 and done < cfg.stage_id - 1:
        raise PipelineError(f"stage {cfg.stage_id} needs stage {cfg.stage_id - 1} output "
                            f"(model has completed stage {done})")
    if cfg.stage_id >= 2 and model.cfg.kind == "lum" and model.mask is None:
        raise PipelineError("stage 2 needs the stage-1 mask")
    if cfg.stage_id >= 2 and model.cfg.kind in ("random", "mag") and model.fixed is None:
        raise PipelineError(f"stage {cfg.stage_id} of '{model.cfg.kind}' needs its fixed mask")


def nominal_d_ops(model: Model) -> float:
    kind = model.cfg.kind
    if kind == "du":
        return model.du.reduced_kernels / model.cfg.embed_dim
    if kind == "cs":
        return model.cfg.d_tar
    return model.export_mask().rate if (model.mask is not None or model.fixed is not None) else 1.0


def tau_at(run: RunConfig | None, stage: StageConfig, step: int, total: int) -> float | None:
    if run is None or run.tau_final is None or stage.stage_id != 1:
        return None
    frac = step / max(1, total - 1)
    return run.tau + (run.tau_final - run.tau) * frac


def apply_stage_mode(model: Model, cfg: StageConfig) -> None:
    model.set_embed_mode(cfg.embed_mode)
    model.backbone_cfg.drop_path_rate = cfg.drop_path
    if "mask" in cfg.frozen_sets and model.mask is not None:
        model.mask.freeze()


def train_step(model: Model, images: np.ndarray, targets: np.ndarray, rng, run: RunConfig | None,
               tau: float | None = None):
    """One forward/backward pass; returns (loss Tensor, D or None)."""
    logits, D = model.forward(images, train=True, rng=rng, tau=tau)
    loss = ad.cross_entropy(logits, targets)
    if isinstance(D, Tensor):
        d_tar = run.d_tar if run is not None else model.cfg.d_tar
        lam = run.lambda_ratio if run is not None else 5.0
        kind = run.ratio_loss if run is not None else "mse"
        loss = total_loss(loss, ratio_loss(D, d_tar, kind), lam)
    return loss, D


def run_stage(model: Model, dataset: Dataset, cfg: StageConfig, rng: np.random.Generator,
              run: RunConfig | None = None, metrics_path=None, on_step=None,
              optimizer: AdamW | None = None) -> list[dict]:
    """Train one stage; returns one metrics dict per epoch."""
    _check_preconditions(model, cfg)
    apply_stage_mode(model, cfg)
    params = model.parameters()
    frozen = {n for n in params if cfg.is_frozen(n)}
    if model.mask is not None and model.mask.frozen:
        frozen |= {n for n in params if n.startswith("mask.")}
    for n, p in params.items():
        p.requires_grad = n not in frozen
        p.grad = None
    no_decay = _no_decay_names(params)
    opt = optimizer if optimizer is not None else AdamW(cfg.eps)
    n = len(dataset.train)
    bs = min(cfg.batch_size, n)
    steps_per_epoch = n // bs  # drop the ragged tail
    total = steps_per_epoch * cfg.epochs
    warmup = steps_per_epoch * cfg.warmup_epochs
    history = []
    step = 0
    lr = 0.0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        losses, rates = [], []
        for b in range(steps_per_epoch):
            idx = order[b * bs:(b + 1) * bs]
            images = dataset.images("train", idx).astype(model.dtype)
            labels = dataset.train.labels[idx]
            images, targets = augment(images, labels, dataset.num_classes, cfg.augment, rng)
            tau = tau_at(run, cfg, step, total)
            loss, D = train_step(model, images, targets, rng, run, tau)
            loss.backward()
            if cfg.grad_clip:
                clip_grad_norm({k: p for k, p in params.items() if k not in frozen}, cfg.grad_clip)
            step += 1
            lr = lr_schedule(step, total, warmup, cfg.base_lr)
            opt.step(params, lr, cfg.betas, cfg.weight_decay, frozen, no_decay)
            for p in params.values():
                p.grad = None
            losses.append(loss.item())
            rates.append(float(np.mean(d_ops(D))) if D is not None else nominal_d_ops(model))
            if on_step is not None:
                on_step(model, cfg, epoch, step)
        report = evaluate(model, dataset, "val", batch=run.eval_batch if run else 256)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_oa": report.oa,
               "mean_d_ops": float(np.mean(rates)), "lr": lr, "embed_mode": model.embed_mode,
               "stage": cfg.stage_id}
        history.append(row)
        log.info("stage %d epoch %d/%d embed_mode=%s loss=%.4f val_oa=%.4f d_ops=%.4f lr=%.3g",
                 cfg.stage_id, epoch, cfg.epochs, model.embed_mode, row["train_loss"], row["val_oa"],
                 row["mean_d_ops"], lr)
        if metrics_path is not None:
            write_metrics(metrics_path, history)
    model.completed_stage = cfg.stage_id
    return history


def _fmt(x) -> str:
    return str(x) if isinstance(x, (int, np.integer)) else repr(float(x))


def write_metrics(path, history: list[dict]) -> None:
    lines = [METRICS_MAGIC, ",".join(METRICS_COLUMNS)]
    for row in history:
        lines.append(",".join(_fmt(row[c]) for c in METRICS_COLUMNS))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != METRICS_MAGIC:
        raise ValidationError(f"{path}: missing {METRICS_MAGIC} header")
    cols = lines[1].split(",")
    return [{c: (int(v) if c == "epoch" else float(v)) for c, v in zip(cols, ln.split(","))}
            for ln in lines[2:] if ln]


# ---------------------------------------------------------------------------
# checkpoints


def model_checkpoint(model: Model, run: RunConfig | None = None, norm: Standardizer | None = None,
                     optimizer: AdamW | None = None, rng: np.random.Generator | None = None,
                     stage: int = 0, epoch: int = 0) -> ckpt_io.CheckpointData:
    arrays = {f"param.{k}": v for k, v in model.state_arrays().items()}
    if model.fixed is not None:
        arrays["fixed_mask"] = model.fixed.D
    if norm is not None:
        arrays["norm.mean"] = np.asarray(norm.mean, dtype=np.float64)
        arrays["norm.std"] = np.asarray(norm.std, dtype=np.float64)
    meta = {
        "format": 1,
        "model_config": model.cfg.to_dict(),
        "dtype": model.dtype.str,
        "embed_mode": model.embed_mode,
        "mask_frozen": bool(model.mask is not None and model.mask.frozen),
        "completed_stage": int(getattr(model, "completed_stage", 0)),
        "stage": int(stage),
        "epoch": int(epoch),
        "run_config": run.to_dict() if run is not None else None,
        "rng": rng.bit_generator.state if rng is not None else None,
        "adam_steps": dict(optimizer.t) if optimizer is not None else {},
    }
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    return ckpt_io.CheckpointData(meta, arrays)


def save_checkpoint(path, model: Model, **kw) -> None:
    ckpt_io.save(path, model_checkpoint(model, **kw))


@dataclass
class LoadedCheckpoint:
    model: Model
    meta: dict
    norm: Standardizer | None
    optimizer: AdamW
    rng: np.random.Generator | None
    run: RunConfig | None


def restore(data: ckpt_io.CheckpointData) -> LoadedCheckpoint:
    meta = data.meta
    mcfg = ModelConfig.from_dict(meta["model_config"])
    model = Model(mcfg, np.random.default_rng(0), np.dtype(meta["dtype"]))
    params = {k[len("param."):]: v for k, v in data.arrays.items() if k.startswith("param.")}
    model.load_arrays(params)
    model.set_embed_mode(meta["embed_mode"])
    model.completed_stage = meta["completed_stage"]
    if meta["mask_frozen"] and model.mask is not None:
        model.mask.freeze()
    if "fixed_mask" in data.arrays:
        model.fixed = FixedMask(data.arrays["fixed_mask"])
    norm = None
    if "norm.mean" in data.arrays:
        norm = Standardizer(data.arrays["norm.mean"], data.arrays["norm.std"])
    opt = AdamW()
    opt.load_state(data.arrays, meta.get("adam_steps", {}))
    rng = None
    if meta.get("rng") is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
    run = RunConfig.from_dict(meta["run_config"]) if meta.get("run_config") else None
    return LoadedCheckpoint(model, meta, norm, opt, rng, run)


def load_checkpoint(path) -> LoadedCheckpoint:
    return restore(ckpt_io.load(path))


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class PipelineResult:
    model: Model
    dataset: Dataset
    histories: list[list[dict]]
    checkpoints: list[str]
    metrics: list[str]


def _seed_streams(seed: int):
    ss = np.random.SeedSequence(seed)
    init_ss, train_ss, mask_ss = ss.spawn(3)
    return (np.random.default_rng(init_ss), np.random.default_rng(train_ss),
            np.random.default_rng(mask_ss))


def build_model(cfg: RunConfig, dataset: Dataset, rng: np.random.Generator) -> Model:
    return Model(cfg.model_config(dataset.bands, dataset.num_classes), rng)


def set_fixed_baseline_mask(model: Model, dataset: Dataset, rng: np.random.Generator, batch: int = 256) -> None:
    """Random or magnitude mask, fixed once the dense stage-1 model exists."""
    N, C = model.cfg.num_tokens, model.embed.num_kernels
    if model.cfg.kind == "random":
        model.fixed = random_mask(N, C, model.cfg.d_tar, rng)
    elif model.cfg.kind == "mag":
        n = len(dataset.train)
        batches = (dataset.images("train", np.arange(s, min(n, s + batch))).astype(model.dtype)
                   for s in range(0, n, batch))
        model.fixed = magnitude_mask(magnitude_stats(model.embed_tokens, batches), model.cfg.d_tar)


def run_pipeline(cfg: RunConfig, dataset: Dataset | None = None, out_dir=None,
                 on_step=None) -> PipelineResult:
    cfg.validate(require_seed=True)
    out_dir = out_dir if out_dir is not None else cfg.out
    os.makedirs(out_dir, exist_ok=True)
    dataset = dataset if dataset is not None else prepare_data(cfg)
    init_rng, train_rng, mask_rng = _seed_streams(cfg.seed)
    model = build_model(cfg, dataset, init_rng)
    histories, ckpts, metrics = [], [], []
    for stage in stages_for(cfg):
        if stage.stage_id == 2 and model.cfg.kind in ("random", "mag"):
            set_fixed_baseline_mask(model, dataset, mask_rng, cfg.eval_batch)
        mpath = os.path.join(out_dir, f"metrics_stage{stage.stage_id}.csv")
        opt = AdamW(stage.eps)
        hist = run_stage(model, dataset, stage, train_rng, cfg, mpath, on_step, opt)
        cpath = os.path.join(out_dir, f"stage{stage.stage_id}.ckpt")
        save_checkpoint(cpath, model, run=cfg, norm=dataset.norm, optimizer=opt, rng=train_rng,
                        stage=stage.stage_id, epoch=stage.epochs)
        histories.append(hist)
        ckpts.append(cpath)
        metrics.append(mpath)
    final = os.path.join(out_dir, "model.ckpt")
    save_checkpoint(final, model, run=cfg, norm=dataset.norm, stage=model.completed_stage)
    ckpts.append(final)
    return PipelineResult(model, dataset, histories, ckpts, metrics)


def stage_summary(history: list[dict]) -> dict:
    return {k: history[-1][k] for k in ("train_loss", "val_oa", "mean_d_ops")} if history else {}


__all__ = [
    "AdamW", "Dataset", "EvalReport", "StageConfig", "deployment_report", "evaluate",
    "evaluate_predictions", "load_checkpoint", "lr_schedule", "prepare_data", "run_pipeline",
    "run_stage", "save_checkpoint", "stage_config", "stages_for",
]
