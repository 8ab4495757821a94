"""Training loop, learning-rate schedule, checkpoints, and evaluation.

Batches are regrouped by routing decision so every sub-network sees a
homogeneous micro-batch; gradients accumulate across groups before a single
optimizer step, preserving the configured effective batch size. Checkpoints
are a directory holding a JSON header plus one raw little-endian blob of all
named arrays, so they can be read back without torch.
"""

from __future__ import annotations

import json
import logging
import math
import os
from contextlib import nullcontext
from dataclasses import dataclass, field, replace
from hashlib import sha256
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import imaging
from .backbone import SIZE_DIVISOR, BackboneConfig, DerainModel
from .data import DatasetManifest, ImagePair, gt_mask
from .losses import LossSchedule, total_loss
from .perception import route_from_embeddings
from .vlm import PromptSet, builtin_prompt_set, create_encoder, load_prompt_set, prompt_set_hash

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
HEADER_FILE = "header.json"
PARAMS_FILE = "params.bin"

LOSS_KINDS = ("dls", "l1", "l2", "huber")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 0.01
    adam_betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 8
    epochs: int = 300
    warmup_epochs: int = 15
    crop: int = 128
    flip_p: float = 0.5
    mixed_precision: bool = False
    rpn_on: bool = True
    mgca_on: bool = True
    loss: str = "dls"
    beta: float = 0.8
    eta: float = 2.3
    seed: int = 0
    lr_min: float = 1e-6
    grad_clip: float = 1.0
    backend: str = "stub"
    prompt_set: str | None = None  # builtin name, JSON path, or None for the default
    eval_every: int = 0  # epochs between in-training evals; 0 = final only
    checkpoint_every: int = 0  # epochs between checkpoint refreshes; 0 = final only
    model: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("need 0 <= warmup_epochs < epochs")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.crop % SIZE_DIVISOR:
            raise ValueError(f"crop must divide by {SIZE_DIVISOR}, got {self.crop}")
        if not 0.0 <= self.flip_p <= 1.0:
            raise ValueError("flip_p must lie in [0, 1]")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "adam_betas": list(self.adam_betas),
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "warmup_epochs": self.warmup_epochs,
            "crop": self.crop,
            "flip_p": self.flip_p,
            "mixed_precision": self.mixed_precision,
            "rpn_on": self.rpn_on,
            "mgca_on": self.mgca_on,
            "loss": self.loss,
            "beta": self.beta,
            "eta": self.eta,
            "seed": self.seed,
            "lr_min": self.lr_min,
            "grad_clip": self.grad_clip,
            "backend": self.backend,
            "prompt_set": self.prompt_set,
            "eval_every": self.eval_every,
            "checkpoint_every": self.checkpoint_every,
            "model": self.model.to_dict(),
        }

    @classmethod
    def from_dict(cls, record: dict) -> "TrainConfig":
        record = dict(record)
        model = record.pop("model", None)
        kwargs = {}
        for name in cls.__dataclass_fields__:
            if name == "model":
                continue
            if name in record:
                kwargs[name] = record.pop(name)
        if record:
            raise ValueError(f"unknown config keys: {sorted(record)}")
        if "adam_betas" in kwargs:
            kwargs["adam_betas"] = tuple(kwargs["adam_betas"])
        cfg = cls(**kwargs)
        if model is not None:
            cfg = replace(cfg, model=BackboneConfig.from_dict(model))
        return cfg

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "TrainConfig":
        path = Path(path)
        if path.suffix == ".json":
            with open(path) as handle:
                return cls.from_dict(json.load(handle))
        if path.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:
                import tomli as tomllib
            with open(path, "rb") as handle:
                return cls.from_dict(tomllib.load(handle))
        raise ValueError(f"config file must be .json or .toml, got {path.suffix!r}")


def config_hash(cfg: TrainConfig) -> str:
    payload = json.dumps(cfg.to_dict(), sort_keys=True)
    return sha256(payload.encode("utf-8")).hexdigest()


def lr_at(epoch_fraction: float, cfg: TrainConfig) -> float:
    """Linear warmup to lr, then cosine decay to the lr_min floor."""
    if not 0 <= epoch_fraction <= cfg.epochs:
        raise ValueError(f"epoch fraction {epoch_fraction} outside [0, {cfg.epochs}]")
    if cfg.warmup_epochs > 0 and epoch_fraction <= cfg.warmup_epochs:
        return cfg.lr * (epoch_fraction / cfg.warmup_epochs)
    progress = (epoch_fraction - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs)
    return cfg.lr_min + (cfg.lr - cfg.lr_min) * 0.5 * (1.0 + math.cos(math.pi * progress))


def resolve_prompt_set(cfg: TrainConfig) -> PromptSet:
    if cfg.prompt_set is None:
        return builtin_prompt_set()
    if cfg.prompt_set in ("p1", "p2", "p3"):
        return builtin_prompt_set(cfg.prompt_set)
    return load_prompt_set(cfg.prompt_set)


# ---------------------------------------------------------------------------
# checkpoint serialization


@dataclass
class Checkpoint:
    config: TrainConfig
    config_hash: str
    prompt_hash: str
    tau: int
    epoch: int
    numpy_rng_state: dict
    arrays: dict[str, np.ndarray]


def _named_arrays(model: nn.Module, optimizer: torch.optim.Optimizer) -> list[tuple[str, np.ndarray]]:
    arrays = [
        (f"model/{name}", tensor.detach().cpu().numpy())
        for name, tensor in model.state_dict().items()
    ]
    param_names = [name for name, _ in model.named_parameters()]
    for index, state in optimizer.state_dict()["state"].items():
        pname = param_names[index]
        for key in ("exp_avg", "exp_avg_sq"):
            arrays.append((f"opt/{pname}/{key}", state[key].detach().cpu().numpy()))
        step_val = state["step"]
        step_val = float(step_val.item()) if torch.is_tensor(step_val) else float(step_val)
        arrays.append((f"opt/{pname}/step", np.asarray(step_val, dtype=np.float64)))
    arrays.append(("rng/torch", torch.get_rng_state().numpy()))
    return arrays


def _little_endian(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def save_checkpoint(
    path: str | os.PathLike,
    model: nn.Module,
    optimizer: torch.optim.Optimizer,
    cfg: TrainConfig,
    tau: int,
    epoch: int,
    np_rng: np.random.Generator,
    prompt_hash: str,
) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = []
    offset = 0
    blobs = []
    for name, arr in _named_arrays(model, optimizer):
        arr = _little_endian(arr)
        raw = arr.tobytes()
        manifest.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "prompt_hash": prompt_hash,
        "tau": tau,
        "epoch": epoch,
        "numpy_rng": np_rng.bit_generator.state,
        "arrays": manifest,
    }
    with open(path / PARAMS_FILE, "wb") as handle:
        for raw in blobs:
            handle.write(raw)
    with open(path / HEADER_FILE, "w") as handle:
        json.dump(header, handle, indent=1)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    with open(path / HEADER_FILE) as handle:
        header = json.load(handle)
    if header["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {header['format_version']}")
    blob = (path / PARAMS_FILE).read_bytes()
    arrays = {}
    for entry in header["arrays"]:
        raw = blob[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(
            entry["shape"]
        ).copy()
    return Checkpoint(
        config=TrainConfig.from_dict(header["config"]),
        config_hash=header["config_hash"],
        prompt_hash=header["prompt_hash"],
        tau=header["tau"],
        epoch=header["epoch"],
        numpy_rng_state=header["numpy_rng"],
        arrays=arrays,
    )


def restore_model(checkpoint: Checkpoint) -> DerainModel:
    model = DerainModel(checkpoint.config.model)
    state = {
        name[len("model/") :]: torch.from_numpy(arr)
        for name, arr in checkpoint.arrays.items()
        if name.startswith("model/")
    }
    model.load_state_dict(state)
    return model


def build_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(), lr=cfg.lr, betas=cfg.adam_betas, weight_decay=cfg.weight_decay
    )


def restore_optimizer(
    optimizer: torch.optim.Optimizer, model: nn.Module, checkpoint: Checkpoint
) -> None:
    param_names = [name for name, _ in model.named_parameters()]
    state: dict[int, dict] = {}
    for index, pname in enumerate(param_names):
        key = f"opt/{pname}/exp_avg"
        if key not in checkpoint.arrays:
            continue
        state[index] = {
            "step": torch.tensor(checkpoint.arrays[f"opt/{pname}/step"].reshape(()).item()),
            "exp_avg": torch.from_numpy(checkpoint.arrays[key]),
            "exp_avg_sq": torch.from_numpy(checkpoint.arrays[f"opt/{pname}/exp_avg_sq"]),
        }
    optimizer.load_state_dict(
        {"state": state, "param_groups": optimizer.state_dict()["param_groups"]}
    )


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: DerainModel
    checkpoint_dir: Path
    log_path: Path
    epoch_log_path: Path
    census: list[list[int]]
    final_metrics: imaging.MetricsReport
    prompt_hash: str


class _PairCache:
    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._cache: dict[str, ImagePair] = {}

    def get(self, index: int) -> ImagePair:
        entry = self.manifest.entries[index]
        if entry.id not in self._cache:
            self._cache[entry.id] = self.manifest.load_pair(entry)
        return self._cache[entry.id]


def _augmented_sample(
    pair: ImagePair, cfg: TrainConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    h, w = pair.rainy.shape[:2]
    if h < cfg.crop or w < cfg.crop:
        raise ValueError(
            f"pair {pair.id!r} ({h}x{w}) smaller than the {cfg.crop} training crop"
        )
    rainy, clean = imaging.random_crop_pair(pair.rainy, pair.clean, cfg.crop, rng)
    return imaging.random_flip_pair(rainy, clean, cfg.flip_p, rng)


def _to_batch(samples: list[tuple[np.ndarray, np.ndarray]]) -> tuple[torch.Tensor, ...]:
    rainy = np.stack([s[0] for s in samples]).transpose(0, 3, 1, 2)
    clean = np.stack([s[1] for s in samples]).transpose(0, 3, 1, 2)
    masks = np.stack(
        [gt_mask(ImagePair(rainy=r, clean=c, id="crop")).values for r, c in samples]
    )[:, None]
    return (
        torch.from_numpy(rainy).float(),
        torch.from_numpy(clean).float(),
        torch.from_numpy(masks).float(),
    )


def _mask_pyramid(gt_full: torch.Tensor) -> list[torch.Tensor]:
    return [
        gt_full,
        torch.nn.functional.max_pool2d(gt_full, 2),
        torch.nn.functional.max_pool2d(gt_full, 4),
    ]


def train(
    cfg: TrainConfig,
    manifest: DatasetManifest,
    out_dir: str | os.PathLike,
    resume_from: str | os.PathLike | None = None,
    prompt_set: PromptSet | None = None,
    stop_after_epochs: int | None = None,
) -> TrainResult:
    """Run the training loop; see TrainConfig for the knobs.

    stop_after_epochs halts at that epoch boundary with a checkpoint on disk,
    mimicking an interrupted run that resume_from can continue bit-exactly.
    """
    if len(manifest) == 0:
        raise ValueError("cannot train on an empty dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    prompts = prompt_set or resolve_prompt_set(cfg)
    if cfg.model.n_subnets != len(prompts):
        raise ValueError(
            f"model has {cfg.model.n_subnets} sub-networks but the prompt set "
            f"{prompts.name!r} defines {len(prompts)}"
        )
    phash = prompt_set_hash(prompts)
    encoder = create_encoder(cfg.backend, seed=cfg.seed)
    txt_embs = encoder.encode_prompts(prompts)

    torch.manual_seed(cfg.seed)
    model = DerainModel(cfg.model)
    optimizer = build_optimizer(model, cfg)
    np_rng = np.random.default_rng(cfg.seed)

    steps_per_epoch = math.ceil(len(manifest) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    schedule = LossSchedule(beta=cfg.beta, eta=cfg.eta, total_steps=total_steps)

    tau = 0
    start_epoch = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.config_hash != config_hash(cfg):
            raise ValueError("checkpoint was produced with a different training config")
        model.load_state_dict(
            {
                name[len("model/") :]: torch.from_numpy(arr)
                for name, arr in ckpt.arrays.items()
                if name.startswith("model/")
            }
        )
        restore_optimizer(optimizer, model, ckpt)
        torch.set_rng_state(torch.from_numpy(ckpt.arrays["rng/torch"]))
        np_rng.bit_generator.state = ckpt.numpy_rng_state
        tau = ckpt.tau
        start_epoch = ckpt.epoch

    cache = _PairCache(manifest)
    log_path = out_dir / "steps.jsonl"
    epoch_log_path = out_dir / "epochs.jsonl"
    log_mode = "a" if resume_from is not None else "w"
    checkpoint_dir = out_dir / "checkpoint"
    census_history: list[list[int]] = []
    autocast = (
        torch.autocast("cpu", dtype=torch.bfloat16) if cfg.mixed_precision else nullcontext()
    )

    completed_epoch = start_epoch
    with open(log_path, log_mode) as step_log, open(epoch_log_path, log_mode) as epoch_log:
        for epoch in range(start_epoch, cfg.epochs):
            order = np_rng.permutation(len(manifest))
            census = [0] * cfg.model.n_subnets
            epoch_totals: list[float] = []
            for batch_start in range(0, len(order), cfg.batch_size):
                batch_ids = order[batch_start : batch_start + cfg.batch_size]
                groups: dict[int, list[tuple[np.ndarray, np.ndarray]]] = {}
                for index in batch_ids:
                    sample = _augmented_sample(cache.get(int(index)), cfg, np_rng)
                    if cfg.rpn_on:
                        decision = route_from_embeddings(
                            encoder.encode_image(sample[0]), txt_embs
                        )
                        selected = decision.selected
                    else:
                        selected = 0
                    census[selected] += 1
                    groups.setdefault(selected, []).append(sample)

                lr = lr_at((tau + 1) / steps_per_epoch, cfg)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                optimizer.zero_grad(set_to_none=True)

                batch_total = sum(len(g) for g in groups.values())
                agg = {"total": 0.0, "recon": 0.0, "bce": [0.0, 0.0, 0.0]}
                exponent = float("nan")
                for selected, samples in sorted(groups.items()):
                    rainy, clean, gt_full = _to_batch(samples)
                    weight = len(samples) / batch_total
                    with autocast:
                        pred, mask_preds = model(rainy, selected, use_mgca=cfg.mgca_on)
                        mask_gts = _mask_pyramid(gt_full) if cfg.mgca_on else []
                        breakdown = total_loss(
                            pred, clean, mask_preds, mask_gts, schedule, tau, cfg.loss
                        )
                    (breakdown.total * weight).backward()
                    agg["total"] += breakdown.total.item() * weight
                    agg["recon"] += breakdown.reconstruction.item() * weight
                    for i, bce in enumerate(breakdown.mask_bce):
                        agg["bce"][i] += bce.item() * weight
                    exponent = breakdown.current_exponent

                if cfg.grad_clip > 0:
                    nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                optimizer.step()
                epoch_totals.append(agg["total"])
                step_log.write(
                    json.dumps(
                        {
                            "step": tau,
                            "tau": tau,
                            "exponent": None if math.isnan(exponent) else exponent,
                            "total": agg["total"],
                            "recon": agg["recon"],
                            "bce": agg["bce"],
                            "lr": lr,
                        }
                    )
                    + "\n"
                )
                tau += 1

            census_history.append(census)
            for idx, count in enumerate(census):
                if count == 0:
                    logger.warning("sub-network %d received no images in epoch %d", idx, epoch)

            epoch_row = {
                "epoch": epoch,
                "mean_total": float(np.mean(epoch_totals)),
                "route_counts": census,
                "psnr": None,
                "ssim": None,
            }
            if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
                report = evaluate_model(model, manifest, prompts, encoder, cfg)
                epoch_row["psnr"] = report.psnr_mean
                epoch_row["ssim"] = report.ssim_mean
            epoch_log.write(json.dumps(epoch_row) + "\n")
            epoch_log.flush()

            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(
                    checkpoint_dir, model, optimizer, cfg, tau, epoch + 1, np_rng, phash
                )
            completed_epoch = epoch + 1
            if stop_after_epochs is not None and completed_epoch >= stop_after_epochs:
                break

    save_checkpoint(checkpoint_dir, model, optimizer, cfg, tau, completed_epoch, np_rng, phash)
    final_metrics = evaluate_model(model, manifest, prompts, encoder, cfg)
    final_metrics.write_csv(out_dir / "metrics.csv")
    final_metrics.write_json(out_dir / "metrics.json")
    return TrainResult(
        model=model,
        checkpoint_dir=checkpoint_dir,
        log_path=log_path,
        epoch_log_path=epoch_log_path,
        census=census_history,
        final_metrics=final_metrics,
        prompt_hash=phash,
    )


# ---------------------------------------------------------------------------
# evaluation


def pad_to_divisor(x: torch.Tensor, divisor: int = SIZE_DIVISOR) -> tuple[torch.Tensor, int, int]:
    """Reflect-pad bottom/right so spatial dims divide evenly; returns original dims."""
    _, _, h, w = x.shape
    pad_h = (divisor - h % divisor) % divisor
    pad_w = (divisor - w % divisor) % divisor
    if pad_h or pad_w:
        mode = "reflect" if pad_h < h and pad_w < w else "replicate"
        x = torch.nn.functional.pad(x, (0, pad_w, 0, pad_h), mode=mode)
    return x, h, w


def derain_image(
    model: DerainModel,
    img: np.ndarray,
    prompts: PromptSet,
    encoder,
    rpn_on: bool = True,
    mgca_on: bool = True,
) -> tuple[np.ndarray, list[np.ndarray], int]:
    """Restore one image of any size; returns (restored, full-res masks, route)."""
    imaging.validate_image(img)
    if rpn_on:
        decision = route_from_embeddings(
            encoder.encode_image(img), encoder.encode_prompts(prompts)
        )
        selected = decision.selected
    else:
        selected = 0
    x = torch.from_numpy(img.transpose(2, 0, 1)[None]).float()
    x, h, w = pad_to_divisor(x)
    model.eval()
    with torch.no_grad():
        pred, mask_preds = model(x, selected, use_mgca=mgca_on)
    restored = pred[0].numpy().transpose(1, 2, 0)[:h, :w].astype(np.float64)
    restored = np.clip(restored, 0.0, 1.0)
    masks = []
    for factor, mask in zip((1, 2, 4), mask_preds):
        values = mask[0, 0].numpy().astype(np.float64)
        full = np.repeat(np.repeat(values, factor, axis=0), factor, axis=1)
        masks.append(full[:h, :w])
    return restored, masks, selected


def evaluate_model(
    model: DerainModel,
    manifest: DatasetManifest,
    prompts: PromptSet,
    encoder,
    cfg: TrainConfig,
) -> imaging.MetricsReport:
    report = imaging.MetricsReport()
    for entry in manifest.entries:
        pair = manifest.load_pair(entry)
        restored, _, _ = derain_image(
            model, pair.rainy, prompts, encoder, rpn_on=cfg.rpn_on, mgca_on=cfg.mgca_on
        )
        report.add(pair.id, imaging.psnr(restored, pair.clean), imaging.ssim(restored, pair.clean))
    return report


def evaluate_checkpoint(
    checkpoint_dir: str | os.PathLike,
    manifest: DatasetManifest,
    prompt_set: PromptSet | None = None,
    allow_prompt_mismatch: bool = False,
) -> imaging.MetricsReport:
    ckpt = load_checkpoint(checkpoint_dir)
    cfg = ckpt.config
    prompts = prompt_set or resolve_prompt_set(cfg)
    if prompt_set_hash(prompts) != ckpt.prompt_hash:
        if not allow_prompt_mismatch:
            raise ValueError(
                "prompt set does not match the one this model was trained with; "
                "pass allow_prompt_mismatch=True to evaluate anyway"
            )
        logger.warning("evaluating with a prompt set different from training")
    model = restore_model(ckpt)
    encoder = create_encoder(cfg.backend, seed=cfg.seed)
    return evaluate_model(model, manifest, prompts, encoder, cfg)


def baseline_report(manifest: DatasetManifest) -> imaging.MetricsReport:
    """Rainy-vs-clean metrics: the no-op restoration baseline."""
    report = imaging.MetricsReport()
    for entry in manifest.entries:
        pair = manifest.load_pair(entry)
        report.add(
            pair.id, imaging.psnr(pair.rainy, pair.clean), imaging.ssim(pair.rainy, pair.clean)
        )
    return report
