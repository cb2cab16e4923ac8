"""Multi-scale EPE objective, training loop, checkpoints and min-EPE evaluation."""
from __future__ import annotations

import csv
import io
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import blur_synth, flow_io
from .autodiff import DTYPE, Tensor
from .autodiff.ops import resize_matrix
from .model import FlowPyramid, ModelConfig, estimate_fullres, forward, init_params

logger = logging.getLogger(__name__)

DEFAULT_LOSS_WEIGHTS = (0.005, 0.01, 0.02, 0.04, 0.08, 0.32)  # level 1 .. level 6


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointFormatError(ValueError):
    pass


class IncompatibleCheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    loss_weights: tuple = DEFAULT_LOSS_WEIGHTS
    lr: float = 1e-4
    lr_halving_epochs: tuple = (20, 30, 35)
    epochs: int = 40
    batch: int = 4
    crop: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 4e-4
    seed: int = 0
    augment: bool = True  # random horizontal / vertical flips

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        self.lr_halving_epochs = tuple(int(e) for e in self.lr_halving_epochs)
        if any(w <= 0 for w in self.loss_weights):
            raise ValueError("loss weights must be strictly positive")
        halvings = self.lr_halving_epochs
        if any(b <= a for a, b in zip(halvings, halvings[1:])):
            raise ValueError(f"lr halving epochs must be strictly increasing, got {halvings}")
        if halvings and self.epochs > 0 and halvings[-1] >= self.epochs:
            raise ValueError(f"lr halving epochs must be < epochs ({self.epochs}), got {halvings}")
        if self.batch < 1 or self.crop < 1 or self.epochs < 0:
            raise ValueError("batch and crop must be >= 1 and epochs >= 0")


def lr_at(epoch: int, base: float, halvings: Sequence[int]) -> float:
    """Learning rate for a 0-based ``epoch``: halved once per milestone already reached."""
    return base * 0.5 ** sum(1 for h in halvings if h <= epoch)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def downsample_flow(gt: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinearly resize an (N,2,H,W) flow; vectors keep full-resolution units."""
    return resize_matrix(gt.shape[2], h) @ gt @ resize_matrix(gt.shape[3], w).T


def multiscale_epe_loss(pyramid: FlowPyramid, gt: np.ndarray, weights: Sequence[float]) -> Tensor:
    """Weighted sum over levels of the mean end-point error.

    ``weights[l-1]`` scales level ``l``; the refined flow is an extra level-1
    term with the same weight.
    """
    if len(weights) != len(pyramid.flows):
        raise ValueError(f"{len(weights)} loss weights for {len(pyramid.flows)} levels")
    gt = np.asarray(gt, dtype=DTYPE)
    terms = [(f, w) for f, w in zip(pyramid.flows, weights)] + [(pyramid.refined, weights[0])]
    total = None
    cache = {}
    for flow, w in terms:
        size = flow.shape[2:]
        if size not in cache:
            cache[size] = downsample_flow(gt, *size)
        term = ad.scale(ad.mean(ad.endpoint_error(flow, cache[size])), w)
        total = term if total is None else ad.add(total, term)
    return total


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) float32
    flows: np.ndarray  # (N, 2, H, W) float32

    def __len__(self) -> int:
        return len(self.images)


def center_crop(arr: np.ndarray, crop: int) -> np.ndarray:
    h, w = arr.shape[-2:]
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} larger than sample {h}x{w}")
    top, left = (h - crop) // 2, (w - crop) // 2
    return arr[..., top:top + crop, left:left + crop]


def load_dataset(manifest, crop: Optional[int] = None) -> Dataset:
    images, flows = [], []
    for img_path, flo_path in blur_synth.read_manifest(manifest):
        images.append(flow_io.read_ppm(img_path).transpose(2, 0, 1).astype(DTYPE) / 255.0)
        flows.append(flow_io.read_flo(flo_path).transpose(2, 0, 1))
    if not images:
        return Dataset(np.zeros((0, 3, 1, 1), DTYPE), np.zeros((0, 2, 1, 1), DTYPE))
    images, flows = np.stack(images), np.stack(flows)
    if crop is not None:
        images, flows = center_crop(images, crop), center_crop(flows, crop)
    return Dataset(np.ascontiguousarray(images), np.ascontiguousarray(flows))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def mean_epe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean end-point error of one (2,H,W) prediction."""
    d = pred.astype(np.float64) - gt.astype(np.float64)
    return float(np.sqrt(d[0] ** 2 + d[1] ** 2).mean())


def min_epe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Better of the two temporal directions; the reversed one is the negated truth."""
    return min(mean_epe(pred, gt), mean_epe(pred, -gt))


def predict(params, cfg: ModelConfig, images: np.ndarray, batch: int = 8) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch):
        out.append(estimate_fullres(Tensor(images[i:i + batch]), cfg, params).data)
    return np.concatenate(out) if out else np.zeros((0, 2) + images.shape[2:], DTYPE)


@dataclass
class EvalResult:
    per_sample: list  # min-EPE per sample
    zero_baseline: list  # min-EPE of the all-zero prediction per sample

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_sample)) if self.per_sample else float("nan")

    @property
    def zero_mean(self) -> float:
        return float(np.mean(self.zero_baseline)) if self.zero_baseline else float("nan")


def evaluate_predictions(preds: np.ndarray, gts: np.ndarray) -> EvalResult:
    per, zero = [], []
    for p, g in zip(preds, gts):
        per.append(min_epe(p, g))
        zero.append(min_epe(np.zeros_like(g), g))
    return EvalResult(per, zero)


def evaluate(params, cfg: ModelConfig, data: Dataset) -> EvalResult:
    """Per-image min-EPE over both temporal directions, averaged over the dataset."""
    return evaluate_predictions(predict(params, cfg, data.images), data.flows)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"B2FC"
CKPT_VERSION = 1
ADAM_M = "__adam_m__/"
ADAM_V = "__adam_v__/"
META = "__meta__/"


@dataclass
class Checkpoint:
    params: dict  # name -> float32 ndarray
    adam: ad.AdamState
    epoch: int  # completed epochs
    seed: int

    def to_tensors(self) -> list:
        items = list(self.params.items())
        for name in self.params:
            if name in self.adam.m:
                items.append((ADAM_M + name, self.adam.m[name]))
                items.append((ADAM_V + name, self.adam.v[name]))
        counters = np.array([self.adam.step, self.epoch, self.seed], dtype=np.uint32).view(np.float32)
        hyper = np.array([self.adam.lr, self.adam.beta1, self.adam.beta2, self.adam.weight_decay,
                          self.adam.eps], dtype=np.float64).view(np.float32)
        items.append((META + "counters", counters))
        items.append((META + "adam_hyper", hyper))
        return items


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    items = ckpt.to_tensors()
    buf.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(items)))
    for name, arr in items:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)) + raw_name)
        buf.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    flow_io._atomic_write(path, checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    try:
        version, count = struct.unpack_from("<II", raw, 4)
        if version != CKPT_VERSION:
            raise CheckpointFormatError(f"{path}: unsupported version {version}")
        pos = 12
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4:pos + 4 + nlen].decode("utf-8")
            pos += 4 + nlen
            (ndim,) = struct.unpack_from("<I", raw, pos)
            shape = struct.unpack_from(f"<{ndim}q", raw, pos + 4)
            pos += 4 + 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(raw):
                raise CheckpointFormatError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointFormatError(f"{path}: truncated ({exc})") from None
    if pos != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - pos} trailing bytes")

    counters = tensors.pop(META + "counters").view(np.uint32)
    hyper = tensors.pop(META + "adam_hyper").view(np.float64)
    adam = ad.AdamState(lr=float(hyper[0]), beta1=float(hyper[1]), beta2=float(hyper[2]),
                        weight_decay=float(hyper[3]), eps=float(hyper[4]), step=int(counters[0]))
    params = {}
    for name, arr in tensors.items():
        if name.startswith(ADAM_M):
            adam.m[name[len(ADAM_M):]] = arr
        elif name.startswith(ADAM_V):
            adam.v[name[len(ADAM_V):]] = arr
        else:
            params[name] = arr
    return Checkpoint(params=params, adam=adam, epoch=int(counters[1]), seed=int(counters[2]))


def apply_checkpoint(ckpt: Checkpoint, params: dict) -> None:
    """Copy checkpoint values into ``params`` after checking names and shapes match."""
    missing = sorted(set(params) - set(ckpt.params))
    extra = sorted(set(ckpt.params) - set(params))
    wrong = sorted(n for n in set(params) & set(ckpt.params)
                   if params[n].shape != ckpt.params[n].shape)
    if missing or extra or wrong:
        lines = []
        if missing:
            lines.append(f"missing from checkpoint: {', '.join(missing[:10])}")
        if extra:
            lines.append(f"not in model: {', '.join(extra[:10])}")
        if wrong:
            lines.append("shape mismatch: " + ", ".join(
                f"{n} {ckpt.params[n].shape} vs {params[n].shape}" for n in wrong[:10]))
        raise IncompatibleCheckpointError("checkpoint does not match model config; " + "; ".join(lines))
    for name, t in params.items():
        t.data = ckpt.params[name].copy()
        t.zero_grad()


def make_checkpoint(params: dict, adam: ad.AdamState, epoch: int, seed: int) -> Checkpoint:
    return Checkpoint(
        params={n: t.data.copy() for n, t in params.items()},
        adam=ad.AdamState(lr=adam.lr, beta1=adam.beta1, beta2=adam.beta2,
                          weight_decay=adam.weight_decay, eps=adam.eps, step=adam.step,
                          m={k: v.copy() for k, v in adam.m.items()},
                          v={k: v.copy() for k, v in adam.v.items()}),
        epoch=epoch, seed=seed,
    )


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict
    adam: ad.AdamState
    history: list = field(default_factory=list)  # dicts with epoch, train_loss, val_min_epe, lr


METRICS_HEADER = ("epoch", "train_loss", "val_min_epe", "lr")


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def flip_batch(images: np.ndarray, flows: np.ndarray, flips: np.ndarray):
    """Flip samples; ``flips[i]`` is (horizontal, vertical).

    A horizontal flip negates u. The blurred image cannot tell the two time
    directions apart, so the whole field is negated as well, which keeps u's
    sign and negates v instead. A vertical flip negates v.
    """
    images, flows = images.copy(), flows.copy()
    for i, (h, v) in enumerate(flips):
        if h:
            images[i] = images[i, :, :, ::-1]
            flows[i] = flows[i, :, :, ::-1]
        if v:
            images[i] = images[i, :, ::-1, :]
            flows[i] = flows[i, :, ::-1, :]
        if h != v:
            flows[i, 1] = -flows[i, 1]
    return images, flows


def train_step(params: dict, cfg: ModelConfig, tcfg: TrainConfig, adam: ad.AdamState,
               images: np.ndarray, flows: np.ndarray) -> float:
    with ad.Tape() as tape:
        pyramid = forward(Tensor(images), cfg, params)
        loss = multiscale_epe_loss(pyramid, flows, tcfg.loss_weights)
    value = loss.item()
    if not np.isfinite(value):
        return value
    ad.backward(loss, tape)
    ad.adam_step(list(params.values()), adam)
    return value


def train(cfg: ModelConfig, train_data: Dataset, tcfg: TrainConfig,
          val_data: Optional[Dataset] = None, out_dir=None,
          resume: Optional[Checkpoint] = None, params: Optional[dict] = None,
          progress: Optional[Callable[[dict], None]] = None,
          stop_after_steps: Optional[int] = None) -> TrainResult:
    """Train from scratch (or from ``resume``) for ``tcfg.epochs`` epochs.

    With ``out_dir`` set, writes ``ckpt_<epoch>`` after every epoch,
    ``ckpt_final`` at the end and ``metrics.csv``.
    """
    if len(train_data) == 0:
        raise ValueError("training set is empty")
    if params is None:
        params = init_params(cfg, tcfg.seed)
    adam = ad.AdamState(lr=tcfg.lr, beta1=tcfg.beta1, beta2=tcfg.beta2, weight_decay=tcfg.weight_decay)
    start_epoch = 0
    history: list = []
    out = Path(out_dir) if out_dir is not None else None
    if resume is not None:
        apply_checkpoint(resume, params)
        adam = make_checkpoint(params, resume.adam, resume.epoch, resume.seed).adam
        start_epoch = resume.epoch
        if out is not None and (out / "metrics.csv").exists():
            history = read_metrics(out / "metrics.csv")[:start_epoch]
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    images = center_crop(train_data.images, tcfg.crop)
    flows = center_crop(train_data.flows, tcfg.crop)
    steps = 0
    for epoch in range(start_epoch, tcfg.epochs):
        adam.lr = lr_at(epoch, tcfg.lr, tcfg.lr_halving_epochs)
        order = epoch_order(tcfg.seed, epoch, len(images))
        flips = np.random.default_rng([tcfg.seed, epoch, 1]).integers(0, 2, (len(images), 2)).astype(bool)
        losses = []
        t0 = time.time()
        for b in range(0, len(order), tcfg.batch):
            idx = np.sort(order[b:b + tcfg.batch])
            batch_images, batch_flows = images[idx], flows[idx]
            if tcfg.augment:
                batch_images, batch_flows = flip_batch(batch_images, batch_flows, flips[idx])
            value = train_step(params, cfg, tcfg, adam, batch_images, batch_flows)
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value} at epoch {epoch + 1}, batch {b // tcfg.batch} "
                    f"(sample indices {idx.tolist()}), lr {adam.lr:g}"
                )
            losses.append(value)
            steps += 1
            if stop_after_steps is not None and steps >= stop_after_steps:
                return TrainResult(params, adam, history)
        val = evaluate(params, cfg, val_data).mean if val_data is not None and len(val_data) else float("nan")
        row = {"epoch": epoch + 1, "train_loss": float(np.mean(losses)), "val_min_epe": val,
               "lr": adam.lr}
        history.append(row)
        logger.info("epoch %d loss %.4f val %.4f lr %g (%.1fs)", epoch + 1, row["train_loss"], val,
                    adam.lr, time.time() - t0)
        if progress is not None:
            progress(row)
        if out is not None:
            save_checkpoint(make_checkpoint(params, adam, epoch + 1, tcfg.seed), out / f"ckpt_{epoch + 1}")
            write_metrics(out / "metrics.csv", history)
    if out is not None:
        save_checkpoint(make_checkpoint(params, adam, tcfg.epochs, tcfg.seed), out / "ckpt_final")
        write_metrics(out / "metrics.csv", history)
    return TrainResult(params, adam, history)


def write_metrics(path, history: list) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for row in history:
        writer.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_min_epe"]), repr(row["lr"])])
    flow_io._atomic_write(path, buf.getvalue().encode("utf-8"))


def read_metrics(path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        return [{"epoch": int(r["epoch"]), "train_loss": float(r["train_loss"]),
                 "val_min_epe": float(r["val_min_epe"]), "lr": float(r["lr"])}
                for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

@dataclass
class AblationRow:
    cfg: ModelConfig
    n_params: int
    epes: list  # one min-EPE per seed

    @property
    def median(self) -> float:
        return float(np.median(self.epes))


def ablation_suite(train_data: Dataset, val_data: Dataset, cfgs: Sequence[ModelConfig],
                   tcfg: TrainConfig, seeds: Sequence[int] = (0,),
                   progress: Optional[Callable[[str], None]] = None) -> list:
    """Train each config under the same schedule and seeds; report min-EPE per seed."""
    from dataclasses import replace

    from .model import count_params

    rows = []
    for cfg in cfgs:
        epes = []
        for seed in seeds:
            result = train(cfg, train_data, replace(tcfg, seed=seed))
            epes.append(evaluate(result.params, cfg, val_data).mean)
            if progress is not None:
                progress(f"stn={cfg.use_stn} rb={cfg.use_refining_block} seed={seed} epe={epes[-1]:.4f}")
        rows.append(AblationRow(cfg, count_params(init_params(cfg, 0)), epes))
    return rows


def ablation_markdown(rows: Sequence[AblationRow]) -> str:
    mark = {True: "✓", False: "✗"}
    lines = ["| STN | RB | EPE | per-seed EPE | params |", "|:---:|:---:|---:|---|---:|"]
    for r in rows:
        seeds = ", ".join(f"{e:.4f}" for e in r.epes)
        lines.append(f"| {mark[r.cfg.use_stn]} | {mark[r.cfg.use_refining_block]} | "
                     f"{r.median:.4f} | {seeds} | {r.n_params} |")
    return "\n".join(lines) + "\n"
