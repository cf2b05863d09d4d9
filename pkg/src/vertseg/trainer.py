"""Dataset manifests, Adam, augmentation and the early-stopping training loop."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .imaging import BinaryMask, GrayImage, normalize, read_mask, read_png
from .objectives import DEFAULT_THRESHOLD, binarize, combined_loss, dice_score, iou
from .tensor import Graph, NumericalError, Tensor
from .unet import UNetModel, save_checkpoint

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.597, 0.081, 0.322)


class DatasetError(ValueError):
    pass


# --- manifests ---------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    split: str
    image: str
    mask: str


@dataclass
class DatasetManifest:
    """Line format: ``<split>\\t<image_path>\\t<mask_path>``; paths relative to the file."""

    entries: list[ManifestEntry]
    seed: int | None = None
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.split not in SPLITS:
                raise DatasetError(f"unknown split tag {e.split!r}")
            if (e.image, e.mask) in seen:
                raise DatasetError(f"duplicate entry {e.image}")
            seen.add((e.image, e.mask))

    def split(self, tag: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == tag]

    def counts(self) -> dict[str, int]:
        return {s: len(self.split(s)) for s in SPLITS}

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def to_text(self) -> str:
        head = f"# seed={self.seed}\n" if self.seed is not None else ""
        return head + "".join(f"{e.split}\t{e.image}\t{e.mask}\n" for e in self.entries)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        entries, seed = [], None
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if line.startswith("# seed="):
                val = line.split("=", 1)[1].strip()
                seed = None if val == "None" else int(val)
                continue
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DatasetError(f"{path}:{lineno}: expected 3 tab-separated fields")
            entries.append(ManifestEntry(*parts))
        return cls(entries, seed, path.parent)


def split_counts(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder rounding so the counts sum to exactly ``n``."""
    raw = [n * r for r in ratios]
    counts = [int(np.floor(x + 1e-9)) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_dataset(items: Sequence[tuple[str, str]], ratios: Sequence[float] = DEFAULT_RATIOS,
                  seed: int = 0) -> DatasetManifest:
    if len(items) < 3:
        raise DatasetError(f"need at least 3 items to split, got {len(items)}")
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1) > 1e-6:
        raise DatasetError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    counts = split_counts(len(items), ratios)
    order = np.random.default_rng(seed).permutation(len(items))
    tags = [t for t, c in zip(SPLITS, counts) for _ in range(c)]
    entries = [None] * len(items)
    for tag, idx in zip(tags, order):
        entries[idx] = ManifestEntry(tag, *items[idx])
    return DatasetManifest(entries, seed)


# --- optimizer -----------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 8
    max_epochs: int = 100
    plateau_patience: int = 3
    plateau_min_delta: float = 1e-4
    augment: bool = False
    seed: int = 0
    threshold: float = DEFAULT_THRESHOLD
    dice_smooth: float = 1.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              config: TrainConfig) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    for p, g in zip(params, grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {p.name or 'parameter'}; step aborted")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = (p.data - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)).astype(p.dtype)
    return state


# --- augmentation --------------------------------------------------------------

def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator | int,
            enabled: bool = True, max_shift: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Random horizontal flip, intensity scale in [0.9, 1.1] and shift up to ``max_shift`` px.

    ``image`` is a float array in [0, 1]; ``mask`` is {0,1}. The same geometry
    is applied to both; translation pads by edge replication.
    """
    if not enabled:
        return image, mask
    if image.shape != mask.shape:
        raise DatasetError(f"image {image.shape} and mask {mask.shape} differ")
    rng = np.random.default_rng(rng)
    flip = rng.random() < 0.5
    scale = rng.uniform(0.9, 1.1)
    dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
    img, msk = image, mask
    if flip:
        img, msk = img[:, ::-1], msk[:, ::-1]
    img = np.clip(img * scale, 0.0, 1.0).astype(image.dtype)
    img, msk = _shift(img, dy, dx), _shift(msk, dy, dx)
    return np.ascontiguousarray(img), (np.ascontiguousarray(msk) > 0.5).astype(np.uint8)


def _shift(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w = a.shape
    padded = np.pad(a, ((abs(dy), abs(dy)), (abs(dx), abs(dx))), mode="edge")
    y0 = abs(dy) - dy
    x0 = abs(dx) - dx
    return padded[y0:y0 + h, x0:x0 + w]


# --- data loading --------------------------------------------------------------

@dataclass
class SplitData:
    ids: list[str]
    images: np.ndarray  # N,1,H,W float32 in [0,1]
    masks: np.ndarray   # N,H,W uint8

    def __len__(self) -> int:
        return len(self.ids)


def stack_split(pairs: Sequence[tuple[GrayImage, BinaryMask]], ids: Sequence[str] | None = None) -> SplitData:
    if not pairs:
        raise DatasetError("split is empty")
    imgs = np.concatenate([normalize(img).data for img, _ in pairs])
    masks = np.stack([m.pixels for _, m in pairs])
    if imgs.shape[2:] != masks.shape[1:]:
        raise DatasetError("image and mask sizes differ")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(pairs))]
    return SplitData(ids, imgs, masks)


def load_split(manifest: DatasetManifest, tag: str) -> SplitData:
    entries = manifest.split(tag)
    if not entries:
        raise DatasetError(f"manifest has no {tag!r} entries")
    pairs = []
    for e in entries:
        img = read_png(manifest.resolve(e.image))
        mask = read_mask(manifest.resolve(e.mask))
        if (img.width, img.height) != (mask.width, mask.height):
            raise DatasetError(f"{e.image}: image {img.width}x{img.height} vs mask {mask.width}x{mask.height}")
        pairs.append((img, mask))
    return stack_split(pairs, [Path(e.image).stem for e in entries])


# --- training loop ---------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_dice: float
    val_iou: float


@dataclass
class TrainResult:
    log: list[EpochRecord]
    best_epoch: int
    best_val_loss: float
    best_state: dict[str, np.ndarray]
    stopped_early: bool


def predict_probs(model: UNetModel, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        out.append(model(Tensor(images[i:i + batch_size])).data)
    return np.concatenate(out)


def evaluate(model: UNetModel, data: SplitData, config: TrainConfig):
    """Mean (loss, dice, iou) plus per-image rows for ``data``."""
    probs = predict_probs(model, data.images, config.batch_size)
    rows = []
    for i, ident in enumerate(data.ids):
        p = probs[i:i + 1]
        loss = float(combined_loss(Tensor(p), data.masks[i], smooth=config.dice_smooth).data)
        pred = binarize(p[0, 0], config.threshold)
        rows.append((ident, dice_score(pred, data.masks[i]), iou(pred, data.masks[i]), loss))
    arr = np.array([r[1:] for r in rows], dtype=np.float64)
    dice_m, iou_m, loss_m = arr.mean(axis=0)
    return float(loss_m), float(dice_m), float(iou_m), rows


def fit(model: UNetModel, train: SplitData, val: SplitData, config: TrainConfig,
        run_dir: str | Path | None = None) -> TrainResult:
    """Train until validation loss plateaus or ``max_epochs`` is reached.

    An epoch counts as progress when the validation loss beats the best so far
    by more than ``plateau_min_delta``; training stops after
    ``plateau_patience`` epochs without progress. The returned state is the
    one with the lowest validation loss seen, whether or not it cleared
    ``min_delta``.
    """
    if len(train) == 0 or len(val) == 0:
        raise DatasetError("train and val splits must be non-empty")
    params = model.parameters()
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(config.seed)
    ckpt_dir = Path(run_dir) / "checkpoints" if run_dir is not None else None
    log_path = Path(run_dir) / "log" if run_dir is not None else None
    if log_path is not None:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("")

    records: list[EpochRecord] = []
    best_loss = np.inf
    best_state = model.state()
    best_epoch = 0
    plateau_ref = None
    wait = 0
    stopped = False
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train))
        losses, weights = [], []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, yb = train.images[idx], train.masks[idx]
            if config.augment:
                pairs = [augment(xb[j, 0], yb[j], rng) for j in range(len(idx))]
                xb = np.stack([p[0] for p in pairs])[:, None]
                yb = np.stack([p[1] for p in pairs])
            model.zero_grad()
            with Graph() as g:
                loss = combined_loss(model(Tensor(xb)), yb, smooth=config.dice_smooth)
            g.backward(loss)
            adam_step(params, [p.grad for p in params], state, config)
            losses.append(float(loss.data))
            weights.append(len(idx))
        train_loss = float(np.average(losses, weights=weights))
        val_loss, val_dice, val_iou, _ = evaluate(model, val, config)
        if not np.isfinite(val_loss):
            raise NumericalError(f"epoch {epoch}: validation loss is not finite")
        rec = EpochRecord(epoch, train_loss, val_loss, val_dice, val_iou)
        records.append(rec)
        log.info("epoch %d train %.5f val %.5f dice %.4f iou %.4f", *asdict(rec).values())
        if log_path is not None:
            with log_path.open("a") as fh:
                fh.write(json.dumps(asdict(rec)) + "\n")

        if val_loss < best_loss:
            best_loss, best_epoch = val_loss, epoch
            best_state = model.state()
            if ckpt_dir is not None:
                name = f"epoch_{epoch:04d}.ckpt"
                save_checkpoint(model, ckpt_dir / name)
                (ckpt_dir / "best").write_text(name + "\n")
        if plateau_ref is None or val_loss < plateau_ref - config.plateau_min_delta:
            plateau_ref = val_loss
            wait = 0
        else:
            wait += 1
            if wait >= config.plateau_patience:
                stopped = True
                break
    model.load_state(best_state)
    return TrainResult(records, best_epoch, float(best_loss), best_state, stopped)


def train(model: UNetModel, manifest: DatasetManifest, config: TrainConfig,
          run_dir: str | Path | None = None) -> TrainResult:
    train_data = load_split(manifest, "train")
    val_data = load_split(manifest, "val")
    model.config.check_input(*train_data.images.shape[2:])
    return fit(model, train_data, val_data, config, run_dir)


def read_log(path: str | Path) -> list[EpochRecord]:
    return [EpochRecord(**json.loads(line)) for line in Path(path).read_text().splitlines() if line]
