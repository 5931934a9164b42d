"""Cross-entropy training with Adamax, early stopping, and checkpoints.

Checkpoint files (RCKP, little-endian):

    magic "RCKP" | u32 version=1 | u32 json_length | metadata JSON (UTF-8)
    then per tensor: u16 name_length | name | u32 rank | u32 extents...
                     | float32 payload (row-major)

Entries run to end of file. The metadata JSON carries the model config,
the training config, the vocabulary hash, the best epoch and its
validation score, so a checkpoint alone rebuilds the model.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

import refcap.tensor as T
from refcap.data import PAD, DataError, PreparedDataset, Vocabulary
from refcap.metrics import EvalCorpus, bleu
from refcap.model import CaptionModel, ModelConfig
from refcap.tensor import Graph, Tensor

RCKP_MAGIC = b"RCKP"
RCKP_VERSION = 1


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/Inf loss; the message carries diagnostics."""


@dataclass
class TrainConfig:
    """Optimization settings; defaults are the full-scale recipe
    (50 epochs, batch 64, Adamax at 0.002, dropout 0.5, patience 12)."""

    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 0.002
    dropout: float = 0.5
    patience: int = 12
    weight_decay: float = 0.0
    clip_norm: float | None = 5.0
    seed: int = 1234
    val_split: str = "val"
    val_max_len: int | None = None   # emission cap for validation decoding

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.patience < 1:
            raise ValueError("patience must be positive")
        self.patience = min(self.patience, self.epochs)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def caption_targets(caption) -> list[int]:
    """Prediction targets: positions 1..true_length-1 (never <start>)."""
    return caption.ids[1:caption.true_length]


def cross_entropy_loss(dists: Tensor, targets, mask=None) -> tuple[Tensor, int]:
    """Summed negative log-likelihood of the targets under the given rows.

    Returns (loss tensor, number of scored tokens); divide for the
    per-token average. `mask` marks rows to score (pads excluded);
    by default every row counts.
    """
    targets = list(targets)
    if len(targets) != dists.shape[0]:
        raise ValueError(f"{dists.shape[0]} distribution rows but "
                         f"{len(targets)} targets")
    picked = T.pick(dists, targets)  # validates target range
    log_probs = T.log(picked)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (len(targets),):
            raise ValueError("mask must have one entry per target")
        log_probs = T.mul(log_probs, Tensor(mask.astype(dists.values.dtype)))
        n_tokens = int(mask.sum())
    else:
        n_tokens = len(targets)
    return T.scale(T.sum_all(log_probs), -1.0), n_tokens


class Adamax:
    """Adamax: first-moment average plus an infinity-norm running max.

        m <- b1*m + (1-b1)*g
        u <- max(b2*u, |g|)
        theta <- theta - (lr / (1 - b1^t)) * m / (u + eps)

    Optional global gradient-norm clipping and L2 weight decay apply to
    the gradients before the moment updates; neither mutates the stored
    grads.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 0.002,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0, clip_norm: float | None = None):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self._m = {k: np.zeros_like(p.values) for k, p in self.params.items()}
        self._u = {k: np.zeros_like(p.values) for k, p in self.params.items()}

    def _clip_factor(self) -> float:
        if self.clip_norm is None:
            return 1.0
        total = np.sqrt(sum(float((p.grad ** 2).sum())
                            for p in self.params.values()))
        if total > self.clip_norm:
            return self.clip_norm / total
        return 1.0

    def step(self) -> None:
        self.t += 1
        factor = self._clip_factor()
        correction = self.lr / (1.0 - self.beta1 ** self.t)
        for name, p in self.params.items():
            g = p.grad * factor
            if self.weight_decay:
                g = g + self.weight_decay * p.values
            m = self._m[name]
            u = self._u[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            np.maximum(self.beta2 * u, np.abs(g), out=u)
            p.values -= correction * m / (u + self.eps)


@dataclass
class Checkpoint:
    """Frozen parameters plus everything needed to rebuild the model.

    The metadata embeds the full vocabulary (when one was supplied) so a
    checkpoint alone suffices to caption new images.
    """

    model_config: ModelConfig
    params: dict[str, np.ndarray]
    vocab_hash: str = ""
    epoch: int = 0
    best_val_bleu: float = 0.0
    train_config: dict | None = None
    vocab: Vocabulary | None = None

    @classmethod
    def snapshot(cls, model: CaptionModel, vocab: Vocabulary | None = None,
                 epoch: int = 0, best_val_bleu: float = 0.0,
                 train_config: TrainConfig | None = None) -> "Checkpoint":
        params = {name: p.values.astype(np.float32, copy=True)
                  for name, p in model.parameters().items()}
        return cls(model_config=model.config, params=params,
                   vocab_hash=vocab.content_hash() if vocab else "",
                   epoch=epoch, best_val_bleu=best_val_bleu,
                   train_config=asdict(train_config) if train_config else None,
                   vocab=vocab)

    def build_model(self) -> CaptionModel:
        model = CaptionModel(self.model_config, seed=0)
        model.load_values(self.params)
        return model

    def save(self, path) -> None:
        meta = {
            "model_config": self.model_config.to_json(),
            "train_config": self.train_config,
            "vocab_hash": self.vocab_hash,
            "epoch": self.epoch,
            "best_val_bleu": self.best_val_bleu,
            "vocab": self.vocab.to_json() if self.vocab else None,
        }
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(RCKP_MAGIC)
            fh.write(struct.pack("<II", RCKP_VERSION, len(blob)))
            fh.write(blob)
            for name, arr in self.params.items():
                name_bytes = name.encode("utf-8")
                fh.write(struct.pack("<H", len(name_bytes)))
                fh.write(name_bytes)
                fh.write(struct.pack("<I", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.astype("<f4").tobytes(order="C"))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        data = Path(path).read_bytes()
        if data[:4] != RCKP_MAGIC:
            raise DataError(f"{path}: not a checkpoint file (magic {data[:4]!r})")
        version, json_len = struct.unpack_from("<II", data, 4)
        if version != RCKP_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(data[12:12 + json_len].decode("utf-8"))
        offset = 12 + json_len
        params: dict[str, np.ndarray] = {}
        try:
            while offset < len(data):
                (name_len,) = struct.unpack_from("<H", data, offset)
                offset += 2
                name = data[offset:offset + name_len].decode("utf-8")
                offset += name_len
                (rank,) = struct.unpack_from("<I", data, offset)
                offset += 4
                shape = struct.unpack_from(f"<{rank}I", data, offset)
                offset += 4 * rank
                count = int(np.prod(shape)) if rank else 1
                arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
                if arr.size != count:
                    raise struct.error
                offset += 4 * count
                params[name] = arr.reshape(shape).copy()
        except (struct.error, ValueError) as exc:
            raise DataError(f"{path}: truncated checkpoint") from exc
        vocab_json = meta.get("vocab")
        return cls(model_config=ModelConfig.from_json(meta["model_config"]),
                   params=params, vocab_hash=meta.get("vocab_hash", ""),
                   epoch=meta.get("epoch", 0),
                   best_val_bleu=meta.get("best_val_bleu", 0.0),
                   train_config=meta.get("train_config"),
                   vocab=Vocabulary.from_json(vocab_json) if vocab_json else None)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)
    stopped_epoch: int = 0
    train_seconds: float = 0.0


def validation_bleu4(model: CaptionModel, dataset: PreparedDataset,
                     split: str = "val", max_len: int | None = None) -> float:
    """Greedy-decode the split and score corpus BLEU-4 against references."""
    from refcap.inference import greedy_decode  # local import avoids a cycle

    images = dataset.split_images(split)
    if not images:
        raise DataError(f"split {split!r} is empty")
    entries = []
    for image in images:
        result = greedy_decode(model, dataset.vocab,
                               dataset.features[image.image_id], max_len=max_len)
        candidate = result.tokens if result.tokens else [dataset.vocab.token(PAD)]
        entries.append((candidate, image.ref_tokens))
    return bleu(EvalCorpus(entries), 4)


def train(model: CaptionModel, dataset: PreparedDataset, config: TrainConfig,
          log_fn=None, val_metric_fn=None) -> TrainResult:
    """Teacher-forced epochs over shuffled mini-batches, keeping the
    checkpoint of the best validation score.

    Stops after `patience` consecutive epochs without improvement, or at
    `epochs`. `val_metric_fn(model, epoch) -> float` replaces the
    default greedy BLEU-4 when given (tests inject fixed sequences
    through it). Fixed seed means a bit-identical run: shuffling and
    dropout draw from one generator in a fixed order.
    """
    started = time.perf_counter()
    pairs = dataset.split_pairs("train")
    if not pairs:
        raise DataError("training split is empty")
    if val_metric_fn is None:
        if not dataset.split_images(config.val_split):
            raise DataError(f"validation split {config.val_split!r} is empty")

        def val_metric_fn(m, epoch):
            return validation_bleu4(m, dataset, split=config.val_split,
                                    max_len=config.val_max_len)

    model.config.dropout = config.dropout
    rng = np.random.default_rng(config.seed)
    optimizer = Adamax(model.parameters(), lr=config.learning_rate,
                       weight_decay=config.weight_decay,
                       clip_norm=config.clip_norm)
    records = {}  # image_id -> FeatureRecord, resolved once
    for image_id, _ in pairs:
        records.setdefault(image_id, dataset.features[image_id])

    best_score = -np.inf
    best_epoch = 0
    best_ckpt: Checkpoint | None = None
    history: list[dict] = []
    epoch = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(pairs))
        epoch_loss = 0.0
        epoch_tokens = 0
        for lo in range(0, len(order), config.batch_size):
            batch = [pairs[i] for i in order[lo:lo + config.batch_size]]
            model.zero_grads()
            for image_id, caption in batch:
                graph = Graph()
                with graph:
                    dists, _ = model.forward_caption(
                        records[image_id], caption, train=True, rng=rng)
                    loss, n_tokens = cross_entropy_loss(
                        dists, caption_targets(caption))
                value = loss.item()
                if not np.isfinite(value):
                    raise NonFiniteLossError(
                        f"non-finite loss {value} at epoch {epoch}, "
                        f"image {image_id!r}, caption ids "
                        f"{caption.ids[:caption.true_length]}")
                graph.backward(loss)
                epoch_loss += value
                epoch_tokens += n_tokens
            inv = 1.0 / len(batch)
            for p in optimizer.params.values():
                p.grad *= inv
            optimizer.step()
        val_score = float(val_metric_fn(model, epoch))
        improved = val_score > best_score
        if improved:
            best_score = val_score
            best_epoch = epoch
            best_ckpt = Checkpoint.snapshot(model, dataset.vocab, epoch=epoch,
                                            best_val_bleu=val_score,
                                            train_config=config)
        record = {"epoch": epoch, "train_loss": epoch_loss / max(1, epoch_tokens),
                  "val_metric": val_score, "improved": improved,
                  "best_epoch": best_epoch}
        history.append(record)
        if log_fn is not None:
            log_fn(record)
        if epoch - best_epoch >= config.patience:
            break
    assert best_ckpt is not None
    return TrainResult(checkpoint=best_ckpt, history=history,
                       stopped_epoch=epoch,
                       train_seconds=time.perf_counter() - started)
