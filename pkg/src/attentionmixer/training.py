"""End-to-end optimisation of the classifier and masked-patch pretraining of the encoder."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Adamax, F, bce_loss, no_grad
from .evaluation.metrics import UndefinedAUCError, auc
from .model.encoder import ViTEncoder, mae_pretrain_step, project_hct
from .model.network import AttentionMixer, Batch

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 50
    patience: int = 10
    seed: int = 0
    freeze_encoder: bool = False
    variant: str = "full"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 0 <= self.patience <= self.max_epochs:
            raise ValueError("patience must lie in [0, max_epochs]")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TrainLog:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_auc: list[float] = field(default_factory=list)
    e_m_grad_norm: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def rows(self):
        for i in range(self.epochs):
            yield i + 1, self.train_loss[i], self.val_loss[i], self.val_auc[i]

    def summary(self) -> dict:
        return {
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
            "best_val_auc": self.val_auc[self.best_epoch - 1] if self.epochs else None,
            "stopped_early": self.stopped_early,
            "final_train_loss": self.train_loss[-1] if self.epochs else None,
        }


@dataclass
class TrainResult:
    state: dict[str, np.ndarray]
    log: TrainLog


class _HctCache:
    """Frozen-backbone encodings, so only ``W_HCT`` and later stages are recomputed."""

    def __init__(self, model: AttentionMixer, tokens: np.ndarray, chunk: int = 64):
        with no_grad():
            parts = [
                model.encoder.encode(tokens[i : i + chunk]).data for i in range(0, len(tokens), chunk)
            ]
        self.enc = np.concatenate(parts)


def _forward(model: AttentionMixer, batch: Batch, idx: np.ndarray, cache: _HctCache | None):
    f_hct = f_meta = None
    if model.cfg.uses_hct:
        if cache is not None:
            f_hct = project_hct(F.as_tensor(cache.enc[idx]), model.encoder.w_hct)
        else:
            f_hct = model.hct_token(batch.tokens[idx])
    if model.cfg.uses_meta:
        f_meta = model.meta_token(batch.meta[idx], batch.missing[idx])
    return model.fuse(f_hct, f_meta)


def predict(model: AttentionMixer, batch: Batch, chunk: int = 256, cache: _HctCache | None = None) -> np.ndarray:
    """Probabilities for every sample in ``batch`` (no graph recorded)."""
    n = len(batch)
    out = []
    with no_grad():
        for start in range(0, n, chunk):
            idx = np.arange(start, min(n, start + chunk))
            out.append(_forward(model, batch, idx, cache).data)
    return np.concatenate(out).astype(np.float64) if out else np.zeros(0)


def _bce(p: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(p, 1e-7, 1 - 1e-7)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def train(model: AttentionMixer, train_set: Batch, val_set: Batch, cfg: TrainConfig) -> TrainResult:
    """Adamax on mean BCE; early stop on validation loss; keep the best-validation-AUC weights."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise TrainingError("empty train or validation split")
    if cfg.freeze_encoder:
        model.freeze_encoder(True)
    params = model.trainable_parameters()
    opt = Adamax(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    y_train = train_set.labels.astype(np.float64)
    y_val = val_set.labels.astype(np.float64)

    train_cache = val_cache = None
    if model.cfg.uses_hct and model.encoder_frozen:
        train_cache = _HctCache(model, train_set.tokens)
        val_cache = _HctCache(model, val_set.tokens)

    log = TrainLog()
    best_auc = -np.inf
    best_state = model.state_dict()
    best_loss = np.inf
    stale = 0
    history: list[float] = []
    e_m = model.meta.e_m if model.cfg.uses_meta else None
    n = len(train_set)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        total, em_norm = 0.0, 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            opt.zero_grad()
            probs = _forward(model, train_set, idx, train_cache)
            loss = bce_loss(probs, y_train[idx])
            value = loss.item()
            history.append(value)
            if not np.isfinite(value):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {b}: {value}; "
                    f"recent losses {history[-10:]}"
                )
            loss.backward()
            if e_m is not None and e_m.grad is not None:
                em_norm += float(np.linalg.norm(e_m.grad))
            opt.step()
            total += value * len(idx)
        log.train_loss.append(total / n)
        log.e_m_grad_norm.append(em_norm)

        p_val = predict(model, val_set, cache=val_cache)
        val_loss = _bce(p_val, y_val)
        try:
            val_auc = auc(p_val, y_val)
        except UndefinedAUCError as exc:
            raise TrainingError(f"validation split has a single class: {exc}") from exc
        log.val_loss.append(val_loss)
        log.val_auc.append(val_auc)
        logger.debug("epoch %d train %.4f val %.4f auc %.4f", epoch, log.train_loss[-1], val_loss, val_auc)
        if val_auc > best_auc:
            best_auc = val_auc
            best_state = model.state_dict()
            log.best_epoch = epoch
        if val_loss < best_loss:
            best_loss = val_loss
            stale = 0
        else:
            stale += 1
            if stale > cfg.patience:
                log.stopped_early = True
                break
    return TrainResult(best_state, log)


def pretrain_encoder(
    encoder: ViTEncoder,
    tokens: np.ndarray,
    steps: int = 100,
    batch_size: int = 8,
    lr: float = 1e-3,
    seed: int = 0,
) -> list[float]:
    """Masked-patch reconstruction with Adamax; returns the per-step losses."""
    if len(tokens) == 0:
        raise TrainingError("no volumes to pretrain on")
    rng = np.random.default_rng(seed)
    opt = Adamax(encoder.parameters(), lr=lr)
    losses = []
    for step in range(steps):
        idx = rng.choice(len(tokens), size=min(batch_size, len(tokens)), replace=False)
        opt.zero_grad()
        loss, _ = mae_pretrain_step(tokens[idx], encoder, encoder.cfg.mask_ratio, rng)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"non-finite pretraining loss at step {step}: {losses[-10:]}")
        loss.backward()
        opt.step()
        losses.append(value)
    return losses
