"""Two-stage training.

Stage 1 fits the encoder-decoder on positive question-page pairs only,
selecting the epoch with the best validation answer similarity. Stage 2
freezes the model and fits the scoring head on balanced pairs: each
question contributes its gold page plus one page sampled uniformly from
the rest of the document (resampled every epoch); single-page documents
contribute only the positive pair. Scorer targets are label-smoothed to
1-eps / eps and penalized with squared error.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import Dataset, Document
from .errors import ConfigError
from .evaluate import anls_single
from .model import EncoderFeature, VqaModel
from .render import fuse_question_page
from .scorer import SelfAttentionScorer

LogFn = Callable[[str], None]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.3
    batch_size: int = 8
    max_epochs: int = 60
    early_stop_patience: int = 5
    label_smooth_eps: float = 0.1
    seed: int = 0
    stage: int = 1
    optimizer: str = "sgd"
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        if not 0.0 <= self.label_smooth_eps < 0.5:
            raise ConfigError("label_smooth_eps must lie in [0, 0.5) so targets stay ordered")
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("learning_rate, batch_size and max_epochs must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.weight_decay < 0.0:
            raise ConfigError("weight_decay must be >= 0")


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_metric: float = float("-inf")


class Sgd:
    """Plain stochastic gradient descent with a fixed learning rate."""

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, accumulated: int) -> None:
        if accumulated < 1:
            return
        for p in self.params.values():
            if p.grad is not None:
                if self.weight_decay:
                    p.data *= 1.0 - self.lr * self.weight_decay
                p.data -= self.lr * p.grad / accumulated
                p.grad = None


class Adam:
    """Adam with decoupled weight decay (applied only to stepped parameters)."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, accumulated: int) -> None:
        if accumulated < 1:
            return
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad / accumulated
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1**self.t)
            v_hat = self.v[name] / (1 - self.beta2**self.t)
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = None


def make_optimizer(cfg: TrainConfig, params: dict[str, Tensor]):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.learning_rate, cfg.weight_decay)
    return Sgd(params, cfg.learning_rate, cfg.weight_decay)


def sample_negative(doc: Document, positive_idx: int, rng: np.random.Generator) -> int | None:
    """Uniform page index != positive_idx, or None for single-page documents."""
    if doc.n_pages < 2:
        return None
    idx = int(rng.integers(doc.n_pages - 1))
    return idx + 1 if idx >= positive_idx else idx


def mse_smoothed_loss(pred, is_positive: bool, eps: float):
    """Squared error against the label-smoothed target 1-eps (positive) or eps."""
    target = 1.0 - eps if is_positive else eps
    if isinstance(pred, Tensor):
        return ag.powc(pred + (-target), 2.0)
    return float((pred - target) ** 2)


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def _restore(params: dict[str, Tensor], snap: dict[str, np.ndarray]) -> None:
    for k, p in params.items():
        p.data = snap[k].copy()


def _gold_grid(sample, doc: Document, model: VqaModel):
    img = doc.load_page(sample.answer_page_index)
    return fuse_question_page(sample.question, img, patch_size=model.cfg.patch_size, max_patches=model.cfg.max_patches)


def validation_anls(valid_set: Dataset, model: VqaModel) -> float:
    """Single-page answer quality: decode each question's gold page."""
    scores = []
    for sample in valid_set.questions:
        doc = valid_set.document_for(sample)
        with ag.no_grad():
            feature = model.encode_grid(_gold_grid(sample, doc, model))
        scores.append(anls_single(model.generate_answer(feature), sample.answers))
    return float(np.mean(scores))


class FrozenFeatureCache:
    """Memoized encoder features for stage 2, where the encoder never changes.

    Keyed by (question_id, page index). Trades memory for a large speedup:
    every epoch revisits the same positive pairs and validation pages.
    """

    def __init__(self, model: VqaModel):
        self.model = model
        self._store: dict[tuple, EncoderFeature] = {}

    def get(self, sample, doc: Document, page_idx: int) -> EncoderFeature:
        key = (sample.question_id, doc.doc_id, page_idx)
        feature = self._store.get(key)
        if feature is None:
            with ag.no_grad():
                img = doc.load_page(page_idx)
                grid = fuse_question_page(
                    sample.question, img,
                    patch_size=self.model.cfg.patch_size, max_patches=self.model.cfg.max_patches,
                )
                feature = self.model.encode_grid(grid)
            self._store[key] = feature
        return feature


def validation_page_accuracy(
    valid_set: Dataset,
    model: VqaModel,
    scorer: SelfAttentionScorer,
    cache: FrozenFeatureCache | None = None,
) -> float:
    """Fraction (%) of validation questions whose top-scoring page is the gold one."""
    hits = 0
    for sample in valid_set.questions:
        doc = valid_set.document_for(sample)
        best_idx, best_score = 0, -1.0
        for index in range(doc.n_pages):
            if cache is not None:
                value = scorer.score_value(cache.get(sample, doc, index))
            else:
                with ag.no_grad():
                    img = doc.load_page(index)
                    grid = fuse_question_page(sample.question, img, patch_size=model.cfg.patch_size,
                                              max_patches=model.cfg.max_patches)
                    value = scorer.score_value(model.encode_grid(grid))
            if value > best_score:
                best_idx, best_score = index, value
        hits += best_idx == sample.answer_page_index
    return 100.0 * hits / len(valid_set.questions)


def train_stage1(
    train_set: Dataset,
    valid_set: Dataset,
    model: VqaModel,
    cfg: TrainConfig,
    log: LogFn | None = None,
    on_best: Callable[[int], None] | None = None,
) -> TrainHistory:
    """Fit the encoder-decoder on gold pages; keep the best-validation epoch."""
    if not train_set.questions:
        raise ValueError("stage-1 training requires a non-empty training set")
    if cfg.stage != 1:
        raise ConfigError("train_stage1 needs a stage-1 TrainConfig")
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg, model.params)
    history = TrainHistory()
    best_params = _snapshot(model.params)

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_set.questions))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            for idx in batch:
                sample = train_set.questions[int(idx)]
                doc = train_set.document_for(sample)
                feature = model.encode_grid(_gold_grid(sample, doc, model))
                loss = model.vqa_loss(feature, sample.answers[0])
                loss.backward()
                losses.append(float(loss.data))
            opt.step(len(batch))
        valid_metric = validation_anls(valid_set, model)
        record = {"epoch": epoch, "train_loss": float(np.mean(losses)), "valid_anls": valid_metric}
        history.records.append(record)
        if log:
            log(f"stage1 epoch {epoch}: train_loss={record['train_loss']:.4f} valid_anls={valid_metric:.4f}")
        if valid_metric > history.best_metric:
            history.best_metric = valid_metric
            history.best_epoch = epoch
            best_params = _snapshot(model.params)
            if on_best:
                on_best(epoch)
        elif epoch - history.best_epoch >= cfg.early_stop_patience:
            break
    _restore(model.params, best_params)
    return history


def train_stage2(
    train_set: Dataset,
    valid_set: Dataset,
    model: VqaModel,
    scorer: SelfAttentionScorer,
    cfg: TrainConfig,
    log: LogFn | None = None,
    on_best: Callable[[int], None] | None = None,
) -> TrainHistory:
    """Fit the scoring head on balanced positive/negative pairs; model frozen."""
    if not train_set.questions:
        raise ValueError("stage-2 training requires a non-empty training set")
    if cfg.stage != 2:
        raise ConfigError("train_stage2 needs a stage-2 TrainConfig")
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg, scorer.params)  # only scorer parameters ever step
    history = TrainHistory()
    best_params = _snapshot(scorer.params)
    cache = FrozenFeatureCache(model)

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_set.questions))
        losses = []
        n_pos = n_neg = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            accumulated = 0
            for idx in batch:
                sample = train_set.questions[int(idx)]
                doc = train_set.document_for(sample)
                pairs = [(sample.answer_page_index, True)]
                negative = sample_negative(doc, sample.answer_page_index, rng)
                if negative is not None:
                    pairs.append((negative, False))
                for page_idx, is_positive in pairs:
                    feature = cache.get(sample, doc, page_idx)
                    pred = scorer.score(feature, training=True, rng=rng)
                    loss = mse_smoothed_loss(pred, is_positive, cfg.label_smooth_eps)
                    loss.backward()
                    losses.append(float(loss.data))
                    accumulated += 1
                    n_pos += is_positive
                    n_neg += not is_positive
            opt.step(accumulated)
        valid_metric = validation_page_accuracy(valid_set, model, scorer, cache=cache)
        record = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "valid_page_acc": valid_metric,
            "n_pos_pairs": n_pos,
            "n_neg_pairs": n_neg,
        }
        history.records.append(record)
        if log:
            log(
                f"stage2 epoch {epoch}: train_loss={record['train_loss']:.5f} "
                f"valid_page_acc={valid_metric:.2f}% (pairs +{n_pos}/-{n_neg})"
            )
        if valid_metric > history.best_metric:
            history.best_metric = valid_metric
            history.best_epoch = epoch
            best_params = _snapshot(scorer.params)
            if on_best:
                on_best(epoch)
        elif epoch - history.best_epoch >= cfg.early_stop_patience:
            break
    _restore(scorer.params, best_params)
    return history
