"""Three-phase orchestration: joint training, test-time adaptation, prediction.

Training minimizes detection loss plus a weighted reconstruction loss over all
three parameter partitions. Test-time adaptation minimizes the reconstruction
loss alone over the encoder and decoder partitions on label-stripped test
records; the classifier partition stays bitwise unchanged. Prediction runs
the frozen model on unmasked text.

Phases run sequentially: train to completion, adapt once over the test pool,
then predict. An online-batch mode instead adapts per test batch (optionally
resetting the adaptable partitions between batches) and predicts each batch
right after adapting on it.

One pipeline run owns its model exclusively. Distinct folds are independent
jobs with independent models and rng streams; aggregation joins at the end.
"""

from __future__ import annotations

import concurrent.futures
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, NumericsError, Tensor, adam_step, backward, zero_grad
from .data import (
    DatasetHeader,
    SplitPlan,
    aggregate_comments,
    aggregate_motion,
    strip_labels,
)
from .encoder import add_positions, encode, linear, mlm_loss
from .errors import ConfigError, TrainingDiverged
from .fusion import classify, fnd_loss, fuse, pool_sequence
from .masking import MaskedBatch, apply_mask
from .metrics import MetricsReport, compute_metrics, mean_metrics
from .model import DetectionModel, ModelConfig

# rng stream tags; combined with the config seed they keep every phase's
# randomness independent and reproducible.
_TAG_TRAIN_SHUFFLE = 1
_TAG_TRAIN_MASK = 2
_TAG_TTT_SHUFFLE = 3
_TAG_TTT_MASK = 4
_TAG_EVAL_MASK = 5


@dataclass
class TrainConfig:
    """Hyper-parameters and ablation switches for one pipeline run."""

    aux_weight: float = 1.0  # weight of the reconstruction loss during training
    mask_ratio: float = 0.15
    batch_size: int = 16
    train_epochs: int = 5
    train_lr: float = 1e-3
    ttt_lr: float | None = None  # defaults to train_lr / 10
    ttt_epochs: int = 2
    ttt_mode: str = "offline"  # or "online-batch"
    reset_between_batches: bool = True
    seed: int = 0
    no_ttt: bool = False
    no_mlm: bool = False
    no_trans: bool = False
    no_v: bool = False
    no_a: bool = False

    def __post_init__(self):
        if self.aux_weight < 0:
            raise ConfigError("aux_weight must be >= 0")
        if not (0.0 <= self.mask_ratio <= 1.0):
            raise ConfigError("mask_ratio must lie in [0, 1]")
        if self.train_lr <= 0 or (self.ttt_lr is not None and self.ttt_lr <= 0):
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.ttt_mode not in ("offline", "online-batch"):
            raise ConfigError(f"unknown ttt_mode {self.ttt_mode!r}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    @property
    def effective_ttt_lr(self) -> float:
        return self.ttt_lr if self.ttt_lr is not None else self.train_lr / 10.0

    @property
    def mlm_defined(self) -> bool:
        # Removing both modality branches removes every reconstruction term,
        # so the auxiliary task is empty.
        return not self.no_mlm and not (self.no_a and self.no_v)

    @property
    def mlm_active(self) -> bool:
        return self.mlm_defined and self.aux_weight > 0.0

    @property
    def ttt_active(self) -> bool:
        # Adaptation minimizes the reconstruction loss, so it is undefined
        # without the reconstruction task. The auxiliary weight only scales
        # the training objective and does not gate adaptation.
        return not self.no_ttt and self.mlm_defined

    def to_dict(self) -> dict:
        return {
            "aux_weight": self.aux_weight,
            "mask_ratio": self.mask_ratio,
            "batch_size": self.batch_size,
            "train_epochs": self.train_epochs,
            "train_lr": self.train_lr,
            "ttt_lr": self.effective_ttt_lr,
            "ttt_epochs": self.ttt_epochs,
            "ttt_mode": self.ttt_mode,
            "reset_between_batches": self.reset_between_batches,
            "seed": self.seed,
            "no_ttt": self.no_ttt,
            "no_mlm": self.no_mlm,
            "no_trans": self.no_trans,
            "no_v": self.no_v,
            "no_a": self.no_a,
        }


@dataclass
class EpochStats:
    epoch: int
    fnd_loss: float | None
    mlm_loss: float | None
    total_loss: float
    wall_time_s: float
    decoder_grad_max: float

    def to_dict(self) -> dict:
        return self.__dict__.copy()


@dataclass
class PhaseReport:
    phase: str
    checksums_before: dict[str, str]
    checksums_after: dict[str, str] = field(default_factory=dict)
    epochs: list[EpochStats] = field(default_factory=list)
    wall_time_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "phase": self.phase,
            "checksums_before": self.checksums_before,
            "checksums_after": self.checksums_after,
            "epochs": [e.to_dict() for e in self.epochs],
            "wall_time_s": self.wall_time_s,
            "extra": self.extra,
        }


@dataclass
class Prediction:
    video_id: str
    p_fake: float
    label_pred: int


@dataclass
class ForwardOut:
    p_fake: Tensor | None
    fnd: Tensor | None
    mlm: Tensor | None


def record_forward(
    model: DetectionModel,
    record,
    cfg: TrainConfig,
    mask_rng: np.random.Generator | None = None,
    mask_ratio: float = 0.0,
    need_fnd: bool = True,
    need_mlm: bool = False,
) -> ForwardOut:
    """Build the loss graph for one record under the configured ablations.

    With masking disabled (ratio 0) the unmasked text flows through the
    encoder, which is the prediction-time path.
    """
    enc = model.encoder
    text = linear(Tensor(record.text_feat), enc.projections.text)
    if need_mlm and mask_ratio > 0.0:
        masked = apply_mask(text, record.token_ids, mask_ratio, enc.mask_embedding, mask_rng)
    else:
        masked = MaskedBatch(text, [], [], 0.0)

    use_audio = not cfg.no_a
    use_visual = not cfg.no_v
    d = model.config.d_model

    if cfg.no_trans:
        # Reconstruction and fusion fall back to the projected text sequence
        # alone; no cross-modal attention is applied.
        text_seq = add_positions(masked.masked_text_feat)
        audio_text = visual_text = None
    else:
        audio_text, visual_text = encode(
            masked,
            record.audio_feat,
            record.keyframe_feat,
            enc,
            use_audio=use_audio,
            use_visual=use_visual,
        )

    mlm = None
    if need_mlm and masked.mask_positions:
        if cfg.no_trans:
            mlm = mlm_loss(
                text_seq if use_audio else None,
                text_seq if use_visual else None,
                masked.mask_positions,
                masked.target_ids,
                model.decoder_audio,
                model.decoder_visual,
            )
        else:
            mlm = mlm_loss(
                audio_text,
                visual_text,
                masked.mask_positions,
                masked.target_ids,
                model.decoder_audio,
                model.decoder_visual,
            )

    p_fake = None
    fnd = None
    if need_fnd:
        zero_slot = Tensor(np.zeros((1, d)))
        if cfg.no_trans:
            pooled = pool_sequence(text_seq)
            x_at = pooled if use_audio else zero_slot
            x_it = pooled if use_visual else zero_slot
        else:
            x_at = pool_sequence(audio_text) if audio_text is not None else zero_slot
            x_it = pool_sequence(visual_text) if visual_text is not None else zero_slot
        x_v = Tensor(aggregate_motion(record.motion_feat)[None, :])
        x_c = Tensor(aggregate_comments(record.comment_feats, record.comment_likes)[None, :])
        x_p = Tensor(record.publisher_feat[None, :])
        fused = fuse(x_at, x_it, x_v, x_c, x_p, model.fusion)
        p_fake = classify(fused, model.fusion)
        label = getattr(record, "label", None)
        if label is not None:
            fnd = fnd_loss(p_fake, label)
    return ForwardOut(p_fake=p_fake, fnd=fnd, mlm=mlm)


def _mean_scalars(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / len(terms))


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def _decoder_grad_max(model: DetectionModel) -> float:
    worst = 0.0
    for _, t in model.partitions()["decoders"]:
        if t.grad is not None and t.grad.size:
            worst = max(worst, float(np.abs(t.grad).max()))
    return worst


def train(model: DetectionModel, train_records: list, cfg: TrainConfig) -> PhaseReport:
    """Joint minimization of detection plus weighted reconstruction loss.

    All three partitions update. With the reconstruction task disabled (zero
    weight or the no_mlm flag) this reduces to plain supervised training and
    the decoder partition receives identically zero gradients.
    """
    if not train_records:
        raise ConfigError("training needs a non-empty record list")
    params = model.parameters()
    state = AdamState.for_params(params, lr=cfg.train_lr)
    report = PhaseReport(phase="train", checksums_before=model.checksums())
    started = time.perf_counter()
    mlm_on = cfg.mlm_active
    try:
        for epoch in range(cfg.train_epochs):
            t0 = time.perf_counter()
            order = np.random.default_rng([cfg.seed, _TAG_TRAIN_SHUFFLE, epoch]).permutation(
                len(train_records)
            )
            mask_rng = np.random.default_rng([cfg.seed, _TAG_TRAIN_MASK, epoch])
            fnd_sum = mlm_sum = total_sum = 0.0
            count = 0
            grad_max = 0.0
            for batch in _batches(order, cfg.batch_size):
                zero_grad(params)
                fnds, mlms = [], []
                for i in batch:
                    out = record_forward(
                        model,
                        train_records[i],
                        cfg,
                        mask_rng=mask_rng,
                        mask_ratio=cfg.mask_ratio if mlm_on else 0.0,
                        need_fnd=True,
                        need_mlm=mlm_on,
                    )
                    fnds.append(out.fnd)
                    if out.mlm is not None:
                        mlms.append(out.mlm)
                loss_fnd = _mean_scalars(fnds)
                total = loss_fnd
                loss_mlm = None
                if mlms:
                    loss_mlm = _mean_scalars(mlms)
                    total = ad.add(total, ad.mul(loss_mlm, cfg.aux_weight))
                backward(total)
                grad_max = max(grad_max, _decoder_grad_max(model))
                adam_step(params, [p.grad for p in params], state)
                n = len(batch)
                fnd_sum += loss_fnd.item() * n
                mlm_sum += loss_mlm.item() * n if loss_mlm is not None else 0.0
                total_sum += total.item() * n
                count += n
            report.epochs.append(
                EpochStats(
                    epoch=epoch,
                    fnd_loss=fnd_sum / count,
                    mlm_loss=(mlm_sum / count) if mlm_on else None,
                    total_loss=total_sum / count,
                    wall_time_s=time.perf_counter() - t0,
                    decoder_grad_max=grad_max,
                )
            )
    except NumericsError as e:
        report.checksums_after = model.checksums()
        report.wall_time_s = time.perf_counter() - started
        raise TrainingDiverged(f"training diverged: {e}", report) from e
    report.checksums_after = model.checksums()
    report.wall_time_s = time.perf_counter() - started
    return report


def _require_unlabeled(records: list) -> None:
    for r in records:
        if getattr(r, "label", None) is not None:
            raise ValueError(
                "test-time adaptation must receive label-stripped records; use strip_labels()"
            )


def mean_mlm_loss(model: DetectionModel, records: list, cfg: TrainConfig) -> float:
    """Mean reconstruction loss over a pool with a fixed per-record masking stream.

    The per-record streams depend only on the seed and record index, so before
    and after measurements around adaptation are paired.
    """
    total = 0.0
    for idx, r in enumerate(records):
        rng = np.random.default_rng([cfg.seed, _TAG_EVAL_MASK, idx])
        out = record_forward(
            model, r, cfg, mask_rng=rng, mask_ratio=cfg.mask_ratio, need_fnd=False, need_mlm=True
        )
        total += out.mlm.item()
    return total / len(records)


def ttt_adapt(model: DetectionModel, test_records: list, cfg: TrainConfig) -> PhaseReport:
    """Minimize the reconstruction loss over encoder and decoder partitions only.

    Labels are never read: the operation refuses records that still carry one.
    Offline mode sweeps the whole pool for ttt_epochs; online-batch mode adapts
    on each batch in order, optionally resetting the adaptable partitions to
    their post-training values between batches. The classifier partition is
    verified bitwise unchanged.
    """
    if not test_records:
        raise ConfigError("test-time adaptation needs a non-empty test pool")
    _require_unlabeled(test_records)
    params = model.parameters("encoder") + model.parameters("decoders")
    state = AdamState.for_params(params, lr=cfg.effective_ttt_lr)
    report = PhaseReport(phase="ttt", checksums_before=model.checksums())
    started = time.perf_counter()
    report.extra["mlm_before"] = mean_mlm_loss(model, test_records, cfg)

    def adapt_on(indices: np.ndarray, mask_rng, epoch: int, t0: float) -> None:
        mlm_sum = 0.0
        count = 0
        for batch in _batches(indices, cfg.batch_size):
            zero_grad(params)
            losses = []
            for i in batch:
                out = record_forward(
                    model,
                    test_records[i],
                    cfg,
                    mask_rng=mask_rng,
                    mask_ratio=cfg.mask_ratio,
                    need_fnd=False,
                    need_mlm=True,
                )
                losses.append(out.mlm)
            loss = _mean_scalars(losses)
            backward(loss)
            adam_step(params, [p.grad for p in params], state)
            mlm_sum += loss.item() * len(batch)
            count += len(batch)
        report.epochs.append(
            EpochStats(
                epoch=epoch,
                fnd_loss=None,
                mlm_loss=mlm_sum / count if count else None,
                total_loss=mlm_sum / count if count else 0.0,
                wall_time_s=time.perf_counter() - t0,
                decoder_grad_max=_decoder_grad_max(model),
            )
        )

    try:
        if cfg.ttt_mode == "offline":
            for epoch in range(cfg.ttt_epochs):
                t0 = time.perf_counter()
                order = np.random.default_rng([cfg.seed, _TAG_TTT_SHUFFLE, epoch]).permutation(
                    len(test_records)
                )
                mask_rng = np.random.default_rng([cfg.seed, _TAG_TTT_MASK, epoch])
                adapt_on(order, mask_rng, epoch, t0)
        else:
            snapshot = model.snapshot(("encoder", "decoders")) if cfg.reset_between_batches else None
            mask_rng = np.random.default_rng([cfg.seed, _TAG_TTT_MASK, 0])
            for b, batch in enumerate(_batches(np.arange(len(test_records)), cfg.batch_size)):
                if snapshot is not None:
                    model.restore(snapshot)
                for epoch in range(cfg.ttt_epochs):
                    adapt_on(batch, mask_rng, epoch, time.perf_counter())
    except NumericsError as e:
        report.checksums_after = model.checksums()
        report.wall_time_s = time.perf_counter() - started
        raise TrainingDiverged(f"test-time adaptation diverged: {e}", report) from e

    report.extra["mlm_after"] = mean_mlm_loss(model, test_records, cfg)
    report.checksums_after = model.checksums()
    report.wall_time_s = time.perf_counter() - started
    if report.checksums_after["classifier"] != report.checksums_before["classifier"]:
        raise AssertionError("classifier partition changed during test-time adaptation")
    return report


def predict(model: DetectionModel, records: list, cfg: TrainConfig | None = None) -> list[Prediction]:
    """Frozen forward pass on unmasked text; threshold 0.5 maps onto the fake class."""
    cfg = cfg or TrainConfig()
    out = []
    for r in records:
        fwd = record_forward(model, r, cfg, mask_ratio=0.0, need_fnd=True, need_mlm=False)
        p = fwd.p_fake.item()
        out.append(Prediction(video_id=r.video_id, p_fake=p, label_pred=1 if p >= 0.5 else 0))
    return out


@dataclass
class FoldResult:
    fold: int
    metrics: MetricsReport
    metrics_before_ttt: MetricsReport | None
    train_report: PhaseReport
    ttt_report: PhaseReport | None
    checksums_post_init: dict[str, str]
    checksums_final: dict[str, str]
    wall_time_s: float
    predictions: list[Prediction]

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "metrics": self.metrics.to_dict(),
            "metrics_before_ttt": self.metrics_before_ttt.to_dict() if self.metrics_before_ttt else None,
            "train_report": self.train_report.to_dict(),
            "ttt_report": self.ttt_report.to_dict() if self.ttt_report else None,
            "checksums_post_init": self.checksums_post_init,
            "checksums_final": self.checksums_final,
            "wall_time_s": self.wall_time_s,
        }


@dataclass
class ExperimentResult:
    folds: list[FoldResult]
    mean: dict
    config: dict

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "folds": [f.to_dict() for f in self.folds],
            "mean_metrics": self.mean,
        }


def run_fold(
    header: DatasetHeader,
    records: list,
    split: SplitPlan,
    fold: int,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
) -> FoldResult:
    """Initialize, train, adapt (unless ablated), and evaluate one fold."""
    started = time.perf_counter()
    train_records, test_records = split.fold_records(records, fold)
    if not test_records:
        raise ConfigError(f"fold {fold} has an empty test side")
    model = DetectionModel(header, model_cfg, seed=[cfg.seed, fold])
    post_init = model.checksums()
    train_report = train(model, train_records, cfg)
    labels = [r.label for r in test_records]

    metrics_before = None
    ttt_report = None
    if cfg.ttt_active:
        metrics_before = compute_metrics(
            [p.label_pred for p in predict(model, test_records, cfg)], labels
        )
        unlabeled = strip_labels(test_records)
        if cfg.ttt_mode == "online-batch":
            predictions, ttt_report = _online_adapt_predict(model, test_records, unlabeled, cfg)
        else:
            ttt_report = ttt_adapt(model, unlabeled, cfg)
            predictions = predict(model, test_records, cfg)
    else:
        predictions = predict(model, test_records, cfg)

    metrics = compute_metrics([p.label_pred for p in predictions], labels)
    return FoldResult(
        fold=fold,
        metrics=metrics,
        metrics_before_ttt=metrics_before,
        train_report=train_report,
        ttt_report=ttt_report,
        checksums_post_init=post_init,
        checksums_final=model.checksums(),
        wall_time_s=time.perf_counter() - started,
        predictions=predictions,
    )


def _online_adapt_predict(model, test_records, unlabeled, cfg):
    """Adapt on each test batch, predict it immediately, optionally reset between batches."""
    report = PhaseReport(phase="ttt-online", checksums_before=model.checksums())
    started = time.perf_counter()
    report.extra["mlm_before"] = mean_mlm_loss(model, unlabeled, cfg)
    snapshot = model.snapshot(("encoder", "decoders")) if cfg.reset_between_batches else None
    predictions: list[Prediction] = []
    batch_cfg = replace(cfg, ttt_mode="offline", ttt_epochs=cfg.ttt_epochs)
    for batch_start in range(0, len(test_records), cfg.batch_size):
        if snapshot is not None:
            model.restore(snapshot)
        chunk_unlabeled = unlabeled[batch_start : batch_start + cfg.batch_size]
        chunk_records = test_records[batch_start : batch_start + cfg.batch_size]
        sub = ttt_adapt(model, chunk_unlabeled, batch_cfg)
        report.epochs.extend(sub.epochs)
        predictions.extend(predict(model, chunk_records, cfg))
    report.extra["mlm_after"] = mean_mlm_loss(model, unlabeled, cfg)
    report.checksums_after = model.checksums()
    report.wall_time_s = time.perf_counter() - started
    return predictions, report


def run_pipeline(
    header: DatasetHeader,
    records: list,
    split: SplitPlan,
    cfg: TrainConfig,
    model_cfg: ModelConfig = ModelConfig(),
    jobs: int = 1,
) -> ExperimentResult:
    """Run every fold of the split and aggregate per-fold metrics into a mean report.

    Folds are independent; with jobs > 1 they run in parallel worker
    processes. Results are reduced in fold order, so the aggregate is
    deterministic either way.
    """
    folds = list(range(split.fold_count))
    if jobs > 1 and len(folds) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(run_fold, header, records, split, f, cfg, model_cfg) for f in folds
            ]
            results = [fut.result() for fut in futures]
    else:
        results = [run_fold(header, records, split, f, cfg, model_cfg) for f in folds]
    results.sort(key=lambda r: r.fold)
    return ExperimentResult(
        folds=results,
        mean=mean_metrics([r.metrics for r in results]),
        config={"train": cfg.to_dict(), "model": model_cfg.__dict__, "split": split.mode},
    )
