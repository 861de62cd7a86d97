"""Joint pre-training loop with metric logging, periodic checkpointing, and
the analytical early-stopping analyzer.

Each epoch reshuffles the video order, re-samples the neighbor-swap
augmentation, and runs forward/backward/Adam over padded batches. A fixed
held-out slice of videos supplies the per-epoch clip-step accuracy that the
analyzer consumes: a degree-n least-squares polynomial is fitted to the
accuracy curve (domain rescaled to [0, 1] for conditioning) and the epoch
maximizing its first derivative is the early-stop epoch.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import augment, mining, neuralcore
from .augment import AugmentConfig
from .corpus import CorpusBundle, stable_id_hash
from .neuralcore import AdamState, Batch, ModelConfig


class TrainError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 256
    lr: float = 1e-4
    weight_decay: float = 1e-3
    checkpoint_interval: int = 50
    seed: int = 0
    holdout_fraction: float = 0.1
    poly_degree: int = 10
    patience: int = 50
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.epochs < 1:
            raise TrainError("epochs must be >= 1")
        if self.batch_size < 1:
            raise TrainError("batch_size must be >= 1")
        if self.checkpoint_interval < 1:
            raise TrainError("checkpoint_interval must be >= 1")
        self.augment.validate()


@dataclass
class EpochMetrics:
    epoch: int
    step_acc: float
    loss_step: float
    loss_path: float
    loss_joint: float


@dataclass
class MetricSeries:
    records: list[EpochMetrics]

    def accuracies(self) -> np.ndarray:
        return np.array([r.step_acc for r in self.records])

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class StopAnalysis:
    coefficients: list[float]
    domain_offset: float
    domain_scale: float
    e_star: int
    saturation_epoch: int
    selected_checkpoint_epoch: int

    def to_dict(self) -> dict:
        return {
            "coefficients": self.coefficients,
            "domain_transform": {
                "offset": self.domain_offset, "scale": self.domain_scale,
                "mapping": "t = (epoch - offset) / scale",
            },
            "e_star": self.e_star,
            "saturation_epoch": self.saturation_epoch,
            "selected_checkpoint_epoch": self.selected_checkpoint_epoch,
        }


@dataclass
class PreparedVideo:
    video_id: str
    clips: np.ndarray             # original clip embeddings (n, d)
    kept: list[int]               # ordered kept indices before swap
    effective: dict               # kept index -> effective labels
    path_targets: np.ndarray      # (L,) per-level class index
    targets: np.ndarray           # (len(kept), |S|)
    gold_top1: np.ndarray         # (len(kept),) best label per kept clip


def level_index_maps(bundle: CorpusBundle) -> list[dict[int, int]]:
    """Per level, node_id -> dense class index (sorted by node_id)."""
    maps = []
    for lvl in range(1, bundle.levels() + 1):
        nodes = bundle.nodes_at_level(lvl)
        maps.append({n.node_id: i for i, n in enumerate(nodes)})
    return maps


def prepare_videos(bundle: CorpusBundle, labels: dict[str, mining.VideoLabels],
                   config: TrainConfig) -> list[PreparedVideo]:
    """Deterministic augmentation stages, computed once and cached."""
    step_embs = bundle.step_embeddings()
    tasks_by_id = {t.task_id: t for t in bundle.tasks}
    idx_maps = level_index_maps(bundle)
    num_steps = len(bundle.steps)
    prepared = []
    for video in bundle.videos:
        vl = labels.get(video.video_id)
        if vl is None:
            raise TrainError(f"no mined labels for video {video.video_id}")
        rng = np.random.default_rng(
            [config.seed & 0xFFFFFFFF, stable_id_hash(video.video_id)]
        )
        kept, effective = augment.prepare_sequence(
            video, vl.labels, vl.topic, tasks_by_id, step_embs,
            config.augment, rng,
        )
        kept = kept[: config.model.max_seq_len]
        path_targets = np.array(
            [idx_maps[lvl][node] for lvl, node in enumerate(vl.path)]
        )
        targets = augment.build_targets(kept, effective, num_steps)
        gold = np.array([effective[i][0].step_id for i in kept])
        prepared.append(
            PreparedVideo(
                video_id=video.video_id,
                clips=video.clip_embeddings,
                kept=kept,
                effective=effective,
                path_targets=path_targets,
                targets=targets,
                gold_top1=gold,
            )
        )
    return prepared


def _epoch_sequences(prepared: list[PreparedVideo], config: TrainConfig,
                     epoch: int) -> list[tuple[PreparedVideo, list[int], np.ndarray, np.ndarray]]:
    """Per-video (video, order, targets, gold) with swap re-sampled this epoch."""
    out = []
    for pv in prepared:
        order = pv.kept
        targets = pv.targets
        gold = pv.gold_top1
        if config.augment.swap and len(order) > 1:
            rng = np.random.default_rng(
                [config.seed & 0xFFFFFFFF, epoch, stable_id_hash(pv.video_id)]
            )
            swapped = augment.swap_neighbors(order, config.augment.swap_prob, rng)
            perm = [order.index(i) for i in swapped]
            order = swapped
            targets = pv.targets[perm]
            gold = pv.gold_top1[perm]
        out.append((pv, order, targets, gold))
    return out


def make_batch(items, num_steps: int, dim: int) -> Batch:
    """Pad a list of (video, order, targets, gold) into one batch."""
    B = len(items)
    n_max = max(len(order) for _, order, _, _ in items)
    x = np.zeros((B, n_max, dim))
    valid = np.zeros((B, n_max), dtype=bool)
    step_t = np.zeros((B, n_max, num_steps))
    gold = np.full((B, n_max), -1, dtype=int)
    paths = np.stack([pv.path_targets for pv, _, _, _ in items])
    for b, (pv, order, targets, g) in enumerate(items):
        n = len(order)
        x[b, :n] = pv.clips[order]
        valid[b, :n] = True
        step_t[b, :n] = targets
        gold[b, :n] = g
    return Batch(x=x, valid=valid, step_targets=step_t, path_targets=paths,
                 gold_top1=gold)


def evaluate_step_accuracy(params, model_config, batches) -> float:
    """Top-1 clip-step accuracy: argmax step logit hits the clip's best label."""
    correct = 0
    total = 0
    for batch in batches:
        h1, _, _ = neuralcore.encoder_forward(
            params, model_config, batch.x, batch.valid
        )
        logits, _ = neuralcore.head_forward(params, "step.", h1)
        pred = logits.argmax(axis=2)
        hit = (pred == batch.gold_top1) & batch.valid
        correct += int(hit.sum())
        total += int(batch.valid.sum())
    return correct / total if total else 0.0


def evaluate_path_accuracy(params, model_config, batches) -> list[float]:
    """Per-level accuracy of the path heads on pooled video embeddings."""
    n_levels = len(model_config.level_sizes)
    correct = np.zeros(n_levels)
    total = 0
    for batch in batches:
        _, v, _ = neuralcore.encoder_forward(
            params, model_config, batch.x, batch.valid
        )
        for l in range(n_levels):
            logits, _ = neuralcore.head_forward(params, f"path{l + 1}.", v)
            correct[l] += int((logits.argmax(axis=1) == batch.path_targets[:, l]).sum())
        total += batch.x.shape[0]
    return (correct / total).tolist() if total else [0.0] * n_levels


def split_holdout(n_videos: int, fraction: float, seed: int) -> tuple[list[int], list[int]]:
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0x51A7])
    order = rng.permutation(n_videos)
    n_hold = max(1, int(round(n_videos * fraction)))
    if n_hold >= n_videos:
        raise TrainError("hold-out fraction leaves no training videos")
    return sorted(order[n_hold:].tolist()), sorted(order[:n_hold].tolist())


def pretrain(bundle: CorpusBundle, labels: dict[str, mining.VideoLabels],
             config: TrainConfig, out_dir: str,
             progress=None) -> tuple[MetricSeries, dict]:
    """Run the joint training loop; writes checkpoints and metrics.csv.

    Returns the metric series and an accounting dict (clip positions per
    epoch, checkpoint epochs, hold-out ids).
    """
    config.validate()
    os.makedirs(out_dir, exist_ok=True)

    model_config = config.model
    model_config.validate()
    if model_config.dim != bundle.dim:
        raise TrainError(f"model dim {model_config.dim} != corpus dim {bundle.dim}")

    prepared = prepare_videos(bundle, labels, config)
    train_idx, hold_idx = split_holdout(
        len(prepared), config.holdout_fraction, config.seed
    )
    train_videos = [prepared[i] for i in train_idx]
    hold_videos = [prepared[i] for i in hold_idx]
    num_steps = model_config.num_steps
    if num_steps != len(bundle.steps):
        raise TrainError("model step-head size does not match the catalog")

    hold_items = [(pv, pv.kept, pv.targets, pv.gold_top1) for pv in hold_videos]
    hold_batches = [
        make_batch(hold_items[i: i + config.batch_size], num_steps, bundle.dim)
        for i in range(0, len(hold_items), config.batch_size)
    ]

    rng = np.random.default_rng([config.seed & 0xFFFFFFFF, 0xC0DE])
    params = neuralcore.init_params(model_config, rng)
    adam = AdamState.zeros_like(params)
    drop_rng = np.random.default_rng([config.seed & 0xFFFFFFFF, 0xD20])

    clips_per_epoch = sum(len(pv.kept) for pv in train_videos)
    records: list[EpochMetrics] = []
    ckpt_epochs: list[int] = []

    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng(
            [config.seed & 0xFFFFFFFF, 0x5FF1E, epoch]
        ).permutation(len(train_videos))
        sequences = _epoch_sequences(train_videos, config, epoch)
        shuffled = [sequences[i] for i in order]

        sums = np.zeros(3)
        n_batches = 0
        for start in range(0, len(shuffled), config.batch_size):
            batch = make_batch(
                shuffled[start: start + config.batch_size], num_steps, bundle.dim
            )
            ls, lp, lj, _, cache = neuralcore.forward_losses(
                params, model_config, batch,
                drop_rng if model_config.dropout > 0 else None,
            )
            if not np.isfinite(lj):
                raise TrainError(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}"
                )
            grads, _ = neuralcore.backward(params, model_config, batch, cache)
            neuralcore.adam_step(
                params, grads, adam, config.lr, config.weight_decay
            )
            sums += (ls, lp, lj)
            n_batches += 1

        acc = evaluate_step_accuracy(params, model_config, hold_batches)
        mean_step = float(sums[0] / n_batches)
        mean_path = float(sums[1] / n_batches)
        records.append(
            EpochMetrics(
                epoch=epoch,
                step_acc=acc,
                loss_step=mean_step,
                loss_path=mean_path,
                # recorded joint is the sum of the recorded parts, bitwise
                loss_joint=mean_step + mean_path,
            )
        )
        if epoch % config.checkpoint_interval == 0 or epoch == config.epochs:
            ckpt_path = os.path.join(out_dir, f"ckpt_{epoch}.pivt")
            neuralcore.save_checkpoint(ckpt_path, model_config, params, adam)
            if epoch not in ckpt_epochs:
                ckpt_epochs.append(epoch)
        if progress is not None:
            progress(records[-1])

    series = MetricSeries(records=records)
    write_metrics_csv(series, os.path.join(out_dir, "metrics.csv"))
    accounting = {
        "clips_per_epoch": int(clips_per_epoch),
        "checkpoint_epochs": ckpt_epochs,
        "holdout_video_ids": [prepared[i].video_id for i in hold_idx],
        "train_videos": len(train_videos),
        "final_params": params,
        "final_path_accuracy": evaluate_path_accuracy(
            params, model_config, hold_batches
        ),
    }
    return series, accounting


def write_metrics_csv(series: MetricSeries, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step_acc", "loss_step", "loss_path", "loss_joint"])
        for r in series.records:
            # repr of a Python float round-trips exactly through read-back
            writer.writerow(
                [r.epoch, repr(float(r.step_acc)), repr(float(r.loss_step)),
                 repr(float(r.loss_path)), repr(float(r.loss_joint))]
            )


def read_metrics_csv(path) -> MetricSeries:
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(
                EpochMetrics(
                    epoch=int(row["epoch"]),
                    step_acc=float(row["step_acc"]),
                    loss_step=float(row["loss_step"]),
                    loss_path=float(row["loss_path"]),
                    loss_joint=float(row["loss_joint"]),
                )
            )
    if not records:
        raise TrainError(f"{path}: empty metric series")
    return MetricSeries(records=records)


# ---------------------------------------------------------------------------
# early-stop analysis

def fit_poly(values: np.ndarray, degree: int) -> tuple[np.ndarray, float, float]:
    """Least-squares degree-n fit on the [0, 1]-rescaled epoch domain.

    Returns (coefficients low-to-high in the rescaled domain, offset, scale)
    with epochs mapped by t = (e - offset) / scale.
    """
    values = np.asarray(values, dtype=float)
    m = len(values)
    if m < degree + 1:
        raise TrainError(f"need at least {degree + 1} points for a degree-{degree} fit, got {m}")
    offset = 1.0
    scale = float(max(m - 1, 1))
    t = (np.arange(1, m + 1) - offset) / scale
    V = np.vander(t, degree + 1, increasing=True)
    coeffs, *_ = np.linalg.lstsq(V, values, rcond=None)
    return coeffs, offset, scale


def eval_poly_derivative(coeffs: np.ndarray, epochs: np.ndarray,
                         offset: float, scale: float) -> np.ndarray:
    """p'(e) on the epoch grid (chain rule through the domain rescaling)."""
    dcoeffs = np.polynomial.polynomial.polyder(coeffs)
    t = (np.asarray(epochs, dtype=float) - offset) / scale
    return np.polynomial.polynomial.polyval(t, dcoeffs) / scale


def optimal_epoch(coeffs: np.ndarray, n_epochs: int,
                  offset: float = 1.0, scale: float | None = None) -> int:
    """Epoch in [1, n_epochs] maximizing p'; near-ties go to the earliest."""
    if scale is None:
        scale = float(max(n_epochs - 1, 1))
    epochs = np.arange(1, n_epochs + 1)
    deriv = eval_poly_derivative(coeffs, epochs, offset, scale)
    dmax = deriv.max()
    tol = 1e-9 * max(1.0, abs(dmax))
    return int(epochs[np.flatnonzero(deriv >= dmax - tol)[0]])


def saturation_epoch(values: np.ndarray, patience: int) -> int:
    """First epoch whose next `patience` epochs never improve on it."""
    if patience < 1:
        raise TrainError("patience must be >= 1")
    values = np.asarray(values, dtype=float)
    m = len(values)
    for t in range(m - patience):
        if values[t + 1: t + 1 + patience].max() <= values[t]:
            return t + 1
    return m


def select_checkpoint(e_star: int, saved_epochs) -> int:
    """Saved epoch nearest to e_star; ties resolve to the earlier epoch."""
    saved = sorted(saved_epochs)
    if not saved:
        raise TrainError("no saved checkpoints to select from")
    return min(saved, key=lambda e: (abs(e - e_star), e))


def analyze_stop(series: MetricSeries, degree: int, patience: int,
                 saved_epochs) -> StopAnalysis:
    values = series.accuracies()
    coeffs, offset, scale = fit_poly(values, degree)
    e_star = optimal_epoch(coeffs, len(values), offset, scale)
    sat = saturation_epoch(values, patience)
    selected = select_checkpoint(e_star, saved_epochs)
    return StopAnalysis(
        coefficients=[float(c) for c in coeffs],
        domain_offset=offset,
        domain_scale=scale,
        e_star=e_star,
        saturation_epoch=sat,
        selected_checkpoint_epoch=selected,
    )


def write_stop_analysis(analysis: StopAnalysis, path) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(analysis.to_dict(), fh, indent=2)
        fh.write("\n")
    os.replace(tmp, path)
