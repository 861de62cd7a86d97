"""Fine-tuning and evaluation for the three downstream tasks: task
recognition (video-level class from the pooled embedding), step recognition
(per-clip class from layer-1 outputs), and step forecasting (per-clip class
for a masked position given only its prefix).

The encoder is initialized from a pre-training checkpoint (or freshly, for
the random-init baseline); task heads are always newly initialized since the
downstream label spaces differ from pre-training. Forecasting adds a learned
mask vector, trained only here. All downstream losses are cross-entropy.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import mining, neuralcore
from .corpus import CorpusBundle, stable_id_hash
from .neuralcore import AdamState, ModelConfig

TASKS = ("task_recognition", "step_recognition", "step_forecasting")
TASK_ALIASES = {"tr": "task_recognition", "sr": "step_recognition",
                "sf": "step_forecasting"}


class DownstreamError(ValueError):
    pass


@dataclass
class FinetuneConfig:
    task: str = "task_recognition"
    batch_size: int = 16
    epochs: int = 100
    lr: float = 1e-4
    weight_decay: float = 1e-3
    seed: int = 0
    holdout_fraction: float = 0.25
    random_init: bool = False

    def validate(self) -> None:
        if self.task not in TASKS:
            raise DownstreamError(f"unknown task {self.task!r}")
        if self.batch_size < 1:
            raise DownstreamError("batch_size must be >= 1")


@dataclass
class EvalReport:
    task: str
    accuracy: float
    sample_count: int
    per_class: dict[int, dict[str, int]]

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "accuracy": self.accuracy,
            "n": self.sample_count,
            "per_class": {
                str(k): v for k, v in sorted(self.per_class.items())
            },
        }


@dataclass
class TunedModel:
    config: ModelConfig
    params: dict[str, np.ndarray]
    task: str
    num_classes: int


def transfer_label_spaces(bundle: CorpusBundle, labels) -> dict:
    """Label spaces of the transfer corpus: leaf classes and step classes."""
    leaf_level = bundle.levels()
    leaves = bundle.nodes_at_level(leaf_level)
    leaf_index = {n.node_id: i for i, n in enumerate(leaves)}
    return {"leaf_index": leaf_index, "num_leaves": len(leaves),
            "num_steps": len(bundle.steps)}


def build_forecast_input(clips: np.ndarray, i: int, mask_vec: np.ndarray) -> np.ndarray:
    """Clips 1..i (1-indexed) with position i replaced by the mask vector.

    Future clips are excluded; i must leave at least one prior clip.
    """
    n = clips.shape[0]
    if i < 2:
        raise DownstreamError(
            f"forecast position must be >= 2 (needs at least one prior clip), got {i}"
        )
    if i > n:
        raise DownstreamError(f"forecast position {i} beyond video length {n}")
    out = clips[:i].copy()
    out[i - 1] = mask_vec
    return out


@dataclass
class _Example:
    x: np.ndarray        # (n, d) input clips (mask already applied for SF)
    label: int
    label_pos: int       # position carrying the label; -1 = video-level
    masked_pos: int      # position holding the mask vector; -1 = none


def _video_examples(task: str, clips: np.ndarray, leaf_class: int,
                    step_labels: list[int], mask_vec: np.ndarray,
                    max_len: int) -> list[_Example]:
    clips = clips[:max_len]
    steps = step_labels[: clips.shape[0]]
    if task == "task_recognition":
        return [_Example(x=clips, label=leaf_class, label_pos=-1, masked_pos=-1)]
    if task == "step_recognition":
        return [
            _Example(x=clips, label=s, label_pos=i, masked_pos=-1)
            for i, s in enumerate(steps)
        ]
    examples = []
    for i in range(2, clips.shape[0] + 1):
        x = build_forecast_input(clips, i, mask_vec)
        examples.append(
            _Example(x=x, label=steps[i - 1], label_pos=i - 1, masked_pos=i - 1)
        )
    return examples


def _batches(examples: list[_Example], batch_size: int, dim: int):
    for start in range(0, len(examples), batch_size):
        chunk = examples[start: start + batch_size]
        n_max = max(e.x.shape[0] for e in chunk)
        x = np.zeros((len(chunk), n_max, dim))
        valid = np.zeros((len(chunk), n_max), dtype=bool)
        for b, e in enumerate(chunk):
            x[b, : e.x.shape[0]] = e.x
            valid[b, : e.x.shape[0]] = True
        yield chunk, x, valid


def _forward_logits(params, config, task, x, valid):
    h1, v, cache = neuralcore.encoder_forward(params, config, x, valid)
    if task == "task_recognition":
        logits, hc = neuralcore.head_forward(params, "down.", v)
    else:
        logits, hc = neuralcore.head_forward(params, "down.", h1)
    return logits, (cache, hc, h1, v)


def _ce_and_grad(logits, rows):
    """Summed CE over the selected (index, class) rows; gradient matches."""
    grad = np.zeros_like(logits)
    loss = 0.0
    for idx, cls in rows:
        z = logits[idx]
        zmax = z.max()
        ez = np.exp(z - zmax)
        soft = ez / ez.sum()
        loss += float(np.log(ez.sum()) + zmax - z[cls])
        g = soft.copy()
        g[cls] -= 1.0
        grad[idx] = g
    return loss, grad


def init_finetune_params(checkpoint_path, model_config: ModelConfig,
                         num_classes: int, task: str, seed: int,
                         random_init: bool):
    """Encoder from checkpoint (or fresh), new head, zero mask vector."""
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0xF17E])
    if random_init or checkpoint_path is None:
        config = model_config
        params = neuralcore.init_params(config, rng)
    else:
        config, params, _ = neuralcore.load_checkpoint(checkpoint_path)
    # drop pre-training heads; downstream label spaces are different
    params = {k: v for k, v in params.items()
              if k.startswith("enc1.") or k.startswith("enc2.")}
    d = config.dim
    params["down.W1"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))
    params["down.b1"] = np.zeros(d)
    params["down.W2"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, num_classes))
    params["down.b2"] = np.zeros(num_classes)
    if task == "step_forecasting":
        params["mask_vec"] = np.zeros(d)
    return config, params


def _gather_examples(bundle: CorpusBundle, labels, task: str,
                     mask_vec, max_len: int):
    spaces = transfer_label_spaces(bundle, labels)
    examples_per_video = []
    for video in bundle.videos:
        vl = labels.get(video.video_id)
        if vl is None:
            raise DownstreamError(f"no labels for video {video.video_id}")
        step_labels = vl.labels.top1_ids()
        leaf_class = spaces["leaf_index"][video.leaf_node]
        examples_per_video.append(
            (video.video_id,
             _video_examples(task, video.clip_embeddings, leaf_class,
                             step_labels, mask_vec, max_len))
        )
    return spaces, examples_per_video


def finetune(checkpoint_path, bundle: CorpusBundle,
             labels: dict[str, mining.VideoLabels],
             config: FinetuneConfig,
             model_config: ModelConfig | None = None) -> tuple[TunedModel, EvalReport]:
    """Train on the transfer corpus and evaluate on its held-out videos."""
    config.validate()
    if model_config is None and checkpoint_path is None:
        raise DownstreamError("need a checkpoint or an explicit model config")
    if model_config is None:
        model_config, _, _ = neuralcore.load_checkpoint(checkpoint_path)
    if model_config.dim != bundle.dim:
        raise DownstreamError(
            f"model dim {model_config.dim} != corpus dim {bundle.dim}"
        )
    spaces = transfer_label_spaces(bundle, labels)
    num_classes = (
        spaces["num_leaves"] if config.task == "task_recognition"
        else spaces["num_steps"]
    )
    enc_config, params = init_finetune_params(
        checkpoint_path, model_config, num_classes, config.task,
        config.seed, config.random_init,
    )
    # evaluation has no dropout; fine-tuning keeps it off as well
    enc_config = ModelConfig.from_dict({**enc_config.to_dict(), "dropout": 0.0})

    mask_vec = params.get("mask_vec", np.zeros(enc_config.dim))
    _, per_video = _gather_examples(
        bundle, labels, config.task, mask_vec, enc_config.max_seq_len
    )
    rng = np.random.default_rng([config.seed & 0xFFFFFFFF, 0x5EED])
    order = rng.permutation(len(per_video))
    n_hold = max(1, int(round(len(per_video) * config.holdout_fraction)))
    hold_ids = {per_video[i][0] for i in order[:n_hold]}
    train_examples = [
        e for vid, exs in per_video for e in exs if vid not in hold_ids
    ]
    if not train_examples:
        raise DownstreamError("no training examples after the hold-out split")

    adam = AdamState.zeros_like(params)
    for epoch in range(1, config.epochs + 1):
        perm = np.random.default_rng(
            [config.seed & 0xFFFFFFFF, 0xE60C, epoch]
        ).permutation(len(train_examples))
        shuffled = [train_examples[i] for i in perm]
        for chunk, x, valid in _batches(shuffled, config.batch_size, enc_config.dim):
            if config.task == "step_forecasting":
                # mask vector is learned; refresh its slot in the inputs
                for b, e in enumerate(chunk):
                    if e.masked_pos >= 0:
                        x[b, e.masked_pos] = params["mask_vec"]
            logits, (enc_cache, hc, h1, v) = _forward_logits(
                params, enc_config, config.task, x, valid
            )
            grads: dict[str, np.ndarray] = {}
            B = len(chunk)
            if config.task == "task_recognition":
                rows = [(b, e.label) for b, e in enumerate(chunk)]
                _, dlogits = _ce_and_grad(logits, rows)
                dv = neuralcore.head_backward(params, "down.", dlogits / B, hc, grads)
                dx = neuralcore.encoder_backward(
                    params, enc_config, None, dv, enc_cache, grads
                )
            else:
                rows = [((b, e.label_pos), e.label) for b, e in enumerate(chunk)]
                _, dlogits = _ce_and_grad(logits, rows)
                dh1 = neuralcore.head_backward(params, "down.", dlogits / B, hc, grads)
                dx = neuralcore.encoder_backward(
                    params, enc_config, dh1, None, enc_cache, grads
                )
            if "mask_vec" in params:
                gmask = np.zeros_like(params["mask_vec"])
                for b, e in enumerate(chunk):
                    if e.masked_pos >= 0:
                        gmask += dx[b, e.masked_pos]
                grads["mask_vec"] = gmask
            for name in params:
                grads.setdefault(name, np.zeros_like(params[name]))
            neuralcore.adam_step(params, grads, adam, config.lr, config.weight_decay)

    model = TunedModel(
        config=enc_config, params=params, task=config.task,
        num_classes=num_classes,
    )
    report = evaluate(model, bundle, labels, video_ids=hold_ids,
                      batch_size=config.batch_size)
    return model, report


def evaluate(model: TunedModel, bundle: CorpusBundle,
             labels: dict[str, mining.VideoLabels],
             video_ids=None, batch_size: int = 16) -> EvalReport:
    """Accuracy of the tuned model over (a subset of) the corpus."""
    mask_vec = model.params.get("mask_vec", np.zeros(model.config.dim))
    _, per_video = _gather_examples(
        bundle, labels, model.task, mask_vec, model.config.max_seq_len
    )
    examples = [
        e for vid, exs in per_video for e in exs
        if video_ids is None or vid in video_ids
    ]
    if not examples:
        raise DownstreamError("no evaluation examples selected")
    correct = 0
    per_class: dict[int, dict[str, int]] = {}
    for chunk, x, valid in _batches(examples, batch_size, model.config.dim):
        logits, _ = _forward_logits(model.params, model.config, model.task, x, valid)
        for b, e in enumerate(chunk):
            z = logits[b] if e.label_pos < 0 else logits[b, e.label_pos]
            pred = int(np.argmax(z))
            stats = per_class.setdefault(e.label, {"correct": 0, "total": 0})
            stats["total"] += 1
            if pred == e.label:
                stats["correct"] += 1
                correct += 1
    return EvalReport(
        task=model.task,
        accuracy=100.0 * correct / len(examples),
        sample_count=len(examples),
        per_class=per_class,
    )


def save_report(report: EvalReport, path) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


def save_tuned_model(model: TunedModel, path) -> None:
    """Tuned weights as a checkpoint plus a JSON sidecar for the extras."""
    enc = {k: v for k, v in model.params.items()
           if k.startswith("enc1.") or k.startswith("enc2.")}
    # head and mask ride in a sidecar; the base format only knows model blocks
    extras = {k: v.tolist() for k, v in model.params.items() if k not in enc}
    neuralcore.save_checkpoint(path, model.config, _with_placeholder_heads(model), None)
    with open(str(path) + ".head.json", "w") as fh:
        json.dump({"task": model.task, "num_classes": model.num_classes,
                   "extras": extras}, fh)


def _with_placeholder_heads(model: TunedModel) -> dict[str, np.ndarray]:
    shapes = neuralcore.param_shapes(model.config)
    full = {}
    for name, shape in shapes.items():
        if name in model.params:
            full[name] = model.params[name]
        else:
            full[name] = np.zeros(shape)
    return full


def load_tuned_model(path) -> TunedModel:
    config, params, _ = neuralcore.load_checkpoint(path)
    with open(str(path) + ".head.json") as fh:
        side = json.load(fh)
    kept = {k: v for k, v in params.items()
            if k.startswith("enc1.") or k.startswith("enc2.")}
    for k, v in side["extras"].items():
        kept[k] = np.asarray(v, dtype=float)
    return TunedModel(
        config=config, params=kept, task=side["task"],
        num_classes=int(side["num_classes"]),
    )
