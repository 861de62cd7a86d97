"""Clip selection and ordering: threshold filter, in-task filter, chronological
sort, unique-step selection, and stochastic neighbor swaps.

Stages compose in that fixed order; each is gated by a config flag. Filters
and the sort are deterministic per video (dedupe uses a video-derived rng),
while the neighbor swap is meant to be re-sampled every epoch by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import TaskSpec, VideoRecord
from .mining import PseudoLabelSet, TopicMatch
from .textsim import ScoredLabel


class AugmentError(ValueError):
    pass


@dataclass
class AugmentConfig:
    threshold_enabled: bool = False
    threshold_value: float = 1.0
    in_task: bool = False
    sort: bool = False
    unique: bool = False
    swap: bool = False
    swap_prob: float = 0.15

    def validate(self) -> None:
        if not (0.0 <= self.swap_prob <= 1.0):
            raise AugmentError(f"swap_prob must be in [0, 1], got {self.swap_prob}")
        if self.sort and not self.in_task:
            raise AugmentError("sort requires in_task (step order comes from the matched task)")
        if (self.unique or self.swap) and not self.sort:
            raise AugmentError("unique and swap require sort")


@dataclass
class AugmentedSequence:
    clip_indices: list[int]
    targets: np.ndarray  # (len(clip_indices), |S|) multi-hot


def compute_dot_scores(video: VideoRecord, labels: PseudoLabelSet,
                       step_embeddings: np.ndarray) -> np.ndarray:
    """Raw dot of each caption with its top-1 pseudo-label step embedding."""
    top1 = labels.top1_ids()
    return np.einsum(
        "ij,ij->i", video.caption_embeddings, step_embeddings[top1]
    )


def filter_threshold(dot_scores: np.ndarray, tau: float) -> list[int]:
    """Indices with dot score strictly greater than tau."""
    return [i for i, s in enumerate(dot_scores) if s > tau]


def filter_in_task(kept: list[int], labels: PseudoLabelSet, topic_task: TaskSpec
                   ) -> tuple[list[int], dict[int, list[ScoredLabel]]]:
    """Keep clips with at least one pseudo-label in the topic's steps.

    Returns the surviving indices and, per survivor, its labels restricted to
    the topic's step set (score order preserved).
    """
    in_task = set(topic_task.step_ids)
    out: list[int] = []
    restricted: dict[int, list[ScoredLabel]] = {}
    for i in kept:
        hits = [sl for sl in labels.per_clip[i] if sl.step_id in in_task]
        if hits:
            out.append(i)
            restricted[i] = hits
    return out, restricted


def sort_by_steps(kept: list[int], best_labels: dict[int, int],
                  topic_task: TaskSpec) -> list[int]:
    """Stable sort by the best label's position in the task's step order."""
    positions = {sid: pos for pos, sid in enumerate(topic_task.step_ids)}
    for i in kept:
        if best_labels[i] not in positions:
            raise AugmentError(
                f"clip {i} has best label {best_labels[i]} outside the matched task"
            )
    return sorted(kept, key=lambda i: positions[best_labels[i]])


def dedupe_steps(ordered: list[int], best_labels: dict[int, int],
                 rng: np.random.Generator) -> list[int]:
    """One uniformly chosen survivor per run of clips sharing the same label."""
    out: list[int] = []
    run: list[int] = []
    for i in ordered:
        if run and best_labels[run[-1]] != best_labels[i]:
            out.append(run[int(rng.integers(0, len(run)))])
            run = []
        run.append(i)
    if run:
        out.append(run[int(rng.integers(0, len(run)))])
    return out


def swap_neighbors(ordered: list[int], p: float, rng: np.random.Generator) -> list[int]:
    """Single left-to-right pass; each adjacent pair swapped with probability p.

    Swaps act on current contents, so a clip may travel more than one slot.
    """
    if not (0.0 <= p <= 1.0):
        raise AugmentError(f"swap probability must be in [0, 1], got {p}")
    out = list(ordered)
    for i in range(len(out) - 1):
        if rng.random() < p:
            out[i], out[i + 1] = out[i + 1], out[i]
    return out


def _best_in(labels: list[ScoredLabel]) -> int:
    # lists are score-descending, so the head is the best label
    return labels[0].step_id


def prepare_sequence(video: VideoRecord, labels: PseudoLabelSet, topic: TopicMatch,
                     tasks_by_id: dict[int, TaskSpec], step_embeddings: np.ndarray,
                     config: AugmentConfig, rng: np.random.Generator
                     ) -> tuple[list[int], dict[int, list[ScoredLabel]]]:
    """Deterministic stages (threshold, in-task, sort, unique) for one video.

    Returns the ordered kept indices plus each kept clip's effective labels.
    Never returns an empty sequence: if the filters remove everything, the
    single highest-dot clip is retained with its raw labels.
    """
    config.validate()
    dots = compute_dot_scores(video, labels, step_embeddings)
    kept = list(range(video.num_clips))
    effective: dict[int, list[ScoredLabel]] = {
        i: list(labels.per_clip[i]) for i in kept
    }
    if config.threshold_enabled:
        kept = filter_threshold(dots, config.threshold_value)
    if config.in_task:
        task = tasks_by_id[topic.task_id]
        kept, restricted = filter_in_task(kept, labels, task)
        effective = restricted
    if not kept:
        # fallback: keep the single best clip so path labels are never dropped
        best = int(np.argmax(dots))
        return [best], {best: list(labels.per_clip[best])}
    if config.sort:
        task = tasks_by_id[topic.task_id]
        best_labels = {i: _best_in(effective[i]) for i in kept}
        kept = sort_by_steps(kept, best_labels, task)
        if config.unique:
            kept = dedupe_steps(kept, best_labels, rng)
    return kept, {i: effective[i] for i in kept}


def build_targets(kept: list[int], effective: dict[int, list[ScoredLabel]],
                  num_steps: int) -> np.ndarray:
    targets = np.zeros((len(kept), num_steps))
    for row, i in enumerate(kept):
        for sl in effective[i]:
            targets[row, sl.step_id] = 1.0
    return targets


def apply_pipeline(video: VideoRecord, labels: PseudoLabelSet, topic: TopicMatch,
                   tasks_by_id: dict[int, TaskSpec], step_embeddings: np.ndarray,
                   num_steps: int, config: AugmentConfig,
                   rng: np.random.Generator) -> AugmentedSequence:
    """Full pipeline for one video: filters, sort, unique, then swap."""
    kept, effective = prepare_sequence(
        video, labels, topic, tasks_by_id, step_embeddings, config, rng
    )
    if config.swap:
        kept = swap_neighbors(kept, config.swap_prob, rng)
    return AugmentedSequence(
        clip_indices=kept, targets=build_targets(kept, effective, num_steps)
    )
