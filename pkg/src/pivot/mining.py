"""Label mining: per-clip step pseudo-labels, hierarchy paths, topic matches.

Every caption embedding is scored against the whole step catalog by cosine;
the top-k steps per clip become its pseudo-labels. The video's leaf node is
walked up to the root to produce its path label, and its leaf name is matched
against the task catalog to pick the topic used by in-task filtering.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import textsim
from .corpus import CorpusBundle, HierarchyNode, TaskSpec, VideoRecord
from .textsim import ScoredLabel


class MiningError(ValueError):
    pass


@dataclass
class PseudoLabelSet:
    per_clip: list[list[ScoredLabel]]

    def top1_ids(self) -> list[int]:
        return [labels[0].step_id for labels in self.per_clip]


@dataclass(frozen=True)
class TopicMatch:
    task_id: int
    score: float


@dataclass
class VideoLabels:
    video_id: str
    path: list[int]
    topic: TopicMatch
    labels: PseudoLabelSet


def mine_pseudo_labels(video: VideoRecord, step_embeddings: np.ndarray, k: int) -> PseudoLabelSet:
    """Top-k catalog steps by cosine for each caption; one list per clip."""
    step_embeddings = np.asarray(step_embeddings, dtype=float)
    if step_embeddings.ndim != 2 or step_embeddings.shape[0] == 0:
        raise MiningError("step catalog embeddings must be a non-empty matrix")
    if k < 1:
        raise MiningError(f"k must be >= 1, got {k}")
    per_clip = [
        textsim.top_k(c, step_embeddings, k, metric="cosine")
        for c in video.caption_embeddings
    ]
    return PseudoLabelSet(per_clip=per_clip)


def resolve_path(leaf: int, hierarchy: list[HierarchyNode]) -> list[int]:
    """Root-to-leaf node id chain for a leaf; length equals the leaf's level."""
    by_id = {n.node_id: n for n in hierarchy}
    node = by_id.get(leaf)
    if node is None:
        raise MiningError(f"unknown hierarchy node {leaf}")
    chain = [node.node_id]
    while node.parent is not None:
        node = by_id.get(node.parent)
        if node is None:
            raise MiningError(f"dangling parent reference near node {chain[-1]}")
        chain.append(node.node_id)
        if len(chain) > len(hierarchy):
            raise MiningError(f"cycle detected resolving node {leaf}")
    chain.reverse()
    return chain


def match_topic(leaf_name: str, tasks: list[TaskSpec], dim: int, embed_seed: int = 0) -> TopicMatch:
    """Task whose name embedding is closest (cosine) to the leaf name embedding."""
    if not tasks:
        raise MiningError("cannot match a topic against an empty task list")
    query = textsim.embed_text(leaf_name, dim, embed_seed)
    names = np.stack([textsim.embed_text(t.name, dim, embed_seed) for t in tasks])
    scores = textsim.scores_against(query, names, "cosine")
    best = int(np.argsort(-scores, kind="stable")[0])  # ties to lower list index
    return TopicMatch(task_id=tasks[best].task_id, score=float(scores[best]))


def mine_corpus(bundle: CorpusBundle, k: int = 1) -> dict[str, VideoLabels]:
    """Labels for every video, keyed by video_id, in corpus order."""
    step_embs = bundle.step_embeddings()
    by_id = bundle.nodes_by_id()
    topic_cache: dict[int, TopicMatch] = {}
    out: dict[str, VideoLabels] = {}
    for video in bundle.videos:
        if video.leaf_node not in topic_cache:
            topic_cache[video.leaf_node] = match_topic(
                by_id[video.leaf_node].name, bundle.tasks, bundle.dim, bundle.embed_seed
            )
        out[video.video_id] = VideoLabels(
            video_id=video.video_id,
            path=resolve_path(video.leaf_node, bundle.hierarchy),
            topic=topic_cache[video.leaf_node],
            labels=mine_pseudo_labels(video, step_embs, k),
        )
    return out


def save_labels(labels: dict[str, VideoLabels], path) -> None:
    with open(path, "w") as fh:
        for vl in labels.values():
            rec = {
                "video_id": vl.video_id,
                "path": vl.path,
                "topic": {"task_id": vl.topic.task_id, "score": vl.topic.score},
                "labels": [
                    [[sl.step_id, sl.score] for sl in clip]
                    for clip in vl.labels.per_clip
                ],
            }
            fh.write(json.dumps(rec) + "\n")


def load_labels(path) -> dict[str, VideoLabels]:
    out: dict[str, VideoLabels] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MiningError(f"{path}:{lineno}: malformed record: {exc}") from exc
            per_clip = [
                [ScoredLabel(int(sid), float(score)) for sid, score in clip]
                for clip in rec["labels"]
            ]
            if any(len(clip) == 0 for clip in per_clip):
                raise MiningError(f"{path}:{lineno}: empty pseudo-label list")
            out[rec["video_id"]] = VideoLabels(
                video_id=rec["video_id"],
                path=[int(n) for n in rec["path"]],
                topic=TopicMatch(
                    task_id=int(rec["topic"]["task_id"]),
                    score=float(rec["topic"]["score"]),
                ),
                labels=PseudoLabelSet(per_clip=per_clip),
            )
    return out
