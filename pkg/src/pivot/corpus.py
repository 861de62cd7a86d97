"""Data model for tasks, steps, hierarchy, and videos, plus synthetic corpora.

A corpus lives on disk as a directory:

    manifest.json   format_version, dim, embed_seed
    steps.json      [{step_id, text}]
    tasks.json      [{task_id, name, step_ids}]
    hierarchy.json  [{node_id, name, level, parent}]
    videos.jsonl    one video per line: video_id, leaf_node, clips, captions,
                    optional caption_texts

Synthetic generation plants each clip on a known catalog step: the clip and
caption embeddings are noisy copies of the step's text embedding, and clips
mostly follow the step order of the video's primary task, with repeats,
off-task filler, and light adjacent shuffling. This makes the correct labels
recoverable ground truth for oracle tests.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import textsim

FORMAT_VERSION = 1


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Step:
    step_id: int
    text: str


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    name: str
    step_ids: tuple[int, ...]


@dataclass(frozen=True)
class HierarchyNode:
    node_id: int
    name: str
    level: int
    parent: int | None


@dataclass
class VideoRecord:
    video_id: str
    leaf_node: int
    clip_embeddings: np.ndarray  # (n_clips, dim)
    caption_embeddings: np.ndarray  # (n_clips, dim)
    caption_texts: list[str] | None = None

    @property
    def num_clips(self) -> int:
        return self.clip_embeddings.shape[0]


@dataclass
class CorpusBundle:
    steps: list[Step]
    tasks: list[TaskSpec]
    hierarchy: list[HierarchyNode]
    videos: list[VideoRecord]
    dim: int
    embed_seed: int = 0
    # per-video planted step ids; test convenience only, never serialized
    planted: dict[str, list[int]] | None = None

    def nodes_by_id(self) -> dict[int, HierarchyNode]:
        return {n.node_id: n for n in self.hierarchy}

    def levels(self) -> int:
        return max(n.level for n in self.hierarchy)

    def nodes_at_level(self, level: int) -> list[HierarchyNode]:
        return sorted(
            (n for n in self.hierarchy if n.level == level), key=lambda n: n.node_id
        )

    def step_embeddings(self) -> np.ndarray:
        """(|S|, dim) matrix of catalog step text embeddings, row = step_id."""
        return np.stack(
            [textsim.embed_text(s.text, self.dim, self.embed_seed) for s in self.steps]
        )


@dataclass
class CorpusConfig:
    level_counts: tuple[int, ...] = (3, 9, 27)
    tasks_per_leaf: int = 2
    steps_per_task: int = 6
    videos_per_leaf: int = 8
    clips_per_video: int = 12
    dim: int = 64
    noise_scale: float = 0.1
    caption_noise_scale: float = 0.05
    # per-video offset added to every clip (not captions): emulates channel /
    # production style; removing it requires cross-clip context
    style_scale: float = 0.0
    filler_rate: float = 0.2
    shuffle_prob: float = 0.2
    name_prefix: str = "howto"
    embed_seed: int = 0

    def validate(self) -> None:
        if not self.level_counts or any(c <= 0 for c in self.level_counts):
            raise CorpusError(f"level counts must be positive: {self.level_counts}")
        for name in ("tasks_per_leaf", "steps_per_task", "videos_per_leaf",
                     "clips_per_video", "dim"):
            if getattr(self, name) <= 0:
                raise CorpusError(f"{name} must be positive")
        if self.noise_scale < 0 or self.caption_noise_scale < 0:
            raise CorpusError("noise scales must be non-negative")


def pool_segments(segments) -> np.ndarray:
    """Arithmetic mean of a non-empty group of equal-dimension vectors."""
    if len(segments) == 0:
        raise CorpusError("cannot pool an empty segment group")
    arrs = [np.asarray(s, dtype=float) for s in segments]
    dims = {a.shape for a in arrs}
    if len(dims) != 1 or arrs[0].ndim != 1:
        raise CorpusError(f"segment dimension mismatch: {sorted(dims)}")
    return np.mean(np.stack(arrs), axis=0)


def _build_hierarchy(config: CorpusConfig) -> list[HierarchyNode]:
    nodes: list[HierarchyNode] = []
    next_id = 0
    prev_level_ids: list[int] = []
    level_names = ["category", "subcategory", "topic"]
    for level_idx, count in enumerate(config.level_counts):
        level = level_idx + 1
        kind = level_names[min(level_idx, len(level_names) - 1)]
        ids = []
        for j in range(count):
            if level == 1:
                parent = None
            else:
                if count < len(prev_level_ids):
                    raise CorpusError(
                        f"level {level} has fewer nodes ({count}) than its parent level"
                    )
                parent = prev_level_ids[j * len(prev_level_ids) // count]
            nodes.append(
                HierarchyNode(
                    node_id=next_id,
                    name=f"{config.name_prefix} {kind} {level}-{j}",
                    level=level,
                    parent=parent,
                )
            )
            ids.append(next_id)
            next_id += 1
        prev_level_ids = ids
    return nodes


def generate_corpus(config: CorpusConfig, seed: int) -> CorpusBundle:
    """Seeded synthetic corpus; pure function of (config, seed)."""
    config.validate()
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 0x9E3779B9])

    hierarchy = _build_hierarchy(config)
    leaf_level = len(config.level_counts)
    leaves = [n for n in hierarchy if n.level == leaf_level]

    steps: list[Step] = []
    tasks: list[TaskSpec] = []
    leaf_tasks: dict[int, list[int]] = {}
    for leaf in leaves:
        task_ids = []
        for t in range(config.tasks_per_leaf):
            # first task shares the leaf's name so topic matching can recover it
            name = leaf.name if t == 0 else f"{leaf.name} variant {t}"
            sids = []
            for k in range(config.steps_per_task):
                sid = len(steps)
                steps.append(Step(step_id=sid, text=f"{name}: step {k + 1}"))
                sids.append(sid)
            tasks.append(TaskSpec(task_id=len(tasks), name=name, step_ids=tuple(sids)))
            task_ids.append(tasks[-1].task_id)
        leaf_tasks[leaf.node_id] = task_ids

    step_embs = np.stack(
        [textsim.embed_text(s.text, config.dim, config.embed_seed) for s in steps]
    )

    videos: list[VideoRecord] = []
    planted: dict[str, list[int]] = {}
    all_step_ids = np.arange(len(steps))
    for leaf in leaves:
        primary = tasks[leaf_tasks[leaf.node_id][0]]
        primary_set = set(primary.step_ids)
        off_task = all_step_ids[[s not in primary_set for s in all_step_ids]]
        for v in range(config.videos_per_leaf):
            seq = _plant_sequence(config, rng, primary.step_ids, off_task)
            clip_noise = rng.standard_normal((len(seq), config.dim))
            cap_noise = rng.standard_normal((len(seq), config.dim))
            style = config.style_scale * rng.standard_normal(config.dim)
            clips = step_embs[seq] + style + config.noise_scale * clip_noise
            captions = step_embs[seq] + config.caption_noise_scale * cap_noise
            vid = f"{config.name_prefix}-video-{leaf.node_id:04d}-{v:03d}"
            videos.append(
                VideoRecord(
                    video_id=vid,
                    leaf_node=leaf.node_id,
                    clip_embeddings=clips,
                    caption_embeddings=captions,
                    caption_texts=[steps[s].text for s in seq],
                )
            )
            planted[vid] = [int(s) for s in seq]

    bundle = CorpusBundle(
        steps=steps,
        tasks=tasks,
        hierarchy=hierarchy,
        videos=videos,
        dim=config.dim,
        embed_seed=config.embed_seed,
        planted=planted,
    )
    validate_bundle(bundle)
    return bundle


def _plant_sequence(config, rng, ordered_steps, off_task) -> list[int]:
    """Step id per clip: in-order task steps padded with repeats and filler."""
    n = config.clips_per_video
    base = list(ordered_steps[:n])
    while len(base) < n:
        if len(off_task) > 0 and rng.random() < config.filler_rate:
            pos = int(rng.integers(0, len(base) + 1))
            base.insert(pos, int(rng.choice(off_task)))
        else:
            pos = int(rng.integers(0, len(base)))
            base.insert(pos, base[pos])  # duplicate in place, keeps chronology
    for i in range(len(base) - 1):
        if rng.random() < config.shuffle_prob:
            base[i], base[i + 1] = base[i + 1], base[i]
    return base[:n]


def validate_bundle(bundle: CorpusBundle) -> None:
    for i, s in enumerate(bundle.steps):
        if s.step_id != i:
            raise CorpusError(f"step ids must be contiguous from 0; got {s.step_id} at {i}")
        if not s.text:
            raise CorpusError(f"step {s.step_id} has empty text")
    step_ids = {s.step_id for s in bundle.steps}
    for t in bundle.tasks:
        if not t.step_ids:
            raise CorpusError(f"task {t.task_id} ({t.name}) has no steps")
        for sid in t.step_ids:
            if sid not in step_ids:
                raise CorpusError(f"task {t.task_id} references unknown step {sid}")
    by_id = bundle.nodes_by_id()
    if len(by_id) != len(bundle.hierarchy):
        raise CorpusError("duplicate hierarchy node ids")
    levels = bundle.levels()
    for lvl in range(1, levels + 1):
        if not any(n.level == lvl for n in bundle.hierarchy):
            raise CorpusError(f"hierarchy has no node at level {lvl}")
    for n in bundle.hierarchy:
        if (n.parent is None) != (n.level == 1):
            raise CorpusError(
                f"node {n.node_id}: parent must be absent iff level is 1 "
                f"(level={n.level}, parent={n.parent})"
            )
        if n.parent is not None:
            p = by_id.get(n.parent)
            if p is None:
                raise CorpusError(f"node {n.node_id} has unknown parent {n.parent}")
            if p.level != n.level - 1:
                raise CorpusError(
                    f"node {n.node_id} at level {n.level} has parent "
                    f"{n.parent} at level {p.level}"
                )
    seen_vids = set()
    for v in bundle.videos:
        if v.video_id in seen_vids:
            raise CorpusError(f"duplicate video id {v.video_id}")
        seen_vids.add(v.video_id)
        if v.leaf_node not in by_id:
            raise CorpusError(f"video {v.video_id} references unknown node {v.leaf_node}")
        if v.clip_embeddings.ndim != 2 or v.clip_embeddings.shape[0] < 1:
            raise CorpusError(f"video {v.video_id} has no clips")
        if v.clip_embeddings.shape != v.caption_embeddings.shape:
            raise CorpusError(
                f"video {v.video_id}: clip/caption shape mismatch "
                f"{v.clip_embeddings.shape} vs {v.caption_embeddings.shape}"
            )
        if v.clip_embeddings.shape[1] != bundle.dim:
            raise CorpusError(
                f"video {v.video_id}: embedding dim {v.clip_embeddings.shape[1]} "
                f"!= corpus dim {bundle.dim}"
            )
        if v.caption_texts is not None and len(v.caption_texts) != v.num_clips:
            raise CorpusError(f"video {v.video_id}: caption_texts length mismatch")
        if not (np.isfinite(v.clip_embeddings).all() and np.isfinite(v.caption_embeddings).all()):
            raise CorpusError(f"video {v.video_id}: non-finite embedding values")


def save_corpus(bundle: CorpusBundle, path) -> None:
    validate_bundle(bundle)
    os.makedirs(path, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "dim": bundle.dim,
        "embed_seed": bundle.embed_seed,
    }
    _write_json(os.path.join(path, "manifest.json"), manifest)
    _write_json(
        os.path.join(path, "steps.json"),
        [{"step_id": s.step_id, "text": s.text} for s in bundle.steps],
    )
    _write_json(
        os.path.join(path, "tasks.json"),
        [
            {"task_id": t.task_id, "name": t.name, "step_ids": list(t.step_ids)}
            for t in bundle.tasks
        ],
    )
    _write_json(
        os.path.join(path, "hierarchy.json"),
        [
            {"node_id": n.node_id, "name": n.name, "level": n.level, "parent": n.parent}
            for n in bundle.hierarchy
        ],
    )
    with open(os.path.join(path, "videos.jsonl"), "w") as fh:
        for v in bundle.videos:
            rec = {
                "video_id": v.video_id,
                "leaf_node": v.leaf_node,
                "clips": v.clip_embeddings.tolist(),
                "captions": v.caption_embeddings.tolist(),
            }
            if v.caption_texts is not None:
                rec["caption_texts"] = v.caption_texts
            fh.write(json.dumps(rec) + "\n")


def load_corpus(path) -> CorpusBundle:
    manifest = _read_json(os.path.join(path, "manifest.json"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CorpusError(
            f"{path}: unsupported corpus format_version {manifest.get('format_version')}"
        )
    dim = int(manifest["dim"])
    steps = [
        Step(step_id=int(r["step_id"]), text=r["text"])
        for r in _read_json(os.path.join(path, "steps.json"))
    ]
    tasks = [
        TaskSpec(task_id=int(r["task_id"]), name=r["name"],
                 step_ids=tuple(int(s) for s in r["step_ids"]))
        for r in _read_json(os.path.join(path, "tasks.json"))
    ]
    hierarchy = [
        HierarchyNode(
            node_id=int(r["node_id"]), name=r["name"], level=int(r["level"]),
            parent=None if r["parent"] is None else int(r["parent"]),
        )
        for r in _read_json(os.path.join(path, "hierarchy.json"))
    ]
    videos = []
    vpath = os.path.join(path, "videos.jsonl")
    with open(vpath) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{vpath}:{lineno}: malformed record: {exc}") from exc
            vid = rec.get("video_id", f"<line {lineno}>")
            clips = np.asarray(rec["clips"], dtype=float)
            captions = np.asarray(rec["captions"], dtype=float)
            if clips.ndim != 2 or captions.ndim != 2 or clips.shape != captions.shape:
                raise CorpusError(
                    f"{vpath}:{lineno}: video {vid}: clip/caption length or "
                    f"dimension mismatch"
                )
            videos.append(
                VideoRecord(
                    video_id=str(vid),
                    leaf_node=int(rec["leaf_node"]),
                    clip_embeddings=clips,
                    caption_embeddings=captions,
                    caption_texts=rec.get("caption_texts"),
                )
            )
    bundle = CorpusBundle(
        steps=steps, tasks=tasks, hierarchy=hierarchy, videos=videos,
        dim=dim, embed_seed=int(manifest.get("embed_seed", 0)),
    )
    validate_bundle(bundle)
    return bundle


def bundles_equal(a: CorpusBundle, b: CorpusBundle) -> bool:
    if (a.steps, a.tasks, a.hierarchy, a.dim, a.embed_seed) != (
        b.steps, b.tasks, b.hierarchy, b.dim, b.embed_seed
    ):
        return False
    if len(a.videos) != len(b.videos):
        return False
    for va, vb in zip(a.videos, b.videos):
        if va.video_id != vb.video_id or va.leaf_node != vb.leaf_node:
            return False
        if not np.array_equal(va.clip_embeddings, vb.clip_embeddings):
            return False
        if not np.array_equal(va.caption_embeddings, vb.caption_embeddings):
            return False
        if va.caption_texts != vb.caption_texts:
            return False
    return True


def stable_id_hash(text: str) -> int:
    """Stable 32-bit hash for deriving per-video rng streams."""
    return zlib.crc32(text.encode("utf-8"))


def _write_json(path, obj) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)
