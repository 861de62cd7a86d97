import numpy as np
import pytest

from pivot import corpus
from pivot.corpus import (
    CorpusBundle,
    CorpusConfig,
    CorpusError,
    HierarchyNode,
    Step,
    TaskSpec,
    VideoRecord,
    generate_corpus,
    load_corpus,
    pool_segments,
    save_corpus,
    validate_bundle,
)


def small_config(**overrides):
    base = dict(
        level_counts=(2, 4),
        tasks_per_leaf=2,
        steps_per_task=3,
        videos_per_leaf=2,
        clips_per_video=5,
        dim=16,
    )
    base.update(overrides)
    return CorpusConfig(**base)


def test_pool_segments_is_mean():
    segs = [np.array([1.0, 2.0]), np.array([3.0, 6.0])]
    assert np.allclose(pool_segments(segs), [2.0, 4.0])


def test_pool_segments_rejects_empty_and_mismatched():
    with pytest.raises(CorpusError):
        pool_segments([])
    with pytest.raises(CorpusError):
        pool_segments([np.ones(2), np.ones(3)])


def test_generate_is_deterministic():
    cfg = small_config()
    a = generate_corpus(cfg, 42)
    b = generate_corpus(cfg, 42)
    assert corpus.bundles_equal(a, b)
    c = generate_corpus(cfg, 43)
    assert not corpus.bundles_equal(a, c)


def test_generated_shapes_and_counts():
    cfg = small_config()
    bundle = generate_corpus(cfg, 0)
    n_leaves = cfg.level_counts[-1]
    assert len(bundle.tasks) == n_leaves * cfg.tasks_per_leaf
    assert len(bundle.steps) == len(bundle.tasks) * cfg.steps_per_task
    assert len(bundle.videos) == n_leaves * cfg.videos_per_leaf
    for v in bundle.videos:
        assert v.clip_embeddings.shape == (cfg.clips_per_video, cfg.dim)
        assert v.caption_embeddings.shape == (cfg.clips_per_video, cfg.dim)
    assert bundle.levels() == len(cfg.level_counts)


def test_hierarchy_parents_consistent():
    bundle = generate_corpus(small_config(level_counts=(2, 4, 8)), 3)
    by_id = bundle.nodes_by_id()
    for node in bundle.hierarchy:
        if node.level == 1:
            assert node.parent is None
        else:
            assert by_id[node.parent].level == node.level - 1


def test_first_task_per_leaf_shares_leaf_name():
    bundle = generate_corpus(small_config(), 1)
    leaves = bundle.nodes_at_level(bundle.levels())
    task_names = {t.name for t in bundle.tasks}
    for leaf in leaves:
        assert leaf.name in task_names


def test_planted_steps_are_recoverable():
    """With mild noise the nearest catalog step is the planted one."""
    bundle = generate_corpus(small_config(noise_scale=0.05), 11)
    step_embs = bundle.step_embeddings()
    norms = np.linalg.norm(step_embs, axis=1)
    for v in bundle.videos:
        sims = (v.caption_embeddings @ step_embs.T) / (
            np.linalg.norm(v.caption_embeddings, axis=1)[:, None] * norms[None, :]
        )
        assert list(np.argmax(sims, axis=1)) == bundle.planted[v.video_id]


def test_style_offset_applied_to_clips_not_captions():
    cfg = small_config(noise_scale=0.0, caption_noise_scale=0.0, style_scale=2.0)
    bundle = generate_corpus(cfg, 5)
    step_embs = bundle.step_embeddings()
    for v in bundle.videos:
        planted = bundle.planted[v.video_id]
        assert np.allclose(v.caption_embeddings, step_embs[planted])
        offsets = v.clip_embeddings - step_embs[planted]
        # one shared offset per video, and a substantial one
        assert np.allclose(offsets, offsets[0])
        assert np.linalg.norm(offsets[0]) > 1.0


def test_roundtrip_preserves_bundle(tmp_path):
    bundle = generate_corpus(small_config(), 9)
    save_corpus(bundle, tmp_path / "corpus")
    loaded = load_corpus(tmp_path / "corpus")
    assert corpus.bundles_equal(bundle, loaded)


def test_load_rejects_bad_version(tmp_path):
    bundle = generate_corpus(small_config(), 9)
    save_corpus(bundle, tmp_path / "corpus")
    manifest = tmp_path / "corpus" / "manifest.json"
    manifest.write_text(manifest.read_text().replace('"format_version": 1', '"format_version": 99'))
    with pytest.raises(CorpusError):
        load_corpus(tmp_path / "corpus")


def test_load_reports_malformed_video_line(tmp_path):
    bundle = generate_corpus(small_config(), 9)
    save_corpus(bundle, tmp_path / "corpus")
    with open(tmp_path / "corpus" / "videos.jsonl", "a") as fh:
        fh.write("{not json\n")
    with pytest.raises(CorpusError, match="malformed"):
        load_corpus(tmp_path / "corpus")


def _tiny_valid_bundle():
    steps = [Step(0, "a"), Step(1, "b")]
    tasks = [TaskSpec(0, "t", (0, 1))]
    hierarchy = [HierarchyNode(0, "root", 1, None), HierarchyNode(1, "leaf", 2, 0)]
    videos = [
        VideoRecord("v0", 1, np.zeros((2, 4)), np.zeros((2, 4)))
    ]
    return CorpusBundle(steps=steps, tasks=tasks, hierarchy=hierarchy,
                        videos=videos, dim=4)


def test_validate_accepts_tiny_bundle():
    validate_bundle(_tiny_valid_bundle())


def test_validate_names_offending_video():
    bundle = _tiny_valid_bundle()
    bundle.videos[0].clip_embeddings = np.zeros((3, 4))
    with pytest.raises(CorpusError, match="v0"):
        validate_bundle(bundle)


def test_validate_rejects_unknown_leaf():
    bundle = _tiny_valid_bundle()
    bundle.videos[0].leaf_node = 77
    with pytest.raises(CorpusError, match="unknown node"):
        validate_bundle(bundle)


def test_validate_rejects_bad_parent_level():
    bundle = _tiny_valid_bundle()
    bundle.hierarchy.append(HierarchyNode(2, "skip", 3, 0))
    with pytest.raises(CorpusError):
        validate_bundle(bundle)


def test_validate_rejects_nonfinite_embeddings():
    bundle = _tiny_valid_bundle()
    bundle.videos[0].clip_embeddings = np.full((2, 4), np.nan)
    with pytest.raises(CorpusError, match="non-finite"):
        validate_bundle(bundle)


def test_config_validation():
    with pytest.raises(CorpusError):
        CorpusConfig(level_counts=()).validate()
    with pytest.raises(CorpusError):
        CorpusConfig(clips_per_video=0).validate()
    with pytest.raises(CorpusError):
        CorpusConfig(noise_scale=-0.1).validate()


def test_stable_id_hash_is_stable():
    assert corpus.stable_id_hash("abc") == corpus.stable_id_hash("abc")
    assert corpus.stable_id_hash("abc") != corpus.stable_id_hash("abd")
