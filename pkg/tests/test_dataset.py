import json

import numpy as np
import pytest

from fusion import dataset as D
from fusion import env as E


def toy_episode(rewards, costs=None, n_obs=None):
    rewards = np.asarray(rewards, dtype=float)
    T = len(rewards)
    costs = np.zeros(T) if costs is None else np.asarray(costs, dtype=float)
    rng = np.random.default_rng(T)
    obs = {f: rng.random((T, d)) for f, d in E.FACTOR_DIMS.items()}
    final = {f: rng.random(d) for f, d in E.FACTOR_DIMS.items()}
    ctx = E.Context("straight", 1.0).to_dict()
    return D.EpisodeRecord(ctx, obs, final, rng.normal(size=(T, 2)), rewards, costs, "timeout")


def test_suffix_sums():
    ep = D.annotate_returns(toy_episode([1.0, 2.0, 3.0]))
    assert ep.rtg.tolist() == [6.0, 5.0, 3.0]
    assert ep.ctg.tolist() == [0.0, 0.0, 0.0]


def test_suffix_sum_matches_double_loop():
    r = np.random.default_rng(1).normal(size=20)
    c = np.random.default_rng(2).random(20)
    ep = D.annotate_returns(toy_episode(r, c))
    brute_r = [sum(r[j] for j in range(i, 20)) for i in range(20)]
    brute_c = [sum(c[j] for j in range(i, 20)) for i in range(20)]
    np.testing.assert_allclose(ep.rtg, brute_r, rtol=0, atol=1e-12)
    np.testing.assert_allclose(ep.ctg, brute_c, rtol=0, atol=1e-12)
    D.check_suffix_law(ep)


def test_suffix_law_violation_detected():
    ep = D.annotate_returns(toy_episode([1.0, 2.0, 3.0]))
    ep.rtg[0] += 1.0
    with pytest.raises(D.DatasetError):
        D.check_suffix_law(ep)


def test_window_markovian():
    ds = D.OfflineDataset([toy_episode(np.arange(6.0))])
    b = ds.make_batch(np.array([[0, 3]]), 1)
    assert b.mask.tolist() == [[True]]
    np.testing.assert_array_equal(b.obs["ego"][0, 0], ds.episodes[0].obs["ego"][3])


def test_short_episode_is_left_padded():
    ds = D.OfflineDataset([toy_episode(np.ones(5))])
    for t in range(5):
        b = ds.make_batch(np.array([[0, t]]), 20)
        assert b.mask.sum() == t + 1
        assert b.mask[0, -(t + 1):].all() and not b.mask[0, : 20 - t - 1].any()
        assert (b.obs["beam"][0, ~b.mask[0]] == 0).all()
    b = ds.make_batch(np.array([[0, 4]]), 20)
    assert b.mask.sum() == 5


def test_window_targets_are_aligned():
    ds = D.OfflineDataset([toy_episode(np.arange(8.0))])
    ep = ds.episodes[0]
    b = ds.make_batch(np.array([[0, 5]]), 3)
    np.testing.assert_array_equal(b.actions[0], ep.actions[3:6])
    np.testing.assert_array_equal(b.prev_actions[0], ep.actions[2:5])
    np.testing.assert_array_equal(b.next_obs["nav"][0], ep.obs["nav"][4:7])
    np.testing.assert_array_equal(b.rtg[0], ep.rtg[3:6])
    # the final step's next state is the terminal observation
    b = ds.make_batch(np.array([[0, 7]]), 1)
    np.testing.assert_array_equal(b.next_obs["ego"][0, 0], ep.final_obs["ego"])
    # first step has a zero previous action
    b = ds.make_batch(np.array([[0, 0]]), 1)
    assert (b.prev_actions == 0).all()


def test_sampling_is_uniform_over_steps():
    ds = D.OfflineDataset([toy_episode(np.ones(n)) for n in (3, 7, 10)])
    n_draws = 100_000
    idx = ds.sample_index(n_draws, np.random.default_rng(0))
    flat = ds._offsets[idx[:, 0]] + idx[:, 1]
    counts = np.bincount(flat, minlength=ds.total_steps)
    p = 1.0 / ds.total_steps
    sd = np.sqrt(n_draws * p * (1 - p))
    assert np.all(np.abs(counts - n_draws * p) < 3 * sd)


def test_empty_dataset_cannot_be_sampled():
    with pytest.raises(D.DatasetError):
        D.OfflineDataset([]).sample_windows(4, 5, np.random.default_rng(0))


def test_invalid_horizon():
    ds = D.OfflineDataset([toy_episode(np.ones(3))])
    with pytest.raises(ValueError):
        ds.sample_windows(2, 0, np.random.default_rng(0))


def test_collect_is_byte_reproducible(tmp_path):
    D.collect(1, "train", seed=5, out=tmp_path / "a")
    D.collect(1, "train", seed=5, out=tmp_path / "b")
    for name in ("episodes.jsonl", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_manifest_bookkeeping(small_dataset):
    man = small_dataset.manifest()
    assert man["episode_count"] == 12 == len(small_dataset)
    assert man["total_steps"] == sum(len(e) for e in small_dataset.episodes)
    assert sum(man["context_histogram"].values()) == 12
    assert set(man["context_histogram"]) <= set(E.TRAIN_LAYOUTS)
    for ep in small_dataset.episodes:
        ctx = E.Context.from_dict(ep.context)
        assert ctx == E.sample_context("train", ctx.seed)


def test_stats_recompute(small_dataset):
    eps = small_dataset.episodes
    r = np.concatenate([e.rewards for e in eps])
    rtg = np.concatenate([e.rtg for e in eps])
    st = small_dataset.stats
    assert abs(st["reward_mean"] - r.mean()) < 1e-9
    assert abs(st["rtg_std"] - rtg.std()) < 1e-9
    assert abs(st["return_p90"] - np.percentile([e.rewards.sum() for e in eps], 90)) < 1e-9


def test_save_load_roundtrip(tmp_path, small_dataset):
    D.save(small_dataset, tmp_path)
    back = D.load(tmp_path)
    assert len(back) == len(small_dataset)
    for a, b in zip(small_dataset.episodes, back.episodes):
        assert a.context == b.context and a.reason == b.reason and a.profile == b.profile
        for f in D.FACTORS:
            np.testing.assert_array_equal(a.obs[f], b.obs[f])
        np.testing.assert_array_equal(a.rewards, b.rewards)
        np.testing.assert_array_equal(a.rtg, b.rtg)
    assert back.manifest()["stats"] == small_dataset.manifest()["stats"]


def test_truncated_file_fails_checksum(tmp_path, small_dataset):
    D.save(small_dataset, tmp_path)
    p = tmp_path / "episodes.jsonl"
    p.write_bytes(p.read_bytes()[:-100])
    with pytest.raises(D.DatasetError, match="checksum"):
        D.load(tmp_path)


def test_schema_version_mismatch(tmp_path, small_dataset):
    D.save(small_dataset, tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    man["schema_version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(D.DatasetError, match="schema"):
        D.load(tmp_path)


def test_foreign_file_loads(tmp_path):
    """A corpus written by hand (no return annotations) following the schema."""
    import zlib

    rows = []
    for T in (3, 4):
        rows.append({
            "context": E.Context("merge", 2.0, seed=1).to_dict(),
            "obs": {f: [[0.5] * d for _ in range(T)] for f, d in E.FACTOR_DIMS.items()},
            "final_obs": {f: [0.5] * d for f, d in E.FACTOR_DIMS.items()},
            "actions": [[0.0, 0.0]] * T,
            "rewards": [1.0] * T,
            "costs": [0.0] * T,
            "reason": "timeout",
        })
    body = "".join(json.dumps(r) + "\n" for r in rows).encode()
    (tmp_path / "episodes.jsonl").write_bytes(body)
    manifest = {"schema_version": D.SCHEMA_VERSION, "episode_count": 2, "total_steps": 7,
                "checksums": {"episodes.jsonl": zlib.crc32(body)}}
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    ds = D.load(tmp_path)
    assert ds.total_steps == 7
    assert ds.episodes[0].rtg.tolist() == [3.0, 2.0, 1.0]
    assert ds.episodes[0].profile == "external"


def test_failed_write_removes_partial_files(tmp_path, small_dataset, monkeypatch):
    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(D, "_crc32", boom)
    with pytest.raises(OSError):
        D.save(small_dataset, tmp_path)
    assert not (tmp_path / "episodes.jsonl").exists() and not (tmp_path / "manifest.json").exists()
