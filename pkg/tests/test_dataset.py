import json
from collections import Counter

import numpy as np
import pytest
from PIL import Image
from scipy import stats

from ftfd.audio import SAMPLE_RATE, write_wav
from ftfd.dataset import (
    ClipTooShort,
    DataError,
    Manifest,
    SampleClip,
    VideoEntry,
    assign_splits,
    build_manifest,
    choose_start,
    collate,
    load_clip,
    sample_clip,
    split_in_memory,
    synth_generate,
    write_dataset,
)


def frame_rms(samples, per_frame=SAMPLE_RATE // 25):
    n = len(samples) // per_frame
    return np.sqrt(np.mean(samples[: n * per_frame].reshape(n, per_frame) ** 2, axis=1))


def dark_area(frames, box):
    """Pixels darker than 60 on every channel inside the mouth box, per frame."""
    top, left, bottom, right = box
    crop = frames[:, top:bottom, left:right].astype(int)
    return np.sum(np.all(crop < 60, axis=-1), axis=(1, 2)).astype(float)


@pytest.fixture(scope="module")
def synth40():
    return synth_generate(40, seed=3)


class TestSynthetic:
    def test_balance(self):
        for count in (2, 7, 10, 41):
            labels = Counter(e.label for e in synth_generate(count, seed=1, min_frames=42, max_frames=43))
            assert labels[0] == count // 2 and labels[1] == count - count // 2

    def test_count_one_rejected(self):
        with pytest.raises(DataError, match="count"):
            synth_generate(1)

    def test_bit_reproducible(self):
        a, b = synth_generate(4, seed=9), synth_generate(4, seed=9)
        for x, y in zip(a, b):
            assert x.to_json() == y.to_json()
            assert x.load_frames(0, x.frame_count).tobytes() == y.load_frames(0, y.frame_count).tobytes()
            assert x.source.audio.tobytes() == y.source.audio.tobytes()

    def test_envelope_correlation_oracle(self, synth40):
        real, fake = [], []
        for e in synth40:
            aperture = dark_area(e.load_frames(0, e.frame_count), e.mouth_box)
            loudness = frame_rms(e.load_audio())
            r = np.corrcoef(aperture, loudness)[0, 1]
            (real if e.label == 0 else fake).append(r)
        assert min(real) > 0.9
        assert np.mean(fake) < 0.3

    def test_visual_marginals_match_two_sample(self):
        entries = synth_generate(500, seed=21, min_frames=42, max_frames=44)
        stat = {0: [], 1: []}
        for e in entries:
            frames = e.load_frames(10, 3).astype(float)
            stat[e.label].append(frames.mean())
        result = stats.ks_2samp(stat[0], stat[1])
        assert result.pvalue > 0.01

    def test_duration_and_ids(self, synth40):
        assert all(e.duration >= 1.68 for e in synth40)
        assert len({e.id for e in synth40}) == 40
        assert all((e.label == 0) == (e.generator == "none") for e in synth40)


class TestSplits:
    def test_ten_entries(self):
        entries = synth_generate(10, seed=0)
        man = split_in_memory(entries, seed=5)
        sizes = {s: len(man.split(s)) for s in ("train", "val", "test")}
        assert sizes == {"train": 6, "val": 2, "test": 2}
        for s, per_class in (("train", 3), ("val", 1), ("test", 1)):
            assert Counter(e.label for e in man.split(s)) == {0: per_class, 1: per_class}

    def test_same_seed_same_assignment(self):
        a = split_in_memory(synth_generate(30, seed=1), seed=2)
        b = split_in_memory(synth_generate(30, seed=1), seed=2)
        assert [e.split for e in a.entries] == [e.split for e in b.entries]

    def test_disjoint_cover(self, synth40):
        man = split_in_memory(synth40, seed=0)
        ids = [e.id for s in ("train", "val", "test") for e in man.split(s)]
        assert sorted(ids) == sorted(e.id for e in synth40)

    def test_stratified_within_one(self):
        entries = synth_generate(37, seed=4)
        assign_splits(entries, seed=1)
        share = np.mean([e.label for e in entries])
        for s in ("train", "val", "test"):
            members = [e for e in entries if e.split == s]
            assert abs(sum(e.label for e in members) - share * len(members)) <= 1

    def test_bad_ratios(self):
        with pytest.raises(ValueError):
            assign_splits(synth_generate(4, seed=0), ratios=(0.5, 0.5, 0.5))


class TestClips:
    def test_definite_frames(self, synth40):
        e = synth40[0]
        clip = sample_clip(e, T=3, scheme="definite", n=10)
        assert clip.start == 10
        expected = e.load_frames(0, e.frame_count)[10:13].astype(float) / 255.0
        stacked = expected.transpose(0, 3, 1, 2).reshape(9, 96, 96)
        assert np.array_equal(clip.visual, stacked)

    def test_single_frame(self, synth40):
        clip = sample_clip(synth40[1], T=1, scheme="definite")
        assert clip.visual.shape == (3, 96, 96)

    def test_random_reproducible(self, synth40):
        e = synth40[2]
        a = sample_clip(e, 3, "random", rng=np.random.default_rng(4))
        b = sample_clip(e, 3, "random", rng=np.random.default_rng(4))
        assert a.start == b.start and a.visual.tobytes() == b.visual.tobytes()

    def test_random_start_range(self, synth40):
        rng = np.random.default_rng(0)
        for e in synth40[:10]:
            s = choose_start(e, 5, "random", rng=rng)
            assert 0 <= s and s + 5 <= e.frame_count

    def test_too_short(self, synth40):
        e = synth40[0]
        with pytest.raises(ClipTooShort) as info:
            choose_start(e, 3, "definite", n=e.frame_count)
        assert info.value.required == e.frame_count + 3
        assert info.value.available == e.frame_count

    def test_crop_resize(self, synth40):
        clip = load_clip(synth40[3], 4, 3, crop=48, audio_steps=16)
        assert clip.visual.shape == (9, 48, 48)
        assert clip.audio.mels.shape == (1, 80, 16) and clip.audio.resized.shape == (1, 48, 48)

    def test_round_trip_bitwise(self, synth40):
        clip = load_clip(synth40[5], 7, 3, crop=48, audio_steps=16)
        back = SampleClip.from_bytes(clip.to_bytes())
        assert back.visual.tobytes() == clip.visual.tobytes()
        assert back.audio.mels.tobytes() == clip.audio.mels.tobytes()
        assert back.audio.resized.tobytes() == clip.audio.resized.tobytes()
        assert (back.label, back.video_id, back.start) == (clip.label, clip.video_id, clip.start)

    def test_collate(self, synth40):
        batch = collate([load_clip(e, 0, 3, 48, 16) for e in synth40[:4]])
        assert batch.visual.shape == (4, 9, 48, 48)
        assert batch.labels.shape == (4, 1)


class TestOnDisk:
    def test_write_then_build(self, tmp_path):
        entries = synth_generate(6, seed=2, min_frames=42, max_frames=42)
        manifest = write_dataset(entries, tmp_path / "data", seed=1)
        loaded = Manifest.load(tmp_path / "data" / "manifest.json")
        assert [e.id for e in loaded.entries] == [e.id for e in manifest.entries]
        doc = json.loads((tmp_path / "data" / "manifest.json").read_text())
        assert set(doc) == {"version", "seed", "ratios", "entries"}
        by_id = {e.id: e for e in entries}
        for e in loaded.entries:
            src = by_id[e.id]
            assert e.load_frames(3, 3).tobytes() == src.load_frames(3, 3).tobytes()
            assert np.array_equal(e.load_audio(), src.load_audio())
            assert not e.frames_dir.startswith("/")

    def test_empty_root(self, tmp_path):
        with pytest.raises(DataError, match="no video"):
            build_manifest(tmp_path)

    def test_rejections(self, tmp_path):
        entries = synth_generate(4, seed=2, min_frames=42, max_frames=42)
        root = tmp_path / "d"
        write_dataset(entries, root)
        (root / entries[0].id / "audio.wav").unlink()
        write_wav(root / entries[1].id / "audio.wav", np.zeros(SAMPLE_RATE))  # 25 frames of audio vs 42
        bad = root / entries[2].id / "frames" / "00000.png"
        Image.new("L", (96, 96)).save(bad)
        man = build_manifest(root)
        reasons = dict(man.rejected)
        assert "missing audio.wav" in reasons[entries[0].id]
        assert any("audio length" in r for r in reasons[entries[1].id])
        assert any("RGB" in r for r in reasons[entries[2].id])
        assert [e.id for e in man.entries] == [entries[3].id]

    def test_real_fake_generator_invariant(self):
        with pytest.raises(DataError):
            VideoEntry("x", "f", "a.wav", 0, "wav2lip", 2.0, 50)
        with pytest.raises(DataError):
            VideoEntry("x", "f", "a.wav", 1, "none", 2.0, 50)
        with pytest.raises(DataError, match="1.68"):
            VideoEntry("x", "f", "a.wav", 1, "pcavs", 1.5, 37)
