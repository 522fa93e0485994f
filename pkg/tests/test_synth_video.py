import numpy as np
import pytest

from ffavod import synth_video as sv
from ffavod.synth_video import ObjectTrack, Occluder, SceneSpec

# first-run hashes, pinned
GOLDEN = {
    ("easy", 42): "8549fa4d71aed9e952172297da03c6bf9ab1c215ef6589ff15e5f1915845754e",
    ("occlusion_heavy", 0): "654da7ed0934dbf4254afdc79e8d5ee5f483d531f192001110468e74d7aefa28",
    ("small_objects", 7): "017daea8abbfe2fe653cf5b6f5134424e1e2d7c44db989c6d29534b8e46d2705",
}


@pytest.fixture(scope="module")
def suites():
    return {key: sv.benchmark_suite(*key) for key in GOLDEN}


def overlap_fraction(box, occ):
    """Geometric oracle: area of box covered by the occluder rectangle over box area."""
    iw = max(0, min(box[2], occ[2]) - max(box[0], occ[0]))
    ih = max(0, min(box[3], occ[3]) - max(box[1], occ[1]))
    return iw * ih / ((box[2] - box[0]) * (box[3] - box[1]))


def test_zero_objects_gives_background_only():
    frames, gt = sv.generate(SceneSpec(seed=1, length=5, num_objects=(0, 0)))
    assert frames.shape == (5, 3, 64, 64) and frames.dtype == np.float32
    assert all(frame == [] for frame in gt)
    np.testing.assert_array_equal(frames[0], frames[4])


def test_static_object_keeps_its_box():
    obj = ObjectTrack(cls=1, cx=30.0, cy=20.0, w=12, h=8, texture_seed=3)
    _, gt = sv.generate(SceneSpec(seed=2, length=10, objects=(obj,)))
    boxes = {frame[0].box for frame in gt}
    assert boxes == {(24, 16, 36, 24)}


def test_occluder_dwell_sets_occluded_fraction_exactly_in_dwell_frames():
    obj = ObjectTrack(cls=0, cx=32.0, cy=32.0, w=10, h=10)
    occ = Occluder(28, 0, 40, 64, start=10, end=12, opacity=0.9)
    _, gt = sv.generate(SceneSpec(seed=3, length=20, objects=(obj,), occluders=(occ,)))
    for t, frame in enumerate(gt):
        expected = overlap_fraction(frame[0].box, (occ.x_min, occ.y_min, occ.x_max, occ.y_max)) if 10 <= t <= 12 else 0
        assert frame[0].occluded == pytest.approx(expected)
        assert (frame[0].occluded > 0) == (10 <= t <= 12)


def test_identical_spec_is_bit_identical():
    spec = sv.profile_spec("occlusion_heavy", 11)
    a, ga = sv.generate(spec)
    b, gb = sv.generate(spec)
    assert a.tobytes() == b.tobytes() and ga == gb


def test_oversized_object_is_rejected():
    with pytest.raises(sv.PlacementError):
        sv.generate(SceneSpec(seed=0, objects=(ObjectTrack(0, 10, 10, 80, 5),)))


@pytest.mark.parametrize("key", list(GOLDEN))
def test_golden_hashes(suites, key):
    assert suites[key].content_hash() == GOLDEN[key]


@pytest.mark.parametrize("key", list(GOLDEN))
def test_dataset_invariants(suites, key):
    ds = suites[key]
    ids = {split: {s.sequence_id for s in ds.sequences(split)} for split in ("train", "val", "test")}
    assert [len(v) for v in ids.values()] == [20, 4, 6]
    assert not (ids["train"] & ids["val"] or ids["train"] & ids["test"] or ids["val"] & ids["test"])
    for seq in ds.sequences():
        assert seq.frames.shape == (40, 3, 64, 64)
        assert 0.0 <= seq.frames.min() and seq.frames.max() <= 1.0
        tracks = {}
        for frame in seq.gt:
            for b in frame:
                x0, y0, x1, y1 = b.box
                assert 0 <= x0 < x1 <= 64 and 0 <= y0 < y1 <= 64
                assert 0.0 <= b.occluded <= 1.0
                if b.track in tracks:
                    px, py = tracks[b.track]
                    assert abs(x0 - px) <= 3 and abs(y0 - py) <= 3
                tracks[b.track] = (x0, y0)


def test_profile_definitions(suites):
    easy = suites[("easy", 42)]
    assert all(min(b.box[2] - b.box[0], b.box[3] - b.box[1]) >= 12
               for s in easy.sequences() for f in s.gt for b in f)
    assert all(b.occluded == 0 for s in easy.sequences() for f in s.gt for b in f)
    heavy = suites[("occlusion_heavy", 0)]
    assert all(sv.occlusion_events(s) >= 2 for s in heavy.sequences())
    small = suites[("small_objects", 7)]
    assert all(max(b.box[2] - b.box[0], b.box[3] - b.box[1]) <= 10 for s in small.sequences() for f in s.gt for b in f)


def test_classes_have_distinct_textures():
    a = sv._texture(ObjectTrack(0, 0, 0, 12, 12, texture_seed=1))
    b = sv._texture(ObjectTrack(1, 0, 0, 12, 12, texture_seed=1))
    assert a[0].mean() > a[2].mean() and b[2].mean() > b[0].mean()


def test_unknown_profile():
    with pytest.raises(ValueError):
        sv.profile_spec("foggy", 0)


@pytest.mark.parametrize("fmt", ["fftn", "ppm"])
def test_save_and_load(tmp_path, fmt):
    ds = sv.benchmark_suite("easy", 5, n_train=2, n_val=1, n_test=1, length=4, size=48)
    digest = sv.save_dataset(ds, tmp_path, fmt)
    assert digest == ds.content_hash()
    back = sv.load_dataset(tmp_path)
    assert [s.sequence_id for s in back.sequences()] == [s.sequence_id for s in ds.sequences()]
    for a, b in zip(ds.sequences(), back.sequences()):
        if fmt == "fftn":
            assert a.frames.tobytes() == b.frames.tobytes()
        else:
            assert np.max(np.abs(a.frames - b.frames)) <= 0.5 / 255 + 1e-6
        assert [[(g.cls, g.box) for g in f] for f in a.gt] == [[(g.cls, g.box) for g in f] for f in b.gt]
    if fmt == "fftn":
        assert back.content_hash() == digest
    header = (tmp_path / "gt.csv").read_text().splitlines()[0]
    assert header == ",".join(sv.GT_COLUMNS)
