import logging
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import chisquare

from backend.data import (ANNOTATION_HEADER, CLIP_LENGTH, ClipSampler, FrameLoader, VideoRecord, denormalize_frame,
                          eligible_starts, load_dataset, make_eval_clips, normalize_frame, sample_training_clip,
                          scan_unlabeled, write_rgb)
from backend.errors import AnnotationError, DataContractError, ShapeError
from backend.numerics import Precision

SIZE = 8


def write_video(root: Path, video_id: str, labels, missing=(), header=ANNOTATION_HEADER, extra_frames=0):
    frames = root / "frames" / video_id
    frames.mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    for index in range(len(labels) + extra_frames):
        if index not in missing:
            write_rgb(frames / f"{index:06d}.png", np.full((SIZE, SIZE, 3), 10 * (index % 20), dtype=np.uint8))
    lines = [header, *(str(label) for label in labels)]
    (root / "annotations" / f"{video_id}.txt").write_text("\n".join(lines) + "\n")


def record(valid) -> VideoRecord:
    """Record whose frames are all present; invalid positions carry label -1"""
    valid = np.asarray(valid, dtype=bool)
    labels = np.where(valid, 0, -1)
    return VideoRecord.from_frames("v", [Path(f"{i:06d}.png") for i in range(len(valid))], labels)


@pytest.fixture(scope="module")
def png(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("png") / "000000.png"
    write_rgb(path, np.full((SIZE, SIZE, 3), 128, dtype=np.uint8))
    return path


def test_valid_mask_follows_labels(tmp_path):
    write_video(tmp_path, "a", [0, 1, -1, 2])
    write_video(tmp_path, "b", [3, 3, 3])
    videos = load_dataset(tmp_path / "frames", tmp_path / "annotations")
    assert [v.video_id for v in videos] == ["a", "b"]
    assert videos[0].valid.tolist() == [True, True, False, True]
    assert videos[0].labels.tolist() == [0, 1, -1, 2]


def test_empty_annotations_directory_warns(tmp_path, caplog):
    (tmp_path / "annotations").mkdir()
    with caplog.at_level(logging.WARNING):
        assert load_dataset(tmp_path / "frames", tmp_path / "annotations") == []
    assert "empty" in caplog.text


def test_missing_crop_marks_labeled_frame_invalid(tmp_path):
    write_video(tmp_path, "a", [0, 1, 2, 3], missing={2})
    (video,) = load_dataset(tmp_path / "frames", tmp_path / "annotations")
    assert video.valid.tolist() == [True, True, False, True]
    assert video.frame_paths[2] is None


def test_frames_are_ordered_by_numeric_index(tmp_path):
    write_video(tmp_path, "a", [0] * 12)
    (video,) = load_dataset(tmp_path / "frames", tmp_path / "annotations")
    assert [p.name for p in video.frame_paths] == [f"{i:06d}.png" for i in range(12)]


def test_malformed_videos_are_rejected_with_report(tmp_path):
    from backend.data import DatasetLoader

    write_video(tmp_path, "good", [0, 1])
    write_video(tmp_path, "bad_int", [0, 1])
    (tmp_path / "annotations" / "bad_int.txt").write_text(f"{ANNOTATION_HEADER}\n0\nx\n")
    write_video(tmp_path, "bad_header", [0], header="Happy,Sad")
    write_video(tmp_path, "too_many_frames", [0, 1], extra_frames=2)
    write_video(tmp_path, "bad_label", [0, 9])
    loader = DatasetLoader(tmp_path / "frames", tmp_path / "annotations")
    videos = loader.load()
    assert [v.video_id for v in videos] == ["good"]
    assert set(loader.rejected) == {"bad_int", "bad_header", "too_many_frames", "bad_label"}


def test_interior_blank_line_rejects_the_video(tmp_path):
    from backend.data import DatasetLoader

    write_video(tmp_path, "gap", [0, 1, 2])
    (tmp_path / "annotations" / "gap.txt").write_text(f"{ANNOTATION_HEADER}\n0\n\n1\n2\n")
    write_video(tmp_path, "trailing", [0, 1, 2])
    (tmp_path / "annotations" / "trailing.txt").write_text(f"{ANNOTATION_HEADER}\n0\n1\n2\n\n\n")
    loader = DatasetLoader(tmp_path / "frames", tmp_path / "annotations")
    videos = loader.load()
    assert [v.video_id for v in videos] == ["trailing"]
    assert videos[0].labels.tolist() == [0, 1, 2]
    assert "blank" in loader.rejected["gap"]


def test_record_invariants():
    with pytest.raises(AnnotationError):
        VideoRecord("v", [None], np.array([0, 1]), np.array([False, False]))
    with pytest.raises(AnnotationError):
        VideoRecord("v", [Path("a")], np.array([-1]), np.array([True]))


def test_forced_window_for_exact_run():
    sampler = ClipSampler([record([False, True, True, True, True, True, True, True, True, False])])
    rng = np.random.default_rng(0)
    assert {sampler.sample_window(rng) for _ in range(50)} == {(0, 1)}


def test_video_choice_is_uniform_over_eligible_videos():
    videos = [record([True] * 8), record([True] * 40), record([True] * 5)]
    sampler = ClipSampler(videos)
    rng = np.random.default_rng(3)
    counts = np.bincount([sampler.sample_window(rng)[0] for _ in range(10_000)], minlength=3)
    assert counts[2] == 0
    assert chisquare(counts[:2]).pvalue > 0.01


def test_start_index_is_uniform_over_windows():
    sampler = ClipSampler([record([True] * 12)])
    rng = np.random.default_rng(4)
    starts = np.bincount([sampler.sample_window(rng)[1] for _ in range(10_000)], minlength=5)
    assert len(starts) == 5
    assert chisquare(starts).pvalue > 0.01


def test_no_eligible_video_is_an_error():
    with pytest.raises(DataContractError):
        ClipSampler([record([True] * 7), record([True, False] * 8)])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.booleans(), min_size=1, max_size=40), min_size=1, max_size=4), st.integers(0, 1000))
def test_sampled_windows_are_fully_valid(masks, seed):
    videos = [record(m) for m in masks]
    if not any(len(eligible_starts(v.valid)) for v in videos):
        with pytest.raises(DataContractError):
            ClipSampler(videos)
        return
    sampler = ClipSampler(videos)
    rng = np.random.default_rng(seed)
    for _ in range(20):
        index, start = sampler.sample_window(rng)
        assert videos[index].valid[start:start + CLIP_LENGTH].all()
        assert start + CLIP_LENGTH <= len(videos[index])


def test_sampled_clip_has_full_mask(png):
    video = VideoRecord.from_frames("v", [png] * 10, [1] * 10)
    clip = sample_training_clip([video], np.random.default_rng(0), FrameLoader(SIZE))
    assert clip.mask.all() and clip.frames.shape == (8, 3, SIZE, SIZE)
    assert clip.labels.tolist() == [1] * 8


@pytest.mark.parametrize("length, expected_clips, padded", [(16, 2, 0), (20, 3, 4), (8, 1, 0), (9, 2, 7)])
def test_eval_clip_arrangement(png, length, expected_clips, padded):
    video = VideoRecord.from_frames("v", [png] * length, [2] * length)
    clips = make_eval_clips(video, FrameLoader(SIZE))
    assert len(clips) == expected_clips
    assert [c.start_index for c in clips] == list(range(0, length, 8))
    last = clips[-1]
    assert int((~last.mask).sum()) == padded
    if padded:
        assert np.all(last.frames[8 - padded:] == 0)
        assert np.all(last.labels[8 - padded:] == -1)


def test_eval_arrangement_covers_every_frame_once(png):
    rng = np.random.default_rng(5)
    loader = FrameLoader(SIZE)
    for length in range(1, 101):
        labels = rng.integers(-1, 7, length)
        present = rng.random(length) < 0.9
        video = VideoRecord.from_frames("v", [png if p else None for p in present], labels)
        clips = make_eval_clips(video, loader)
        assert len(clips) == math.ceil(length / CLIP_LENGTH)
        assert sum(int(c.mask.sum()) for c in clips) == int(video.valid.sum())
        covered = np.concatenate([c.labels for c in clips])
        assert np.array_equal(covered[:length], labels)
        assert np.all(covered[length:] == -1)


def test_normalize_constants():
    zero = normalize_frame(np.zeros((4, 4, 3), dtype=np.uint8), Precision.FLOAT64)
    for c, (m, s) in enumerate(zip((0.485, 0.456, 0.406), (0.229, 0.224, 0.225))):
        assert np.allclose(zero[c], -m / s)
    image = np.zeros((4, 4, 3), dtype=np.uint8)
    image[..., 0] = 255
    assert np.allclose(normalize_frame(image, Precision.FLOAT64)[0], (1 - 0.485) / 0.229)


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, (6, 6, 3)))
def test_normalize_round_trip(image):
    restored = denormalize_frame(normalize_frame(image))
    assert np.abs(restored.astype(int) - image.astype(int)).max() <= 1


def test_normalize_rejects_wrong_dimensions():
    with pytest.raises(ShapeError):
        normalize_frame(np.zeros((4, 4), dtype=np.uint8))
    with pytest.raises(ShapeError):
        normalize_frame(np.zeros((4, 4, 4), dtype=np.uint8))


def test_frame_loader_checks_size_and_fills_missing(png):
    assert np.all(FrameLoader(SIZE).load(None) == 0)
    with pytest.raises(DataContractError):
        FrameLoader(16).load(png)


def test_undecodable_crop_is_a_data_contract_error(tmp_path):
    write_video(tmp_path, "a", [0, 1, 2])
    (tmp_path / "frames" / "a" / "000001.png").write_bytes(b"not a png at all")
    (video,) = load_dataset(tmp_path / "frames", tmp_path / "annotations")
    loader = FrameLoader(SIZE)
    assert loader.load(video.frame_paths[0]).shape == (3, SIZE, SIZE)
    with pytest.raises(DataContractError, match="000001.png"):
        loader.load_many(video.frame_paths)


def test_threaded_loading_keeps_order(tmp_path):
    write_video(tmp_path, "a", list(range(7)) * 3)
    (video,) = load_dataset(tmp_path / "frames", tmp_path / "annotations")
    serial = FrameLoader(SIZE, workers=1).load_many(video.frame_paths)
    threaded = FrameLoader(SIZE, workers=4).load_many(video.frame_paths)
    assert np.array_equal(serial, threaded)


def test_scan_unlabeled_uses_highest_index(tmp_path):
    write_video(tmp_path, "a", [0] * 6, missing={1, 5})
    (video,) = scan_unlabeled(tmp_path / "frames")
    assert len(video) == 5
    assert video.present.tolist() == [True, False, True, True, True]
    assert not video.valid.any()
