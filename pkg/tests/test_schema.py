import collections
import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from instap.schema import (
    HELD_OUT_COMBO,
    PALETTE,
    Box,
    DatasetFormatError,
    InstanceAnnotation,
    SceneConfig,
    SceneObject,
    SceneProgram,
    Vocab,
    default_vocab,
    detokenize,
    generate_dataset,
    generate_scene,
    read_dataset,
    read_ppm,
    render_sample,
    sample_caption_sentence,
    split_words,
    tokenize,
    validate_sample,
    write_dataset,
    write_ppm,
)


def one_object(shape="circle", size=16, x=24, y=24, vx=0, vy=0, T=1, canvas=(64, 64)):
    return SceneProgram(7, canvas, T, (SceneObject(shape, "red", size, x, y, vx, vy),))


# --- generation -------------------------------------------------------------


def test_generate_scene_deterministic():
    cfg = SceneConfig(T=1, object_count=(1, 1))
    assert generate_scene(7, cfg) == generate_scene(7, cfg)


def test_generate_scene_three_objects_contained():
    cfg = SceneConfig(T=8, object_count=(3, 3))
    prog = generate_scene(7, cfg)
    assert len(prog.objects) == 3
    H, W = cfg.canvas
    for o in prog.objects:
        for t in range(cfg.T):
            x, y = o.position(t)
            assert 0 <= x and x + o.size <= W and 0 <= y and y + o.size <= H


def test_generate_scene_rejects_oversized_object():
    with pytest.raises(ValueError, match="100"):
        generate_scene(7, SceneConfig(sizes=(100,)))


@pytest.mark.parametrize("counts", [(0, 2), (2, 9), (3, 2)])
def test_generate_scene_rejects_bad_count_range(counts):
    with pytest.raises(ValueError):
        generate_scene(1, SceneConfig(object_count=counts))


def test_generate_scene_rejects_zero_frames():
    with pytest.raises(ValueError):
        generate_scene(1, SceneConfig(T=0))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**40), st.integers(1, 8), st.integers(1, 4))
def test_containment_property(seed, T, n):
    cfg = SceneConfig(T=T, object_count=(1, n))
    prog = generate_scene(seed, cfg)
    for o in prog.objects:
        for t in range(T):
            x, y = o.position(t)
            assert 0 <= x <= 64 - o.size and 0 <= y <= 64 - o.size


# --- rendering --------------------------------------------------------------


def test_static_circle_is_image_with_centered_box():
    smp = render_sample(one_object())
    assert smp.kind == "image" and smp.num_frames == 1 and len(smp.instances) == 1
    b = smp.instances[0].trajectory[0]
    assert (b.x + b.w / 2, b.y + b.h / 2) == (32, 32)


def test_circle_radius_8_tight_box():
    smp = render_sample(one_object())
    assert smp.instances[0].trajectory[0] == Box(0, 24, 24, 16, 16)


def test_moving_circle_box_track():
    smp = render_sample(one_object(vx=2, T=4))
    assert [b.x for b in smp.instances[0].trajectory] == [24, 26, 28, 30]
    assert [b.t for b in smp.instances[0].trajectory] == [0, 1, 2, 3]


@pytest.mark.parametrize("shape", ["circle", "square", "triangle"])
def test_box_is_tight_pixel_scan(shape):
    smp = render_sample(one_object(shape=shape, size=11, x=5, y=9, vy=3, T=3))
    for b in smp.instances[0].trajectory:
        ys, xs = np.nonzero(smp.frames[b.t].any(axis=-1))
        assert (xs.min(), ys.min(), xs.max() - xs.min() + 1, ys.max() - ys.min() + 1) == (b.x, b.y, b.w, b.h)


def test_render_colours_from_palette():
    smp = render_sample(one_object(shape="square"))
    assert tuple(smp.frames[0, 30, 30]) == PALETTE["red"]


def test_render_captions_and_source():
    prog = SceneProgram(99, (64, 64), 2, (SceneObject("circle", "red", 8, 0, 0, 1, 0),
                                          SceneObject("square", "blue", 16, 40, 0, 0, 2)))
    smp = render_sample(prog)
    assert smp.global_caption == ["a red circle moves right and a blue square moves down"]
    assert smp.instances[0].caption[0] == "a small red circle moves right"
    assert "blue" not in " ".join(smp.instances[0].caption)
    assert smp.source_id == 99


def test_render_is_byte_deterministic():
    prog = generate_scene(3, SceneConfig(T=4, object_count=(4, 4)))
    assert render_sample(prog).frames.tobytes() == render_sample(prog).frames.tobytes()


def test_splits_respect_held_out_combo():
    cfg = SceneConfig(object_count=(3, 4))
    train = generate_dataset(40, 0, "train", cfg)
    zero = generate_dataset(10, 0, "zero", cfg)
    phrase = " ".join(HELD_OUT_COMBO)
    assert not any(phrase in c for s in train for i in s.instances for c in i.caption)
    assert all(any(phrase in c for i in s.instances for c in i.caption) for s in zero)
    assert not {s.source_id for s in train} & {s.source_id for s in zero}


def test_dataset_sorted_by_id_and_unique_sources():
    ds = generate_dataset(12, 3)
    assert [s.sample_id for s in ds] == sorted(s.sample_id for s in ds)
    assert len({s.source_id for s in ds}) == 12


def test_image_fraction_produces_images():
    ds = generate_dataset(40, 0, image_fraction=0.5)
    kinds = collections.Counter(s.kind for s in ds)
    assert kinds["image"] > 0 and kinds["video"] > 0
    assert all(s.num_frames == 1 for s in ds if s.kind == "image")


# --- validation -------------------------------------------------------------


def test_valid_sample_has_no_violations():
    for s in generate_dataset(5, 1):
        assert validate_sample(s) == []


def test_zero_width_box_violation():
    smp = render_sample(one_object())
    bad = dataclasses.replace(smp, instances=[InstanceAnnotation(0, [Box(0, 24, 24, 0, 16)], ["a red circle"])])
    v = validate_sample(bad)
    assert len(v) == 1 and "Box.w > 0" in v[0]


def test_repeated_frame_index_violation():
    smp = render_sample(one_object(T=2))
    traj = [Box(0, 24, 24, 16, 16), Box(0, 24, 24, 16, 16)]
    bad = dataclasses.replace(smp, instances=[InstanceAnnotation(0, traj, ["x"])])
    v = validate_sample(bad)
    assert len(v) == 1 and "strictly increasing" in v[0]


def test_image_with_two_frames_violation():
    smp = dataclasses.replace(render_sample(one_object(T=2)), kind="image")
    assert any("kind" in v for v in validate_sample(smp))


# --- text -------------------------------------------------------------------


def test_vocab_layout():
    v = default_vocab()
    assert v.cls_id == 0
    assert len(set(v.words)) == len(v)
    assert all(v[w] == i for i, w in enumerate(v.words))


def test_vocab_rejects_duplicates():
    with pytest.raises(ValueError):
        Vocab(list(default_vocab().words) + ["red"])


def test_tokenize_empty():
    v = default_vocab()
    assert tokenize("", v, 5) == [v.cls_id] + [v.pad_id] * 4


def test_tokenize_known_words():
    v = default_vocab()
    assert tokenize("red circle", v, 4) == [v.cls_id, v["red"], v["circle"], v.pad_id]


def test_tokenize_truncates():
    assert len(tokenize(" ".join(["red"] * 100), default_vocab(), 8)) == 8


def test_tokenize_unknown_word():
    v = default_vocab()
    assert tokenize("zebra", v, 3)[1] == v.unk_id


def test_tokenize_rejects_tiny_window():
    with pytest.raises(ValueError):
        tokenize("red", default_vocab(), 1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(default_vocab().words[5:]), max_size=10))
def test_detokenize_inverts_tokenize(words):
    v = default_vocab()
    sent = " ".join(words)
    assert split_words(detokenize(tokenize(sent, v, 16), v)) == words


def test_caption_single_sentence():
    assert all(sample_caption_sentence(["only"], e, 0) == "only" for e in range(5))


def test_caption_cycling_permutation():
    cap = ["a", "b", "c"]
    rng = np.random.default_rng(5)
    got = [sample_caption_sentence(cap, e, rng) for e in range(3)]
    assert sorted(got) == cap


def test_caption_cycling_counts():
    cap = ["a", "b", "c"]
    rng = np.random.default_rng(5)
    counts = collections.Counter(sample_caption_sentence(cap, e, rng) for e in range(300))
    assert counts == {"a": 100, "b": 100, "c": 100}


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 50), st.integers(0, 2**32 - 1))
def test_caption_window_covers_all(n, start, seed):
    cap = [f"s{i}" for i in range(n)]
    rng = np.random.default_rng(seed)
    assert {sample_caption_sentence(cap, e, rng) for e in range(start, start + n)} == set(cap)


# --- on-disk format ---------------------------------------------------------


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img)


def test_dataset_round_trip(tmp_path):
    ds = generate_dataset(10, 2, image_fraction=0.3)
    write_dataset(ds, tmp_path / "d")
    assert read_dataset(tmp_path / "d") == ds


def test_manifest_record_fields(tmp_path):
    write_dataset(generate_dataset(1, 2), tmp_path)
    rec = json.loads((tmp_path / "manifest.jsonl").read_text().splitlines()[0])
    assert set(rec) == {"sample_id", "kind", "source_id", "frames", "global_caption", "instances"}
    assert set(rec["instances"][0]) == {"instance_id", "caption", "trajectory"}
    assert set(rec["instances"][0]["trajectory"][0]) == {"t", "x", "y", "w", "h"}


def test_truncated_line_reports_index(tmp_path):
    write_dataset(generate_dataset(3, 2), tmp_path)
    m = tmp_path / "manifest.jsonl"
    lines = m.read_text().splitlines()
    lines[1] = lines[1][: len(lines[1]) // 2]
    m.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError, match="line 2"):
        read_dataset(tmp_path)


def test_empty_manifest(tmp_path):
    (tmp_path / "manifest.jsonl").write_text("")
    assert read_dataset(tmp_path) == []


def test_missing_frame_names_path(tmp_path):
    write_dataset(generate_dataset(1, 2), tmp_path)
    victim = sorted((tmp_path / "frames").iterdir())[0]
    victim.unlink()
    with pytest.raises(FileNotFoundError, match=victim.name):
        read_dataset(tmp_path)


def test_vocab_file_round_trip(tmp_path):
    v = default_vocab()
    v.save(tmp_path / "vocab.txt")
    assert Vocab.load(tmp_path / "vocab.txt") == v
    assert (tmp_path / "vocab.txt").read_text().splitlines()[0] == "[CLS]"


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**40), st.integers(1, 4))
def test_round_trip_property(seed, T):
    import tempfile

    smp = render_sample(generate_scene(seed, SceneConfig(T=T)))
    with tempfile.TemporaryDirectory() as d:
        write_dataset([smp], d)
        assert read_dataset(d) == [smp]
