from pathlib import Path

import numpy as np
import pytest
from matplotlib.colors import rgb_to_hsv
from scipy import ndimage

from tooldet.data import (
    Annotation,
    AnnotationError,
    SyntheticSceneConfig,
    VOCObject,
    estimate_flow,
    flow_to_rgb,
    generate_dataset,
    generate_synthetic_sequence,
    load_split,
    parse_voc_xml,
    render_flow_cache,
    write_dataset,
    write_voc_xml,
)

GOLDEN = Path(__file__).parent / "data" / "golden_voc.xml"

MINIMAL = b"""<annotation>
  <folder>f</folder><filename>a.jpg</filename>
  <size><width>854</width><height>480</height><depth>3</depth></size>
  <object><name>tool</name><bndbox><xmin>10</xmin><ymin>20</ymin><xmax>110</xmax><ymax>220</ymax></bndbox></object>
</annotation>"""


def random_annotation(rng) -> Annotation:
    w, h = int(rng.integers(16, 1000)), int(rng.integers(16, 1000))
    ann = Annotation(
        filename=f"clip{rng.integers(1000)}_{rng.integers(10000):05d}.{rng.choice(['jpg', 'png'])}",
        width=w, height=h, depth=int(rng.choice([1, 3])), folder=str(rng.choice(["synthetic", "a&b <x>", ""])),
    )
    for _ in range(rng.integers(0, 5)):
        x0, x1 = np.sort(rng.uniform(0, w, 2))
        y0, y1 = np.sort(rng.uniform(0, h, 2))
        if rng.random() < 0.5:
            x0, y0, x1, y1 = np.floor(x0), np.floor(y0), np.ceil(x1) + 1, np.ceil(y1) + 1
            x1, y1 = min(x1, w), min(y1, h)
        ann.objects.append(VOCObject(
            name=str(rng.choice(["tool", "needle", "left tool"])),
            box=(float(x0), float(y0), float(x1), float(y1)),
            pose=str(rng.choice(["Unspecified", "Left", "Right"])),
            truncated=int(rng.integers(2)), difficult=int(rng.integers(2)),
        ))
    return ann


# VOC

def test_parse_minimal():
    ann = parse_voc_xml(MINIMAL)
    assert (ann.width, ann.height, ann.depth) == (854, 480, 3)
    assert len(ann.objects) == 1
    assert ann.objects[0].name == "tool"
    assert ann.objects[0].box == (10, 20, 110, 220)


def test_parse_no_objects():
    doc = MINIMAL.replace(MINIMAL[MINIMAL.index(b"<object>"):MINIMAL.index(b"</annotation>")], b"")
    assert parse_voc_xml(doc).objects == []


def test_parse_missing_element_named():
    with pytest.raises(AnnotationError, match="size/width"):
        parse_voc_xml(MINIMAL.replace(b"<width>854</width>", b""))
    with pytest.raises(AnnotationError, match="xmax"):
        parse_voc_xml(MINIMAL.replace(b"<xmax>110</xmax>", b""))


def test_parse_rejects_bad_boxes():
    with pytest.raises(AnnotationError, match="empty"):
        parse_voc_xml(MINIMAL.replace(b"<xmax>110</xmax>", b"<xmax>10</xmax>"))
    with pytest.raises(AnnotationError, match="outside"):
        parse_voc_xml(MINIMAL.replace(b"<ymax>220</ymax>", b"<ymax>481</ymax>"))
    with pytest.raises(AnnotationError, match="malformed"):
        parse_voc_xml(b"<annotation>")


def test_write_layout():
    ann = Annotation("x.png", 10, 10, objects=[
        VOCObject("tool", (0, 0, 5, 5)), VOCObject("needle", (1, 1, 9, 9)),
    ])
    doc = write_voc_xml(ann)
    assert doc.count(b"<object>") == 2
    assert doc.index(b"<name>tool</name>") < doc.index(b"<name>needle</name>")
    empty = write_voc_xml(Annotation("x.png", 10, 10))
    assert b"<object>" not in empty and b"<size>" in empty


def test_golden_file():
    ann = parse_voc_xml(GOLDEN.read_bytes())
    assert ann.filename == "video07_0142.jpg" and ann.folder == "atlas_dione"
    assert (ann.width, ann.height) == (854, 480)
    assert [o.box for o in ann.objects] == [(212, 97, 401, 288), (640, 231, 854, 480)]
    assert ann.objects[1].truncated == 1 and ann.objects[1].pose == "Left"
    assert parse_voc_xml(write_voc_xml(ann)) == ann


def test_round_trip_random(rng):
    for _ in range(100):
        ann = random_annotation(rng)
        assert parse_voc_xml(write_voc_xml(ann)) == ann


# synthetic sequences

def test_zero_objects():
    seq = generate_synthetic_sequence(SyntheticSceneConfig(width=64, height=48, n_tools=0, length=3), seed=0)
    assert len(seq.frames) == 3
    assert all(not a.objects for a in seq.annotations)
    assert all(not f.any() for f in seq.flows)
    assert seq.frames[0].shape == (48, 64, 3) and seq.frames[0].dtype == np.uint8


def test_known_velocity_flow():
    cfg = SyntheticSceneConfig(width=128, height=128, n_tools=1, speed_range=(2.0, 2.0),
                               heading_range=(0.0, 0.0), length=3)
    seq = generate_synthetic_sequence(cfg, seed=5)
    flow = seq.flows[0]
    moving = np.abs(flow).sum(axis=-1) > 0
    assert moving.sum() > 100
    np.testing.assert_array_equal(np.unique(flow[moving], axis=0), [[2.0, 0.0]])
    assert not flow[~moving].any()


def test_flow_matches_box_motion():
    cfg = SyntheticSceneConfig(width=160, height=160, n_tools=1, length=4, shaft_length=(30, 40))
    for seed in range(5):
        seq = generate_synthetic_sequence(cfg, seed=seed)
        b0, b1 = seq.annotations[0].boxes(), seq.annotations[1].boxes()
        if len(b0) != 1 or len(b1) != 1 or seq.annotations[0].objects[0].truncated:
            continue
        v = np.unique(seq.flows[0][np.abs(seq.flows[0]).sum(-1) > 0], axis=0)[0]
        centre_shift = (b1[0, :2] + b1[0, 2:]) / 2 - (b0[0, :2] + b0[0, 2:]) / 2
        np.testing.assert_allclose(centre_shift, v, atol=1.5)


def test_boxes_tightly_bound_tool_pixels():
    cfg = SyntheticSceneConfig(width=128, height=128, n_tools=1, length=2)
    seq = generate_synthetic_sequence(cfg, seed=4)
    for t in range(2):
        moving = np.abs(seq.flows[t]).sum(-1) > 0
        for x0, y0, x1, y1 in seq.annotations[t].boxes():
            ys, xs = np.nonzero(moving)
            assert (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1) == (x0, y0, x1, y1)


def test_sequence_deterministic():
    cfg = SyntheticSceneConfig(width=96, height=96, n_distractors=2, length=3)
    a = generate_synthetic_sequence(cfg, seed=9)
    b = generate_synthetic_sequence(cfg, seed=9)
    for fa, fb in zip(a.frames, b.frames):
        assert fa.tobytes() == fb.tobytes()
    assert a.annotations == b.annotations


def test_distractors_are_static_and_unannotated():
    cfg = SyntheticSceneConfig(width=128, height=128, n_tools=0, n_distractors=2, length=3)
    seq = generate_synthetic_sequence(cfg, seed=1)
    assert all(not a.objects for a in seq.annotations)
    plain = generate_synthetic_sequence(SyntheticSceneConfig(width=128, height=128, n_tools=0, length=3), seed=1)
    assert np.abs(seq.frames[0].astype(int) - plain.frames[0].astype(int)).max() > 30
    # only sensor noise changes between frames
    assert np.abs(seq.frames[0].astype(int) - seq.frames[2].astype(int)).max() < 30


def test_config_validation():
    with pytest.raises(ValueError):
        SyntheticSceneConfig(n_tools=-1)
    with pytest.raises(ValueError):
        SyntheticSceneConfig(speed_range=(1.0, float("inf")))


def test_dataset_split_by_sequence():
    ds = generate_dataset(6, SyntheticSceneConfig(width=64, height=64, length=2), seed=0, n_test=2)
    train_seqs = {s.sequence for s in ds["train"]}
    test_seqs = {s.sequence for s in ds["test"]}
    assert len(train_seqs) == 4 and len(test_seqs) == 2
    assert not train_seqs & test_seqs


def test_dataset_on_disk(tmp_path):
    cfg = SyntheticSceneConfig(width=64, height=64, length=2, shaft_length=(20, 30))
    counts = write_dataset(tmp_path, 3, cfg, seed=1, n_test=1)
    assert counts == {"train": 4, "test": 2}
    with pytest.raises(FileNotFoundError, match="flow"):
        load_split(tmp_path, "train")
    assert render_flow_cache(tmp_path) == 6
    assert (tmp_path / "flow" / "seq000_f000.flow.png").exists()
    on_disk = load_split(tmp_path, "train")
    in_memory = generate_dataset(3, cfg, seed=1, n_test=1)["train"]
    for a, b in zip(on_disk, in_memory):
        assert a.frame_id == b.frame_id
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.flow_image, b.flow_image)
        assert a.annotation == b.annotation


# flow estimation

def texture(rng, shape=(64, 64)):
    img = ndimage.gaussian_filter(rng.normal(size=shape), 2.0)
    return (img - img.min()) / (img.max() - img.min())


def test_identical_frames_zero_flow(rng):
    img = texture(rng)
    assert np.abs(estimate_flow(img, img)).max() <= 1e-3


def test_one_pixel_translation(rng):
    img = texture(rng, (80, 80))
    shifted = np.roll(img, 1, axis=1)
    flow = estimate_flow(img, shifted, alpha=0.05, iterations=300)
    inner = flow[10:-10, 10:-10]
    assert abs(np.median(inner[..., 0]) - 1.0) <= 0.5
    assert abs(np.median(inner[..., 1])) <= 0.5


def test_flow_bounded(rng):
    a = rng.random((32, 32))
    b = rng.random((32, 32))
    for iters in (10, 100, 400):
        assert np.isfinite(estimate_flow(a, b, iterations=iters)).all()
        assert np.abs(estimate_flow(a, b, iterations=iters)).max() < 50


def test_flow_size_mismatch():
    with pytest.raises(ValueError):
        estimate_flow(np.zeros((8, 8)), np.zeros((8, 9)))


def test_flow_deterministic(rng):
    a, b = texture(rng, (32, 32)), texture(rng, (32, 32))
    assert estimate_flow(a, b).tobytes() == estimate_flow(a, b).tobytes()


# flow rendering

def test_zero_flow_is_white():
    assert (flow_to_rgb(np.zeros((5, 6, 2))) == 255).all()


def test_angle_zero_is_red():
    img = flow_to_rgb(np.tile([1.0, 0.0], (4, 4, 1)))
    assert (img == [255, 0, 0]).all()


def test_opposite_direction_complementary_hue(rng):
    flow = rng.normal(size=(10, 10, 2))
    h1 = rgb_to_hsv(flow_to_rgb(flow) / 255.0)[..., 0]
    h2 = rgb_to_hsv(flow_to_rgb(-flow) / 255.0)[..., 0]
    diff = np.abs(h1 - h2) % 1.0
    np.testing.assert_allclose(np.minimum(diff, 1 - diff), 0.5, atol=0.01)


def test_scale_invariance_constant_field():
    base = np.tile([0.6, -0.8], (6, 6, 1))
    assert (flow_to_rgb(base) == flow_to_rgb(7.5 * base)).all()


def test_non_finite_flow_rejected():
    with pytest.raises(ValueError):
        flow_to_rgb(np.full((2, 2, 2), np.nan))
