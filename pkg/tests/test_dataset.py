import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import image_row, label_row
from facevad.dataset import (
    LABEL_HEADER,
    DataFormatError,
    FaceImage,
    augment_flip,
    batch_iter,
    build_dataset,
    image_id,
    load_data_dir,
    mirror,
    parse_crowd_labels,
    parse_image_csv,
    preprocess,
    resize_bilinear,
    synthesize,
    synthetic_norms,
    write_synthetic,
)
from facevad.tensor import Tensor
from facevad.vad import CrowdLabelCounts, map_labels

ZEROS = np.zeros(2304, dtype=int)


# ---- parse_image_csv

def test_parse_all_black_training(write_images):
    imgs = parse_image_csv(write_images([image_row(ZEROS)]))
    assert len(imgs) == 1
    assert imgs[0].pixels.shape == (48, 48) and imgs[0].pixels.max() == 0
    assert imgs[0].usage == "Training" and imgs[0].id == "fer0000000.png"


def test_parse_wrong_count_cites_line(write_images):
    p = write_images([image_row(ZEROS), image_row(ZEROS[:-1])])
    with pytest.raises(DataFormatError, match=r":3:"):
        parse_image_csv(p)


def test_parse_out_of_range_and_usage(write_images):
    bad = ZEROS.copy()
    bad[5] = 256
    with pytest.raises(DataFormatError, match="range"):
        parse_image_csv(write_images([image_row(bad)]))
    with pytest.raises(DataFormatError, match="Usage"):
        parse_image_csv(write_images([image_row(ZEROS, usage="Holdout")]))


def test_image_ids_follow_row_index(write_images):
    imgs = parse_image_csv(write_images([image_row(ZEROS)] * 3))
    assert [im.id for im in imgs] == [image_id(0), image_id(1), image_id(2)]


# ---- parse_crowd_labels

def test_labels_happiness_row(write_labels):
    lab = parse_crowd_labels(write_labels([label_row("a.png", happiness=10)]))
    assert lab["a.png"] == CrowdLabelCounts(happiness=10)


def test_labels_all_discarded(write_labels):
    c = parse_crowd_labels(write_labels([label_row("a.png", unknown=4, NF=6)]))["a.png"]
    assert c.rated == 0 and c.discarded == 10


def test_labels_column_order(write_labels):
    row = "Training,a.png,1,2,3,4,0,0,0,0,0,0"
    c = parse_crowd_labels(write_labels([row]))["a.png"]
    assert (c.neutral, c.happiness, c.surprise, c.sadness) == (1, 2, 3, 4)


def test_labels_negative_and_missing_column(write_labels):
    with pytest.raises(DataFormatError, match="negative"):
        parse_crowd_labels(write_labels([label_row("a.png", fear=-1)]))
    with pytest.raises(DataFormatError, match="contempt"):
        parse_crowd_labels(write_labels(["Training,a.png,1,2,3,4,0,0,0,0,0"], header=[c for c in LABEL_HEADER if c != "contempt"]))


def test_labels_accept_ferplus_header(write_labels):
    header = ["Usage", "Image name", *LABEL_HEADER[2:]]
    lab = parse_crowd_labels(write_labels([label_row("a.png", fear=3), "Training,,10,0,0,0,0,0,0,0,0,0"], header=header))
    assert list(lab) == ["a.png"] and lab["a.png"].fear == 3


# ---- build_dataset

def test_build_drops_unratable_and_unlabeled(write_images, write_labels, caplog):
    imgs = parse_image_csv(write_images([
        image_row(ZEROS, "Training"), image_row(ZEROS, "PublicTest"),
        image_row(ZEROS, "PrivateTest"), image_row(ZEROS, "Training"),
    ]))
    labels = parse_crowd_labels(write_labels([
        label_row(image_id(0), happiness=10),
        label_row(image_id(1), sadness=6, unknown=4),
        label_row(image_id(2), unknown=5, NF=5),
        label_row("ghost.png", anger=10),
    ]))
    with caplog.at_level(logging.WARNING):
        ds = build_dataset(imgs, labels, synthetic_norms())
    assert "ghost.png" in caplog.text
    assert [e.id for e in ds.train] == [image_id(0)]
    assert [e.id for e in ds.val] == [image_id(1)]
    assert ds.test == []
    assert ds.dropped_unratable == 1 and ds.dropped_unlabeled == 1
    assert ds.retained == 2


def test_build_two_images_one_labeled():
    norms = synthetic_norms()
    imgs = [FaceImage(image_id(i), np.zeros((48, 48), np.uint8), "Training") for i in range(2)]
    ds = build_dataset(imgs, {image_id(1): CrowdLabelCounts(fear=10)}, norms)
    assert ds.retained == 1
    assert ds.train[0].target == map_labels(CrowdLabelCounts(fear=10), norms)


@settings(max_examples=15, deadline=None)
@given(n=st.integers(1, 40), seed=st.integers(0, 1000), frac=st.floats(0, 0.5))
def test_synthetic_dataset_invariants(n, seed, frac):
    images, votes, norms = synthesize(n, seed, unratable_frac=frac)
    labels = {k: CrowdLabelCounts(**{e: v[e] for e in v if e not in ("unknown", "NF")},
                                  discarded=v["unknown"] + v["NF"]) for k, (_, v) in votes.items()}
    ds = build_dataset(images, labels, norms, dims=3)
    unratable = sum(1 for c in labels.values() if c.rated == 0)
    assert ds.retained == n - unratable
    ids = [e.id for e in ds.all()]
    assert len(ids) == len(set(ids))
    for e in ds.all():
        assert np.all((e.target.as_array() >= 1) & (e.target.as_array() <= 9))
        assert e.target == map_labels(e.counts, norms, 3)
    for _, v in votes.values():
        assert sum(v.values()) == 10


# ---- preprocess / resize / flip

def test_preprocess_native_and_recover():
    px = np.random.default_rng(0).integers(0, 256, size=(48, 48)).astype(np.uint8)
    t = preprocess(FaceImage("x", px, "Training"))
    assert t.shape == (1, 48, 48) and t.dtype == np.float32
    assert np.array_equal(t.data[0], px.astype(np.float32) / np.float32(255))
    assert np.array_equal(np.rint(t.data[0] * 255).astype(np.uint8), px)


def test_preprocess_three_channels_identical():
    px = np.random.default_rng(1).integers(0, 256, size=(48, 48)).astype(np.uint8)
    t = preprocess(FaceImage("x", px, "Training"), 224, 3)
    assert t.shape == (3, 224, 224)
    assert np.array_equal(t.data[0], t.data[1]) and np.array_equal(t.data[1], t.data[2])


def test_resize_constant_exact():
    t = preprocess(FaceImage("x", np.full((48, 48), 255, np.uint8), "Training"), 224)
    assert np.all(t.data == 1.0)


def test_resize_linear_ramp_interior():
    ramp = np.tile(np.arange(4, dtype=np.float64), (4, 1))
    out = resize_bilinear(ramp, 8)
    # half-pixel centres: output column j samples input x = (j + 0.5) / 2 - 0.5
    np.testing.assert_allclose(out[0, 1:7], (np.arange(1, 7) + 0.5) / 2 - 0.5)


def test_mirror_involution_and_symmetric():
    x = Tensor(np.random.default_rng(0).normal(size=(1, 4, 6)))
    assert np.array_equal(mirror(mirror(x)).data, x.data)
    half = np.random.default_rng(1).normal(size=(1, 4, 3))
    sym = Tensor(np.concatenate([half, half[..., ::-1]], axis=-1))
    assert np.array_equal(mirror(sym).data, sym.data)


def test_flip_rate():
    rng = np.random.default_rng(0)
    x = Tensor(np.arange(6.0).reshape(1, 2, 3))
    flips = sum(augment_flip(x, rng) is not x for _ in range(10_000))
    assert abs(flips / 10_000 - 0.5) < 0.02


# ---- batch_iter

def _examples(n):
    images, votes, norms = synthesize(n, 0, split=(1, 0, 0))
    labels = {k: CrowdLabelCounts(**{e: v[e] for e in v if e not in ("unknown", "NF")}) for k, (_, v) in votes.items()}
    return build_dataset(images, labels, norms, dims=2).train


def test_batch_sizes_and_order():
    ex = _examples(10)
    batches = list(batch_iter(ex, 4, shuffle=False))
    assert [b[0].shape[0] for b in batches] == [4, 4, 2]
    targets = np.concatenate([b[1].data for b in batches])
    assert np.array_equal(targets, np.array([e.target.as_array() for e in ex], dtype=np.float32))


def test_batch_determinism_and_permutation():
    ex = _examples(10)
    runs = [list(batch_iter(ex, 3, np.random.default_rng(7), flip=True)) for _ in range(2)]
    for (xa, ya), (xb, yb) in zip(*runs):
        assert np.array_equal(xa.data, xb.data) and np.array_equal(ya.data, yb.data)
    got = np.concatenate([y.data for _, y in runs[0]])
    want = np.array([e.target.as_array() for e in ex], dtype=np.float32)
    assert sorted(map(tuple, got)) == sorted(map(tuple, want))


def test_batch_bad_size():
    with pytest.raises(ValueError):
        list(batch_iter(_examples(2), 0, shuffle=False))


# ---- synthetic files

def test_write_synthetic_parseable_and_deterministic(tmp_path):
    a = write_synthetic(tmp_path / "a", 10, seed=3)
    b = write_synthetic(tmp_path / "b", 10, seed=3)
    for name in ("images.csv", "labels.csv", "norms.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    from facevad.vad import load_norms

    ds = load_data_dir(a, load_norms(a / "norms.csv"))
    assert ds.retained == 10
    assert len(parse_image_csv(a / "images.csv")) == 10
