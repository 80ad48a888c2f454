import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from segrobust.labelmap import (
    DatasetManifest,
    EvalReport,
    LabelMap,
    LabelMapError,
    ManifestItem,
    RgbImage,
    ScoreMap,
    load_label_map,
    load_manifest,
    load_rgb_image,
    read_score_map,
    save_label_map,
    save_manifest,
    save_rgb_image,
    write_score_map,
)


def _manifest(n_classes=19, ignore=255):
    return DatasetManifest(n_classes=n_classes, items=(), ignore_value=ignore)


def test_decode_two_pixel_png(tmp_path):
    p = tmp_path / "a.png"
    Image.fromarray(np.array([[0, 255]], dtype=np.uint8)).save(p)
    lm = load_label_map(p, _manifest())
    assert (lm.width, lm.height) == (2, 1)
    assert lm.data.tolist() == [[0, 255]]


def test_out_of_range_reports_coordinate(tmp_path):
    p = tmp_path / "a.png"
    Image.fromarray(np.array([[19]], dtype=np.uint8)).save(p)
    with pytest.raises(LabelMapError, match=r"class id out of range at \(0,0\)"):
        load_label_map(p, _manifest())


def test_offending_coordinate_is_x_then_y():
    data = np.zeros((3, 4), dtype=np.uint8)
    data[2, 1] = 30
    with pytest.raises(LabelMapError, match=r"at \(1,2\)"):
        LabelMap(data, 19)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_label_map(tmp_path / "nope.png", _manifest())


@pytest.mark.parametrize("mode", ["RGB", "I;16", "LA"])
def test_rejects_non_8bit_single_channel(tmp_path, mode):
    p = tmp_path / "a.png"
    Image.new(mode, (3, 2)).save(p)
    with pytest.raises(LabelMapError, match="single-channel 8-bit"):
        load_label_map(p, _manifest())


def test_rejects_non_png(tmp_path):
    p = tmp_path / "a.bmp"
    Image.new("L", (2, 2)).save(p, format="BMP")
    with pytest.raises(LabelMapError, match="PNG"):
        load_label_map(p, _manifest())


def test_label_map_is_immutable():
    lm = LabelMap(np.zeros((2, 2), dtype=np.uint8), 3)
    with pytest.raises(ValueError):
        lm.data[0, 0] = 1


def test_all_ignore_round_trip(tmp_path):
    lm = LabelMap(np.full((5, 7), 255, dtype=np.uint8), 19)
    save_label_map(lm, tmp_path / "x.png")
    assert load_label_map(tmp_path / "x.png", _manifest()) == lm


@st.composite
def label_maps(draw):
    n = draw(st.integers(2, 255))
    ignore = draw(st.integers(n, 255)) if n < 255 else 255
    shape = draw(st.tuples(st.integers(1, 24), st.integers(1, 24)))
    data = draw(arrays(np.uint8, shape, elements=st.integers(0, n - 1)))
    holes = draw(arrays(bool, shape))
    data = np.where(holes, np.uint8(ignore), data)
    return LabelMap(data, n, ignore)


@settings(max_examples=1000, deadline=None)
@given(label_maps())
def test_label_map_round_trip(tmp_path_factory, lm):
    p = tmp_path_factory.mktemp("rt") / "m.png"
    save_label_map(lm, p)
    back = load_label_map(p, DatasetManifest(lm.n_classes, (), lm.ignore_value))
    assert back == lm
    assert back.data.dtype == np.uint8


@settings(max_examples=100, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 16), st.integers(1, 16), st.just(3))))
def test_rgb_round_trip(tmp_path_factory, arr):
    p = tmp_path_factory.mktemp("rgb") / "i.png"
    save_rgb_image(RgbImage(arr), p)
    assert load_rgb_image(p) == RgbImage(arr)


def test_score_map_round_trip(tmp_path, rng):
    probs = rng.dirichlet(np.ones(4), size=(3, 5)).astype(np.float32)
    write_score_map(ScoreMap(probs), tmp_path / "s.smap")
    raw = (tmp_path / "s.smap").read_bytes()
    assert raw[:4] == b"SMAP"
    assert int.from_bytes(raw[4:8], "little") == 3  # height
    assert int.from_bytes(raw[8:12], "little") == 5  # width
    assert int.from_bytes(raw[12:16], "little") == 4
    back = read_score_map(tmp_path / "s.smap")
    np.testing.assert_array_equal(back.data, probs)
    # class-fastest layout
    assert np.frombuffer(raw[16:32], "<f4").tolist() == probs[0, 0].tolist()


def test_score_map_rejects_non_simplex(tmp_path):
    write_score_map(np.full((2, 2, 3), 0.5, dtype=np.float32), tmp_path / "s.smap")
    with pytest.raises(LabelMapError, match="probability vector"):
        read_score_map(tmp_path / "s.smap")


def test_single_channel_score_map_skips_simplex(tmp_path):
    write_score_map(np.full((2, 2), 3.0, dtype=np.float32), tmp_path / "a.smap")
    assert read_score_map(tmp_path / "a.smap").n_classes == 1


def test_score_map_bad_magic_and_length(tmp_path):
    (tmp_path / "a").write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(LabelMapError, match="magic"):
        read_score_map(tmp_path / "a")
    (tmp_path / "b").write_bytes(b"SMAP" + (1).to_bytes(4, "little") * 3)
    with pytest.raises(LabelMapError, match="bytes"):
        read_score_map(tmp_path / "b")


def _write(path, doc):
    path.write_text(json.dumps(doc))
    return path


def test_minimal_manifest(tmp_path):
    p = _write(tmp_path / "m.json", {"n_classes": 19, "ignore_value": 255,
                                     "items": [{"id": "a", "label": "labels/a.png"}]})
    m = load_manifest(p)
    assert m.n_classes == 19 and len(m) == 1
    assert m.items[0].label == (tmp_path / "labels" / "a.png").resolve()


def test_manifest_defaults_ignore_to_255(tmp_path):
    m = load_manifest(_write(tmp_path / "m.json", {"n_classes": 3, "items": []}))
    assert m.ignore_value == 255


def test_manifest_rejects_single_class(tmp_path):
    with pytest.raises(LabelMapError, match="n_classes"):
        load_manifest(_write(tmp_path / "m.json", {"n_classes": 1, "items": []}))


def test_manifest_rejects_duplicate_ids(tmp_path):
    doc = {"n_classes": 3, "items": [{"id": "a", "label": "x.png"}, {"id": "a", "label": "y.png"}]}
    with pytest.raises(LabelMapError, match="duplicate"):
        load_manifest(_write(tmp_path / "m.json", doc))


def test_manifest_rejects_repeated_path_within_item(tmp_path):
    doc = {"n_classes": 3, "items": [{"id": "a", "label": "x.png", "prediction": "x.png"}]}
    with pytest.raises(LabelMapError, match="same path"):
        load_manifest(_write(tmp_path / "m.json", doc))


def test_manifest_parse_error(tmp_path):
    (tmp_path / "m.json").write_text("{not json")
    with pytest.raises(LabelMapError, match="parse"):
        load_manifest(tmp_path / "m.json")


def test_missing_label_file_fails_lazily(tmp_path):
    m = load_manifest(_write(tmp_path / "m.json", {"n_classes": 3, "items": [{"id": "a", "label": "gone.png"}]}))
    with pytest.raises(FileNotFoundError):
        m.load_label("a")


def test_manifest_save_is_relative_inside_root(tmp_path):
    item = ManifestItem("a", (tmp_path / "out" / "labels" / "a.png").resolve(), image=(tmp_path / "img.png").resolve())
    save_manifest(DatasetManifest(5, (item,)), tmp_path / "out" / "manifest.json")
    doc = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert doc["items"][0]["label"] == "labels/a.png"
    assert doc["items"][0]["image"] == (tmp_path / "img.png").resolve().as_posix()
    assert load_manifest(tmp_path / "out" / "manifest.json").items[0] == item


def test_eval_report_rejects_unknown_metric():
    with pytest.raises(ValueError, match="unknown metric"):
        EvalReport({"accuracy": 1.0}, None, "0", "0" * 64, 0)
