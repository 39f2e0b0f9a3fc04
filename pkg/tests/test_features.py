from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from helpers import FIXTURE_DIR
from hierfig.features import IMAGE_DIM, TEXT_DIM, FeatureError, feature_map, image_features, text_features, toy_featurize

# written by tests/oracles/image_features.py from an independent pixel computation
ORACLE = Path(__file__).parent / "oracles" / "fig00_features.json"


def test_black_image():
    f = image_features(Image.new("RGB", (10, 7)))
    assert f.shape == (IMAGE_DIM,)
    assert not f[:64].any()
    hist = f[64:].reshape(3, 8)
    assert hist[:, 0].tolist() == [1.0, 1.0, 1.0] and not hist[:, 1:].any()


def test_fixture_image_matches_oracle():
    expected = np.array(json.loads(ORACLE.read_text())["features"])
    with Image.open(FIXTURE_DIR / "images" / "fig00.png") as im:
        got = image_features(im)
    # Pillow's fixed-point luma rounding may differ from the oracle by one grey level
    assert np.abs(got[:64] - expected[:64]).max() <= 1 / 255 + 1e-12
    assert np.abs(got[64:] - expected[64:]).max() <= 1e-12


def test_bytes_and_undecodable_input():
    img = Image.new("RGB", (9, 9), (255, 0, 0))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    row, txt = toy_featurize(buf.getvalue(), "Tumor core")
    assert np.array_equal(row, image_features(img))
    assert txt.shape == (TEXT_DIM,) and np.linalg.norm(txt) == pytest.approx(1.0)
    with pytest.raises(FeatureError):
        toy_featurize(b"not an image", "x")
    with pytest.raises(FeatureError):
        toy_featurize("synth:syn0000", "x")


def test_text_features():
    assert np.array_equal(text_features("Tumor  Core"), text_features("tumor core"))
    assert not text_features("").any()


def test_feature_map_range():
    m = feature_map(Image.new("RGB", (20, 30), (255, 128, 0)))
    assert m.shape == (8, 8, 3)
    assert m[0, 0].tolist() == pytest.approx([1.0, 128 / 255, 0.0])
