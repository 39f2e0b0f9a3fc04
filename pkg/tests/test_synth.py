from __future__ import annotations

import numpy as np
import pytest

from hierfig.corpus import read_manifest, validate_hierarchy
from hierfig.features import SynthStore
from hierfig.synth import SynthSpec, family_similarity, generate, write_corpus


def test_counts():
    c = generate(SynthSpec(n_figures=4, panels_per_figure=(2, 2), regions_per_panel=(2, 2)))
    assert c.manifest.stats == {"M": 4, "P": 8, "R": 16}
    assert c.arrays["panel_maps"].shape == (8, 6, 6, 4)
    assert validate_hierarchy(c.manifest) == []


def test_seed_determinism():
    a, b = generate(SynthSpec(seed=5, n_figures=6)), generate(SynthSpec(seed=5, n_figures=6))
    assert a.manifest == b.manifest
    assert all(np.array_equal(a.arrays[k], b.arrays[k]) for k in a.arrays)
    c = generate(SynthSpec(seed=6, n_figures=6))
    assert not np.array_equal(a.arrays["z_M"], c.arrays["z_M"])


def test_noise_free_image_rows_are_linear_in_codes():
    c = generate(SynthSpec(n_figures=30, sigma=0.0))
    for level, key in (("M", "figure_image"), ("P", "panel_image"), ("R", "region_image")):
        z, x = c.latents(level), c.arrays[key]
        coef, *_ = np.linalg.lstsq(z, x, rcond=None)
        assert np.abs(z @ coef - x).max() < 1e-10


def test_panels_resemble_their_own_figure():
    own, other = family_similarity(generate(SynthSpec(n_figures=40)))
    assert own > 0.6 and abs(other) < 0.1


def test_write_and_reload(tmp_path):
    c = generate(SynthSpec(n_figures=3))
    mpath, fpath = write_corpus(c, tmp_path)
    assert read_manifest(mpath) == c.manifest
    store = SynthStore.load(fpath)
    pid = c.manifest.panels[1].panel_id
    assert np.array_equal(store.image_row(pid), c.arrays["panel_image"][1])
    assert np.array_equal(store.panel_map(pid), c.arrays["panel_maps"][1])


def test_spec_validation():
    for bad in [dict(panels_per_figure=(0, 2)), dict(regions_per_panel=(1, 5)), dict(n_figures=0),
                dict(sigma=-1.0), dict(text_dim=30)]:
        with pytest.raises(ValueError):
            SynthSpec(**bad)
    with pytest.raises(ValueError):
        SynthSpec.from_dict({"bogus": 1})
    assert SynthSpec.from_dict({"panels_per_figure": 2}).panels_per_figure == (2, 2)
