from __future__ import annotations

import json
from dataclasses import replace

import numpy as np
import pytest

from hierfig.corpus import (BBox, CorpusManifest, DanglingLinkError, FigureRecord, InvalidManifestError,
                            ManifestFormatError, PanelRecord, RegionRecord, UnknownVersionError,
                            manifest_lines, read_manifest, validate_hierarchy, write_manifest)


def make_manifest(seed: int, n_figures: int = 3) -> CorpusManifest:
    rng = np.random.default_rng(seed)
    figs, panels, regions = [], [], []
    for i in range(n_figures):
        w, h = int(rng.integers(50, 900)), int(rng.integers(50, 900))
        fid = f"f{i}"
        figs.append(FigureRecord(fid, f"img/{fid}.png", f"Caption ü {i}. (A) tissue.", w, h,
                                 license_tag="CC-BY", article_title=None if i % 2 else "Title"))
        for j in range(int(rng.integers(0, 4))):
            x0, y0 = rng.uniform(0, w / 2), rng.uniform(0, h / 2)
            pb = BBox(x0, y0, rng.uniform(x0 + 1, w), rng.uniform(y0 + 1, h))
            pid = f"{fid}/p{j}"
            panels.append(PanelRecord(pid, fid, pb, identifier="ABC"[j] if j < 3 else None,
                                      fragments=[f"frag {j}"], generated_description=None if j else "desc",
                                      is_photographic=bool(j % 2 == 0), votes=float(j + 1),
                                      flags=["duplicate_identifier"] if j == 2 else []))
            for k in range(int(rng.integers(0, 3))):
                rx0, ry0 = rng.uniform(0, pb.width / 2), rng.uniform(0, pb.height / 2)
                rb = BBox(rx0, ry0, rng.uniform(rx0 + 0.1, pb.width), rng.uniform(ry0 + 0.1, pb.height))
                regions.append(RegionRecord(f"{pid}/r{k}", pid, rb, ("marker", "caption", "fused")[k % 3],
                                            grounded_subcaption="sub" if k != 1 else None,
                                            lvlm_caption="cap" if k != 0 else None))
    return CorpusManifest(figs, panels, regions)


@pytest.mark.parametrize("seed", range(25))
def test_round_trip_identity(tmp_path, seed):
    m = make_manifest(seed)
    path = tmp_path / "m.jsonl"
    write_manifest(m, path)
    assert read_manifest(path) == m


def test_manifest_format_is_level_tagged_lines(tmp_path):
    m = make_manifest(1)
    path = tmp_path / "m.jsonl"
    write_manifest(m, path)
    lines = path.read_text("utf-8").splitlines()
    assert len(lines) == 1 + len(m.figures) + len(m.panels) + len(m.regions)
    header = json.loads(lines[0])
    assert header == {"level": "header", "format_version": 1, "stats": m.stats}
    for line in lines[1:]:
        assert line.startswith('{"level":')
    assert lines == manifest_lines(m)


def test_dangling_link_names_missing_id(tmp_path):
    m = make_manifest(3)
    lines = manifest_lines(m)
    rec = json.loads(lines[-1])
    assert rec["level"] == "R"
    rec["parent_panel"] = "nope/p9"
    lines[-1] = json.dumps(rec)
    path = tmp_path / "m.jsonl"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(DanglingLinkError, match="nope/p9"):
        read_manifest(path)


@pytest.mark.parametrize("cut", [1, 5, 17])
def test_truncated_last_line_reports_line_number(tmp_path, cut):
    m = make_manifest(3)
    path = tmp_path / "m.jsonl"
    write_manifest(m, path)
    data = path.read_bytes()
    path.write_bytes(data[:len(data) - 1 - cut])  # drop the newline and `cut` bytes
    n_lines = len(manifest_lines(m))
    with pytest.raises(ManifestFormatError) as exc:
        read_manifest(path)
    assert exc.value.line_no == n_lines
    assert f"line {n_lines}" in str(exc.value)


def test_unknown_format_version(tmp_path):
    lines = manifest_lines(make_manifest(2))
    head = json.loads(lines[0])
    head["format_version"] = 99
    lines[0] = json.dumps(head)
    path = tmp_path / "m.jsonl"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(UnknownVersionError):
        read_manifest(path)


def test_header_stats_must_match(tmp_path):
    lines = manifest_lines(make_manifest(2))
    path = tmp_path / "m.jsonl"
    path.write_text("\n".join(lines[:-1]) + "\n", encoding="utf-8")
    with pytest.raises(ManifestFormatError, match="stats"):
        read_manifest(path)


def test_validate_well_formed_is_empty():
    for seed in range(10):
        assert validate_hierarchy(make_manifest(seed)) == []


def test_panel_exceeding_figure_is_one_containment_violation():
    m = make_manifest(4)
    p = m.panels[0]
    fig = m.figure_index()[p.parent_figure]
    m.panels[0] = replace(p, bbox=BBox(p.bbox.x_min, p.bbox.y_min, fig.width_px + 5, p.bbox.y_max))
    v = validate_hierarchy(m)
    assert [x.kind for x in v] == ["containment"]
    assert v[0].record_id == p.panel_id


def test_duplicate_panel_id_is_one_uniqueness_violation():
    m = make_manifest(4)
    a, b = m.panels[0], m.panels[1]
    m.panels[1] = replace(b, panel_id=a.panel_id, parent_figure=a.parent_figure, bbox=a.bbox)
    # regions of the renamed panel now hang off the first one; keep them inside it
    m.regions = [r for r in m.regions if r.parent_panel != b.panel_id]
    v = validate_hierarchy(m)
    assert [x.kind for x in v] == ["uniqueness"]


def test_other_violations_are_reported():
    m = make_manifest(5)
    r = m.regions[0]
    m.regions[0] = replace(r, grounded_subcaption=None, lvlm_caption=None)
    m.regions.append(replace(r, region_id="x", parent_panel="missing"))
    m.panels[0] = replace(m.panels[0], identifier="A1")
    kinds = sorted(x.kind for x in validate_hierarchy(m))
    assert kinds == ["identifier", "link", "text"]


def test_write_refuses_invalid_manifest(tmp_path):
    m = make_manifest(6)
    m.figures.append(m.figures[0])
    path = tmp_path / "m.jsonl"
    with pytest.raises(InvalidManifestError):
        write_manifest(m, path)
    assert not path.exists()


def test_bbox_invariants_and_units():
    with pytest.raises(ValueError):
        BBox(1, 0, 1, 2)
    with pytest.raises(ValueError):
        BBox(0, 0, 1.2, 1, unit="norm")
    with pytest.raises(ValueError):
        BBox(0, 0, 1, 1, unit="mm")
    b = BBox(10, 20, 30, 60)
    n = b.to_norm(100, 200)
    assert n.as_tuple() == (0.1, 0.1, 0.3, 0.3) and n.unit == "norm"
    assert n.to_px(100, 200) == BBox(10, 20, 30, 60)
    assert b.area == 800 and b.center == (20, 40)


def test_subset_keeps_descendants():
    m = make_manifest(7, n_figures=5)
    keep = [m.figures[1].figure_id, m.figures[3].figure_id]
    s = m.subset(keep)
    assert [f.figure_id for f in s.figures] == keep
    assert all(p.parent_figure in keep for p in s.panels)
    assert {r.parent_panel for r in s.regions} <= {p.panel_id for p in s.panels}
    assert len(s.regions) == sum(len(m.regions_of(p.panel_id)) for p in s.panels)
    assert validate_hierarchy(s) == []


def test_panel_caption_joins_fragments_and_description():
    p = PanelRecord("p", "f", BBox(0, 0, 1, 1), fragments=["x.", " y. "], generated_description="z")
    assert p.caption == "x. y. z"
