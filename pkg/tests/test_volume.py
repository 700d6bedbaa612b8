import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from medsnet.volume import (AnnotationFormatError, CTVolume, NormalizedVolume, VolumeFormatError,
                            load_annotations, read_volume, write_annotations, write_volume)


def test_volume_invariants():
    with pytest.raises(ValueError):
        CTVolume(np.zeros((4, 4)), (1, 1, 1))
    with pytest.raises(ValueError):
        CTVolume(np.zeros((2, 2, 2)), (1, 0, 1))
    with pytest.raises(ValueError):
        CTVolume(np.full((2, 2, 2), np.nan), (1, 1, 1))
    with pytest.raises(ValueError):
        NormalizedVolume(np.full((2, 2, 2), 1.5), (1, 1, 1))
    with pytest.raises(ValueError):
        NormalizedVolume(np.zeros((2, 2, 2)), (2, 1, 1))


def test_world_voxel_round_trip():
    v = CTVolume(np.zeros((3, 3, 3)), (2.0, 0.5, 0.5), origin_mm=(1.0, 2.0, 3.0))
    p = np.array([1.5, 2.0, 0.25])
    np.testing.assert_allclose(v.world_to_voxel(v.voxel_to_world(p)), p)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
       st.tuples(st.floats(0.1, 5), st.floats(0.1, 5), st.floats(0.1, 5)))
def test_volume_round_trip(tmp_path_factory, seed, shape, spacing):
    path = tmp_path_factory.mktemp("v") / "scan"
    vox = np.random.default_rng(seed).integers(-32768, 32767, size=shape, dtype=np.int16)
    write_volume(CTVolume(vox, spacing, "id-1"), path)
    back = read_volume(path)
    assert back.voxels.dtype == np.int16
    np.testing.assert_array_equal(back.voxels, vox)
    assert back.spacing_mm == tuple(float(s) for s in spacing)
    assert back.scan_id == "id-1"


def test_truncated_voxel_file(tmp_path):
    raw, _ = write_volume(CTVolume(np.zeros((2, 3, 4), np.int16), (1, 1, 1), "a"), tmp_path / "a")
    raw.write_bytes(raw.read_bytes()[:-2])
    with pytest.raises(VolumeFormatError, match="size mismatch"):
        read_volume(tmp_path / "a")


def test_sidecar_faults(tmp_path):
    _, side = write_volume(CTVolume(np.zeros((2, 3, 4), np.int16), (1, 1, 1), "a"), tmp_path / "a")
    meta = json.loads(side.read_text())
    meta["shape"] = [2, 3, 5]
    side.write_text(json.dumps(meta))
    with pytest.raises(VolumeFormatError, match="size mismatch"):
        read_volume(tmp_path / "a")
    side.write_text("{not json")
    with pytest.raises(VolumeFormatError, match=str(side.name)):
        read_volume(tmp_path / "a")
    side.unlink()
    with pytest.raises(VolumeFormatError, match="missing"):
        read_volume(tmp_path / "a")


def test_write_rejects_out_of_range(tmp_path):
    with pytest.raises(VolumeFormatError):
        write_volume(CTVolume(np.full((1, 1, 1), 40000.0), (1, 1, 1)), tmp_path / "x")


def _annotation_file(tmp_path, rows, header="scan_id,center_x_mm,center_y_mm,center_z_mm,diameter_mm"):
    p = tmp_path / "ann.csv"
    p.write_text(header + "\n" + "".join(r + "\n" for r in rows))
    return p


def test_load_annotations_well_formed(tmp_path):
    p = _annotation_file(tmp_path, ["a,1,2,3,4.5", "b,0,0,0,10"])
    anns = load_annotations(p)
    assert len(anns) == 2
    assert anns[0].center_zyx_mm.tolist() == [3.0, 2.0, 1.0]


def test_small_nodules_excluded(tmp_path, caplog):
    p = _annotation_file(tmp_path, ["a,1,2,3,2.0", "a,1,2,3,3.0"])
    with caplog.at_level(logging.WARNING):
        anns = load_annotations(p)
    assert [a.diameter_mm for a in anns] == [3.0]
    assert "excluded" in caplog.text


def test_annotation_errors(tmp_path):
    with pytest.raises(AnnotationFormatError, match="diameter_mm"):
        load_annotations(_annotation_file(tmp_path, ["a,1,2,3"], "scan_id,center_x_mm,center_y_mm,center_z_mm"))
    with pytest.raises(AnnotationFormatError, match=":3"):
        load_annotations(_annotation_file(tmp_path, ["a,1,2,3,4", "b,1,x,3,4"]))


def test_annotation_round_trip(tmp_path):
    p = _annotation_file(tmp_path, ["a,1.5,2.25,3,4.5"])
    anns = load_annotations(p)
    assert load_annotations(write_annotations(anns, tmp_path / "b.csv")) == anns
