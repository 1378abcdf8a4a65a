import numpy as np
import pytest

from fsad.featfile import (Manifest, ManifestEntry, load_manifest,
                           read_feature_file, save_manifest,
                           write_feature_file)
from fsad.features import FeatureMap


def test_feature_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    m = FeatureMap.from_array(rng.standard_normal((3, 4, 5)))
    path = tmp_path / "f.carg"
    write_feature_file(path, m)
    back = read_feature_file(path)
    assert back.shape == (3, 4, 5)
    assert np.array_equal(back.data, m.data.astype(np.float32))


def test_feature_file_header_layout(tmp_path):
    path = tmp_path / "f.carg"
    write_feature_file(path, FeatureMap.from_array(np.zeros((2, 1, 3))))
    raw = path.read_bytes()
    assert raw[:4] == b"CARG"
    assert raw[4] == 1
    assert raw[5:8] == b"\x00\x00\x00"
    assert np.frombuffer(raw[8:20], dtype="<u4").tolist() == [2, 1, 3]
    assert len(raw) == 20 + 4 * 6


def test_bad_magic_names_file(tmp_path):
    path = tmp_path / "broken.carg"
    write_feature_file(path, FeatureMap.from_array(np.zeros((1, 1, 1))))
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="broken.carg.*magic"):
        read_feature_file(path)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "short.carg"
    write_feature_file(path, FeatureMap.from_array(np.zeros((1, 2, 2))))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ValueError, match="short.carg"):
        read_feature_file(path)


def test_unsupported_version_rejected(tmp_path):
    path = tmp_path / "v9.carg"
    write_feature_file(path, FeatureMap.from_array(np.zeros((1, 1, 1))))
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="version"):
        read_feature_file(path)


def _manifest(tmp_path, rows):
    entries = [ManifestEntry(**r) for r in rows]
    path = tmp_path / "manifest.json"
    save_manifest(path, Manifest(entries=entries, root=tmp_path))
    return path


def test_manifest_round_trip(tmp_path):
    path = _manifest(tmp_path, [
        dict(image_id="a", role="support", label=0, scale_files=["a.carg"]),
        dict(image_id="a", role="support", label=0, augmentation_id="flip",
             scale_files=["a_flip.carg"]),
        dict(image_id="t", role="test", label=1, scale_files=["t.carg"],
             pixel_mask_file="mask_t.png",
             thetas=[[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]]),
    ])
    man = load_manifest(path)
    assert [e.image_id for e in man.support()] == ["a", "a"]
    assert [e.image_id for e in man.support({"identity"})] == ["a"]
    assert [e.image_id for e in man.test()] == ["t"]
    assert man.test()[0].thetas == [[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]]
    assert man.test()[0].pixel_mask_file == "mask_t.png"


def test_manifest_augmentation_ids_deduped_in_order(tmp_path):
    path = _manifest(tmp_path, [
        dict(image_id="a", role="support", label=0, scale_files=["a"]),
        dict(image_id="a", role="support", label=0, augmentation_id="rot",
             scale_files=["b"]),
        dict(image_id="a", role="support", label=0, augmentation_id="blur",
             scale_files=["c"]),
        dict(image_id="b", role="support", label=0, augmentation_id="rot",
             scale_files=["d"]),
    ])
    assert load_manifest(path).augmentation_ids() == ["rot", "blur"]


def test_manifest_errors_carry_row_context(tmp_path):
    path = tmp_path / "manifest.json"
    path.write_text('{"images": [{"image_id": "x", "role": "weird", '
                    '"label": 0, "scale_files": ["x.carg"]}]}')
    with pytest.raises(ValueError, match=r"images\[0\].*role"):
        load_manifest(path)

    path.write_text('{"images": [{"image_id": "x", "role": "test", '
                    '"label": 3, "scale_files": ["x.carg"]}]}')
    with pytest.raises(ValueError, match=r"images\[0\].*label"):
        load_manifest(path)

    path.write_text('{"images": [{"role": "test", "label": 0, '
                    '"scale_files": ["x.carg"]}]}')
    with pytest.raises(ValueError, match="image_id"):
        load_manifest(path)


def test_manifest_rejects_invalid_json(tmp_path):
    path = tmp_path / "manifest.json"
    path.write_text("{not json")
    with pytest.raises(ValueError, match="invalid JSON"):
        load_manifest(path)


def test_manifest_resolves_and_loads_features(tmp_path):
    m = FeatureMap.from_array(np.ones((1, 2, 2)))
    write_feature_file(tmp_path / "a.carg", m)
    path = _manifest(tmp_path, [
        dict(image_id="a", role="support", label=0, scale_files=["a.carg"]),
    ])
    man = load_manifest(path)
    maps = man.load_entry_features(man.entries[0])
    assert len(maps) == 1 and maps[0].shape == (1, 2, 2)
