import json
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from metadm_lab import datasets, episodic
from metadm_lab.episodic import ClassId, EpisodePool
from metadm_lab.errors import ConfigError, FormatError, IntegrityError


class TestTensorArchive:
    def test_zero_dim_layout(self):
        data = datasets.write_tensor(torch.tensor(1.5))
        assert len(data) == 13
        assert data[:4] == b"MDTF" and data[4:8] == struct.pack("<I", 1) and data[8] == 0
        assert struct.unpack("<f", data[9:])[0] == 1.5

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(0, 4), min_size=0, max_size=4), st.integers(0, 2**31))
    def test_round_trip(self, shape, seed):
        t = torch.randn(shape, generator=torch.Generator().manual_seed(seed))
        data = datasets.write_tensor(t)
        assert len(data) == 9 + 4 * len(shape) + 4 * t.numel()
        back = datasets.read_tensor(data)
        assert back.shape == t.shape and torch.equal(back, t)

    def test_little_endian(self):
        data = datasets.write_tensor(torch.tensor([1.0]))
        assert data[-4:] == np.float32(1.0).astype("<f4").tobytes()

    def test_big_endian_rejected(self):
        # a writer that ignores byte order produces an implausible version field
        bad = b"MDTF" + struct.pack(">IB", 1, 1) + struct.pack(">I", 2) + struct.pack(">2f", 1, 2)
        with pytest.raises(FormatError):
            datasets.read_tensor(bad)

    @pytest.mark.parametrize("data", [b"", b"XXXX" + bytes(9), b"MDTF" + struct.pack("<IB", 1, 2)])
    def test_malformed(self, data):
        with pytest.raises(FormatError):
            datasets.read_tensor(data)

    def test_length_mismatch(self):
        data = datasets.write_tensor(torch.zeros(2, 3))
        with pytest.raises(FormatError):
            datasets.read_tensor(data[:-1])
        with pytest.raises(FormatError):
            datasets.read_tensor(data + b"\0\0\0\0")

    def test_non_finite(self):
        with pytest.raises(ValueError):
            datasets.write_tensor(torch.tensor([float("nan")]))


class TestManifest:
    def test_round_trip(self, tmp_path, small_classes):
        m = datasets.write_dataset(tmp_path, "t", small_classes)
        back = datasets.load_manifest(tmp_path / "manifest.json")
        assert back.digest == m.digest
        assert [e.split for e in back.classes] == ["train"] * 4 + ["val"] * 2 + ["test"] * 2
        for cid, imgs in small_classes:
            assert torch.equal(back.images(cid.index), imgs)

    def test_flipped_byte_names_file(self, tmp_path, small_classes):
        datasets.write_dataset(tmp_path, "t", small_classes)
        victim = tmp_path / "images" / "c003" / "0007.mdt"
        data = bytearray(victim.read_bytes())
        data[20] ^= 0x01
        victim.write_bytes(bytes(data))
        with pytest.raises(IntegrityError, match="c003/0007.mdt"):
            datasets.load_manifest(tmp_path / "manifest.json")

    def test_missing_file(self, tmp_path, small_classes):
        datasets.write_dataset(tmp_path, "t", small_classes)
        (tmp_path / "images" / "c000" / "0000.mdt").unlink()
        with pytest.raises(IntegrityError, match="c000/0000.mdt"):
            datasets.load_manifest(tmp_path / "manifest.json")

    def test_overlapping_split(self, tmp_path, small_classes):
        datasets.write_dataset(tmp_path, "t", small_classes)
        path = tmp_path / "manifest.json"
        doc = json.loads(path.read_text())
        dup = dict(doc["classes"][0], split="test")
        doc["classes"].append(dup)
        path.write_text(json.dumps(doc))
        with pytest.raises(IntegrityError, match="splits"):
            datasets.load_manifest(path)

    def test_digest_tamper(self, tmp_path, small_classes):
        datasets.write_dataset(tmp_path, "t", small_classes)
        path = tmp_path / "manifest.json"
        doc = json.loads(path.read_text())
        doc["classes"][0]["split"], doc["classes"][-1]["split"] = "test", "train"
        path.write_text(json.dumps(doc))
        with pytest.raises(IntegrityError, match="digest"):
            datasets.load_manifest(path)

    def test_unreadable(self, tmp_path):
        with pytest.raises(IntegrityError):
            datasets.load_manifest(tmp_path / "absent.json")

    @pytest.mark.parametrize("split", [(4, 2, 1), (8, 0, 0), (4, 4)])
    def test_bad_split(self, tmp_path, small_classes, split):
        with pytest.raises(ConfigError):
            datasets.write_dataset(tmp_path, "t", small_classes, split=split)

    @pytest.mark.parametrize("n, expected", [(16, (8, 4, 4)), (3, (1, 1, 1)), (12, (6, 3, 3))])
    def test_split_counts(self, n, expected):
        assert datasets.split_counts(n) == expected


@pytest.fixture(scope="module")
def default_classes():
    return datasets.synth_images(datasets.SynthSpec())


class Flatten(torch.nn.Module):
    def forward(self, x):
        return x.flatten(1)


class TestSynth:
    def test_default_size(self, default_classes):
        assert len(default_classes) == 16
        assert sum(len(imgs) for _, imgs in default_classes) == 640
        assert all(imgs.shape[1:] == (3, 32, 32) for _, imgs in default_classes)
        lo = min(imgs.min().item() for _, imgs in default_classes)
        hi = max(imgs.max().item() for _, imgs in default_classes)
        assert -1.0 <= lo and hi <= 1.0

    def test_default_split(self, tmp_path):
        spec = datasets.SynthSpec(images_per_class=2)
        m = datasets.synth_generate(spec, tmp_path)
        assert [len(m.split_classes(s)) for s in datasets.SPLITS] == [8, 4, 4]

    def test_deterministic(self):
        spec = datasets.SynthSpec(n_classes=4, images_per_class=3, seed=9)
        a, b = datasets.synth_images(spec), datasets.synth_images(spec)
        assert all(torch.equal(x, y) for (_, x), (_, y) in zip(a, b))
        other = datasets.synth_images(datasets.SynthSpec(n_classes=4, images_per_class=3, seed=10))
        assert not torch.equal(a[0][1], other[0][1])

    def test_synth_digest_stable(self, tmp_path):
        spec = datasets.SynthSpec(n_classes=4, images_per_class=3)
        assert datasets.synth_generate(spec, tmp_path / "a").digest == \
            datasets.synth_generate(spec, tmp_path / "b").digest

    def test_raw_pixel_nearest_centroid(self, default_classes):
        # 5-way 1-shot on the test classes of the default 8/3/5 split
        test = EpisodePool(dict(default_classes[11:]))
        rep = episodic.evaluate(test, Flatten(), 600, 5, 1, 15, seed=0)
        assert 0.40 < rep.mean_accuracy < 0.95

    @pytest.mark.parametrize("kw", [{"n_classes": 2}, {"images_per_class": 0}, {"image_shape": (3, 0, 8)}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            datasets.synth_images(datasets.SynthSpec(**kw))


class TestIngest:
    def _tree(self, root, n_classes=4, per_class=3, size=(20, 12)):
        from PIL import Image

        rng = np.random.default_rng(0)
        for k in range(n_classes):
            d = root / f"cls{k}"
            d.mkdir(parents=True)
            for i in range(per_class):
                arr = rng.integers(0, 256, (size[1], size[0], 3), dtype=np.uint8)
                Image.fromarray(arr).save(d / f"{i}.png")
            (d / "notes.txt").write_text("not an image")
        return root

    def test_ingest(self, tmp_path):
        src = self._tree(tmp_path / "src")
        m = datasets.ingest_folder(src, tmp_path / "out", image_size=(8, 8))
        assert m.image_shape == (3, 8, 8)
        assert [e.name for e in m.classes] == ["cls0", "cls1", "cls2", "cls3"]
        assert [e.split for e in m.classes] == ["train", "train", "val", "test"]
        imgs = m.images(0)
        assert imgs.shape == (3, 3, 8, 8) and -1.0 <= imgs.min() and imgs.max() <= 1.0
        back = datasets.load_manifest(tmp_path / "out" / "manifest.json")
        assert back.digest == m.digest

    def test_pixel_mapping(self, tmp_path):
        from PIL import Image

        for k in range(3):
            (tmp_path / "src" / f"c{k}").mkdir(parents=True)
            Image.new("RGB", (4, 4), (255, 0, 128)).save(tmp_path / "src" / f"c{k}" / "a.png")
        m = datasets.ingest_folder(tmp_path / "src", tmp_path / "out", image_size=(4, 4))
        px = m.images(0)[0, :, 0, 0]
        assert torch.allclose(px, torch.tensor([1.0, -1.0, 128 / 127.5 - 1]), atol=1e-6)

    def test_too_few_classes(self, tmp_path):
        src = self._tree(tmp_path / "src", n_classes=2)
        with pytest.raises(ConfigError):
            datasets.ingest_folder(src, tmp_path / "out")

    def test_empty_class(self, tmp_path):
        src = self._tree(tmp_path / "src")
        (src / "empty").mkdir()
        with pytest.raises(ConfigError, match="empty"):
            datasets.ingest_folder(src, tmp_path / "out")


def test_class_ids_in_order(small_classes):
    assert [c for c, _ in small_classes] == [ClassId(i) for i in range(8)]
