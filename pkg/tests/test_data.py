"""Dataset format round-trips, validation bands, and generator properties."""

import hashlib
import io

import numpy as np
import pytest

from fvge.data import (
    ClassBank,
    Dataset,
    SampleRecord,
    SplitManifest,
    read_block,
    read_dataset,
    sample_shots,
    synth_generate,
    write_block,
    write_dataset,
)
from fvge.errors import ConfigError, FormatError, ValidationError


def _dir_checksums(path):
    return {
        p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(path.iterdir())
    }


def _nearest_prototype_accuracy(feats, labels, prototypes):
    """Brute-force 1-NN-against-prototypes oracle."""
    hits = 0
    for f, label in zip(feats, labels):
        sims = [float(f @ p) for p in prototypes]
        if max(range(len(sims)), key=sims.__getitem__) == label:
            hits += 1
    return hits / len(labels)


class TestBlockFormat:
    def test_header_layout(self):
        buf = io.BytesIO()
        write_block(buf, np.arange(6, dtype=np.float32).reshape(2, 3), "<f4")
        raw = buf.getvalue()
        assert raw[:4] == b"FVGE"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert int.from_bytes(raw[8:12], "little") == 2
        assert int.from_bytes(raw[12:16], "little") == 3
        assert len(raw) == 16 + 6 * 4

    def test_roundtrip(self):
        rng = np.random.default_rng(50)
        arr = rng.normal(size=(5, 7)).astype(np.float32)
        buf = io.BytesIO()
        write_block(buf, arr, "<f4")
        buf.seek(0)
        out = read_block(buf, "<f4")
        np.testing.assert_array_equal(out, arr)

    def test_bad_magic(self):
        buf = io.BytesIO(b"NOPE" + b"\x00" * 12)
        with pytest.raises(FormatError):
            read_block(buf, "<f4")

    def test_truncated(self):
        buf = io.BytesIO()
        write_block(buf, np.ones((4, 4), dtype=np.float32), "<f4")
        raw = buf.getvalue()[:-8]
        with pytest.raises(FormatError):
            read_block(io.BytesIO(raw), "<f4")


def _toy_dataset(n_per_class=3, classes=4, dim=8, seed=51, with_prior=False):
    rng = np.random.default_rng(seed)
    protos = rng.normal(size=(classes, dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    prior = rng.normal(size=(classes, dim))
    prior /= np.linalg.norm(prior, axis=1, keepdims=True)
    records = []
    for c in range(classes):
        for k in range(n_per_class):
            full = rng.normal(size=dim)
            fg = rng.normal(size=dim)
            records.append(
                SampleRecord(
                    id=f"r{c}-{k}",
                    label=c,
                    feat_full=full / np.linalg.norm(full),
                    feat_fg=fg / np.linalg.norm(fg),
                    area_ratio=float(rng.uniform(0, 1)),
                    z_clip=rng.normal(size=classes) if with_prior else None,
                    role="train" if k % 2 == 0 else "eval",
                )
            )
    banks = ClassBank(names=[f"c{c}" for c in range(classes)], feats_backbone=protos, feats_prior=prior)
    split = SplitManifest(base_classes=list(range(classes // 2)), new_classes=list(range(classes // 2, classes)), shots=2)
    return records, banks, split


class TestDatasetRoundtrip:
    def test_empty_dataset(self, tmp_path):
        _, banks, split = _toy_dataset()
        write_dataset([], banks, split, tmp_path / "d")
        ds = read_dataset(tmp_path / "d")
        assert ds.records == []
        assert ds.class_count == 4

    def test_single_record_bytes(self, tmp_path):
        records, banks, split = _toy_dataset(n_per_class=1, classes=2)
        write_dataset(records, banks, split, tmp_path / "a")
        ds = read_dataset(tmp_path / "a")
        write_dataset(ds.records, ds.banks, ds.split, tmp_path / "b")
        a = (tmp_path / "a" / "feat_full.bin").read_bytes()
        b = (tmp_path / "b" / "feat_full.bin").read_bytes()
        assert a == b

    def test_thousand_record_checksums(self, tmp_path):
        ds = synth_generate(seed=52, classes=5, dim=16, shots=100, fg_advantage=0.5, noise=0.1)
        assert len(ds.records) == 1000
        write_dataset(ds.records, ds.banks, ds.split, tmp_path / "a")
        back = read_dataset(tmp_path / "a")
        write_dataset(back.records, back.banks, back.split, tmp_path / "b")
        assert _dir_checksums(tmp_path / "a") == _dir_checksums(tmp_path / "b")

    def test_prior_logits_roundtrip(self, tmp_path):
        records, banks, split = _toy_dataset(with_prior=True)
        write_dataset(records, banks, split, tmp_path / "d")
        ds = read_dataset(tmp_path / "d")
        assert ds.records[0].z_clip is not None
        np.testing.assert_allclose(
            ds.records[0].z_clip, records[0].z_clip.astype(np.float32), atol=0
        )

    def test_fields_survive(self, tmp_path):
        records, banks, split = _toy_dataset()
        write_dataset(records, banks, split, tmp_path / "d")
        ds = read_dataset(tmp_path / "d")
        assert [r.id for r in ds.records] == [r.id for r in records]
        assert [r.label for r in ds.records] == [r.label for r in records]
        assert [r.role for r in ds.records] == [r.role for r in records]
        assert ds.split.base_classes == split.base_classes
        assert ds.split.new_classes == split.new_classes
        assert ds.split.shots == split.shots
        np.testing.assert_allclose(
            ds.records[3].area_ratio, np.float32(records[3].area_ratio), atol=0
        )


class TestValidation:
    def test_non_unit_feature_rejected_on_write(self, tmp_path):
        records, banks, split = _toy_dataset()
        records[2].feat_full = records[2].feat_full * 1.01
        with pytest.raises(ValidationError, match="r0-2"):
            write_dataset(records, banks, split, tmp_path / "d")

    def test_overlapping_split_rejected(self, tmp_path):
        records, banks, split = _toy_dataset()
        split.new_classes.append(split.base_classes[0])
        with pytest.raises(ValidationError):
            write_dataset(records, banks, split, tmp_path / "d")

    def test_mixed_prior_presence_rejected(self, tmp_path):
        records, banks, split = _toy_dataset(with_prior=True)
        records[0].z_clip = None
        with pytest.raises(ValidationError):
            write_dataset(records, banks, split, tmp_path / "d")

    def test_dimension_mismatch_on_read(self, tmp_path):
        records, banks, split = _toy_dataset()
        write_dataset(records, banks, split, tmp_path / "d")
        manifest = (tmp_path / "d" / "manifest.txt").read_text()
        (tmp_path / "d" / "manifest.txt").write_text(manifest.replace("dim: 8", "dim: 9"))
        with pytest.raises(FormatError):
            read_dataset(tmp_path / "d")

    def test_warn_band_renormalizes(self, tmp_path, caplog):
        records, banks, split = _toy_dataset()
        write_dataset(records, banks, split, tmp_path / "d")
        # corrupt one stored row into the warn band (5e-4 off unit)
        import fvge.data as data_mod

        with open(tmp_path / "d" / "feat_full.bin", "r+b") as f:
            arr = data_mod.read_block(f, "<f4")
            arr[0] *= 1.0005
            f.seek(0)
            data_mod.write_block(f, arr, "<f4")
        with caplog.at_level("WARNING", logger="fvge.data"):
            ds = read_dataset(tmp_path / "d")
        assert any("renormalizing" in m for m in caplog.messages)
        assert abs(np.linalg.norm(ds.records[0].feat_full) - 1.0) < 1e-9

    def test_reject_band(self, tmp_path):
        records, banks, split = _toy_dataset()
        write_dataset(records, banks, split, tmp_path / "d")
        import fvge.data as data_mod

        with open(tmp_path / "d" / "feat_full.bin", "r+b") as f:
            arr = data_mod.read_block(f, "<f4")
            arr[0] *= 1.01
            f.seek(0)
            data_mod.write_block(f, arr, "<f4")
        with pytest.raises(ValidationError):
            read_dataset(tmp_path / "d")

    def test_clean_read_emits_no_warnings(self, tmp_path, caplog):
        ds = synth_generate(seed=53, classes=4, dim=16, shots=4, fg_advantage=0.5, noise=0.1)
        write_dataset(ds.records, ds.banks, ds.split, tmp_path / "d")
        with caplog.at_level("WARNING", logger="fvge.data"):
            read_dataset(tmp_path / "d")
        assert caplog.messages == []


class TestSynthGenerator:
    def test_deterministic(self, tmp_path):
        a = synth_generate(seed=7, classes=4, dim=16, shots=4, fg_advantage=0.8, noise=0.1)
        b = synth_generate(seed=7, classes=4, dim=16, shots=4, fg_advantage=0.8, noise=0.1)
        write_dataset(a.records, a.banks, a.split, tmp_path / "a")
        write_dataset(b.records, b.banks, b.split, tmp_path / "b")
        assert _dir_checksums(tmp_path / "a") == _dir_checksums(tmp_path / "b")

    def test_seed_changes_output(self):
        a = synth_generate(seed=1, classes=4, dim=16, shots=4, fg_advantage=0.8, noise=0.1)
        b = synth_generate(seed=2, classes=4, dim=16, shots=4, fg_advantage=0.8, noise=0.1)
        assert not np.allclose(a.records[0].feat_full, b.records[0].feat_full)

    def test_no_advantage_makes_views_interchangeable(self):
        """At fg_advantage=0 both views draw from the same distribution."""
        ds = synth_generate(seed=54, classes=8, dim=32, shots=32, fg_advantage=0.0, noise=0.2)
        assert len(ds.records) >= 500
        protos = ds.banks.feats_backbone
        full_cos, fg_cos = [], []
        for r in ds.records:
            full_cos.append(float(r.feat_full @ protos[r.label]))
            fg_cos.append(float(r.feat_fg @ protos[r.label]))
        assert abs(np.mean(full_cos) - np.mean(fg_cos)) < 0.05

    def test_foreground_advantage_in_nearest_prototype_accuracy(self):
        """Foreground 1-NN beats full-image 1-NN by >= 10 points at 0.8."""
        ds = synth_generate(seed=55, classes=8, dim=64, shots=16, fg_advantage=0.8, noise=0.1)
        protos = ds.banks.feats_backbone
        labels = [r.label for r in ds.records]
        acc_fg = _nearest_prototype_accuracy([r.feat_fg for r in ds.records], labels, protos)
        acc_full = _nearest_prototype_accuracy([r.feat_full for r in ds.records], labels, protos)
        assert acc_fg - acc_full >= 0.10

    def test_roles_and_split(self):
        ds = synth_generate(seed=56, classes=8, dim=16, shots=16, fg_advantage=0.8, noise=0.1)
        assert len(ds.records) == 8 * 32
        assert len(ds.train_records()) == 8 * 16
        assert len(ds.eval_records()) == 8 * 16
        assert ds.split.base_classes == [0, 1, 2, 3]
        assert ds.split.new_classes == [4, 5, 6, 7]
        assert not set(ds.split.base_classes) & set(ds.split.new_classes)

    def test_area_ratios_in_range(self):
        ds = synth_generate(seed=57, classes=4, dim=16, shots=8, fg_advantage=0.5, noise=0.1)
        for r in ds.records:
            assert 0.1 <= r.area_ratio <= 0.9

    def test_parameter_validation(self):
        with pytest.raises(ConfigError):
            synth_generate(seed=0, classes=1, dim=16, shots=4, fg_advantage=0.5, noise=0.1)
        with pytest.raises(ConfigError):
            synth_generate(seed=0, classes=4, dim=2, shots=4, fg_advantage=0.5, noise=0.1)
        with pytest.raises(ConfigError):
            synth_generate(seed=0, classes=4, dim=16, shots=4, fg_advantage=1.5, noise=0.1)


class TestSampleShots:
    def test_without_replacement(self):
        ds = synth_generate(seed=58, classes=4, dim=16, shots=10, fg_advantage=0.5, noise=0.1)
        rng = np.random.default_rng(0)
        picked = sample_shots(ds.train_records(), 4, rng)
        assert len(picked) == 16
        ids = [r.id for r in picked]
        assert len(set(ids)) == len(ids)
        per_class = {}
        for r in picked:
            per_class[r.label] = per_class.get(r.label, 0) + 1
        assert all(v == 4 for v in per_class.values())

    def test_keeps_all_when_scarce(self):
        ds = synth_generate(seed=59, classes=3, dim=16, shots=2, fg_advantage=0.5, noise=0.1)
        rng = np.random.default_rng(0)
        picked = sample_shots(ds.train_records(), 10, rng)
        assert len(picked) == len(ds.train_records())
