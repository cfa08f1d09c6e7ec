import hashlib
import struct

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from slseg.data import (
    SyntheticTaskSpec,
    generate_dataset,
    load_dataset,
    read_label_map,
    read_pgm,
    save_dataset,
    stack_samples,
    write_label_map,
    write_pgm,
)
from slseg.errors import FormatError, VersionError
from slseg.net import NetConfig, StochasticSegNet, load_checkpoint, save_checkpoint
from slseg.training import TrainConfig, train_stage1
from slseg.uncertainty import mc_predict

tmp_settings = settings(max_examples=100, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])


class TestPGM:
    def test_small_round_trip(self, tmp_path):
        arr = np.array([[0, 85], [170, 255]], dtype=np.uint8)
        write_pgm(tmp_path / "a.pgm", arr)
        np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), arr)
        assert (tmp_path / "a.pgm").read_bytes() == b"P5\n2 2\n255\n\x00\x55\xaa\xff"

    def test_ascii_variant_unsupported(self, tmp_path):
        (tmp_path / "a.pgm").write_bytes(b"P2\n2 1\n255\n0 255\n")
        with pytest.raises(FormatError, match="unsupported"):
            read_pgm(tmp_path / "a.pgm")

    def test_truncated_payload_offset(self, tmp_path):
        (tmp_path / "a.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes(10))
        with pytest.raises(FormatError) as err:
            read_pgm(tmp_path / "a.pgm")
        assert err.value.offset == 21

    @pytest.mark.parametrize("raw,offset", [
        (b"P5\n4 x\n255\n", 5),
        (b"P5\n1 1\n65535\n\x00\x00", 7),
        (b"XY\n1 1\n255\n\x00", 0),
        (b"P5\n1 1\n255", 10),
    ])
    def test_malformed_headers(self, tmp_path, raw, offset):
        (tmp_path / "a.pgm").write_bytes(raw)
        with pytest.raises(FormatError) as err:
            read_pgm(tmp_path / "a.pgm")
        assert err.value.offset == offset

    def test_header_comments(self, tmp_path):
        (tmp_path / "a.pgm").write_bytes(b"P5 # made by hand\n2 1\n# max\n255\n\x01\x02")
        np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), [[1, 2]])

    def test_random_image_byte_identical(self, tmp_path):
        arr = np.random.default_rng(0).integers(0, 256, size=(64, 64), dtype=np.uint8)
        write_pgm(tmp_path / "a.pgm", arr)
        first = hashlib.sha256((tmp_path / "a.pgm").read_bytes()).hexdigest()
        write_pgm(tmp_path / "b.pgm", read_pgm(tmp_path / "a.pgm"))
        assert hashlib.sha256((tmp_path / "b.pgm").read_bytes()).hexdigest() == first

    @tmp_settings
    @given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2 ** 32 - 1))
    def test_round_trip_property(self, tmp_path, h, w, seed):
        arr = np.random.default_rng(seed).integers(0, 256, size=(h, w), dtype=np.uint8)
        write_pgm(tmp_path / "p.pgm", arr)
        raw = (tmp_path / "p.pgm").read_bytes()
        back = read_pgm(tmp_path / "p.pgm")
        np.testing.assert_array_equal(back, arr)
        write_pgm(tmp_path / "q.pgm", back)
        assert (tmp_path / "q.pgm").read_bytes() == raw

    def test_label_map(self, tmp_path):
        labels = np.array([[0, 1, 2], [255, 1, 0]])
        write_label_map(tmp_path / "l.pgm", labels)
        np.testing.assert_array_equal(read_label_map(tmp_path / "l.pgm"), labels)


net_configs = st.builds(
    dict,
    widths=st.lists(st.integers(1, 4), min_size=1, max_size=3).map(tuple),
    num_classes=st.integers(2, 4),
    bank_size=st.integers(1, 3),
    bank_level=st.sampled_from(["block", "conv"]),
    convs_per_block=st.integers(1, 2),
    bank_blocks=st.sampled_from(["encdec", "all", "none"]),
    norm=st.sampled_from(["group", "none"]),
    seed=st.integers(0, 1000),
)


class TestCheckpoint:
    @tmp_settings
    @given(net_configs, st.integers(0, 2 ** 32 - 1))
    def test_round_trip_property(self, tmp_path, cfg, seed):
        net = StochasticSegNet(NetConfig(**cfg))
        rng = np.random.default_rng(seed)
        for p in net.parameters():
            p.data[...] = rng.standard_normal(p.shape).astype(np.float32)
        save_checkpoint(net, tmp_path / "n.slsn", meta={"step": 3})
        raw = (tmp_path / "n.slsn").read_bytes()
        back, meta = load_checkpoint(tmp_path / "n.slsn")
        assert meta["step"] == 3
        assert back.descriptor() == net.descriptor()
        for p, q in zip(net.parameters(), back.parameters()):
            assert p.data.tobytes() == q.data.tobytes()
        save_checkpoint(back, tmp_path / "m.slsn", meta={"step": 3})
        assert (tmp_path / "m.slsn").read_bytes() == raw

    def test_header_layout(self, tmp_path):
        net = StochasticSegNet(NetConfig(widths=(2,)))
        save_checkpoint(net, tmp_path / "n.slsn")
        raw = (tmp_path / "n.slsn").read_bytes()
        assert raw[:4] == b"SLSN"
        version, n = struct.unpack_from("<HI", raw, 4)
        assert version == 1
        n_params = sum(p.size for p in net.parameters())
        assert len(raw) == 10 + n + 4 * n_params
        first = net.parameters()[0].data.reshape(-1)[0]
        assert struct.unpack_from("<f", raw, 10 + n)[0] == first

    def test_version_mismatch(self, tmp_path):
        net = StochasticSegNet(NetConfig(widths=(2,)))
        save_checkpoint(net, tmp_path / "n.slsn")
        raw = bytearray((tmp_path / "n.slsn").read_bytes())
        raw[4:6] = struct.pack("<H", 9)
        (tmp_path / "n.slsn").write_bytes(bytes(raw))
        with pytest.raises(VersionError):
            load_checkpoint(tmp_path / "n.slsn")

    @pytest.mark.parametrize("cut", [2, 8, 30, -3])
    def test_truncation(self, tmp_path, cut):
        net = StochasticSegNet(NetConfig(widths=(2,)))
        save_checkpoint(net, tmp_path / "n.slsn")
        raw = (tmp_path / "n.slsn").read_bytes()
        (tmp_path / "n.slsn").write_bytes(raw[:cut])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "n.slsn")

    def test_stage_flag_persisted(self, tmp_path):
        net = StochasticSegNet(NetConfig(widths=(2,)))
        net.trained_stage1 = True
        save_checkpoint(net, tmp_path / "n.slsn")
        assert load_checkpoint(tmp_path / "n.slsn")[0].trained_stage1


class TestGenerator:
    def test_deterministic(self):
        spec = SyntheticTaskSpec(band_width=3, seed=5)
        a, b = generate_dataset(spec, 4), generate_dataset(spec, 4)
        for s, t in zip(a, b):
            assert s.image.tobytes() == t.image.tobytes()
            assert s.labels.tobytes() == t.labels.tobytes()
            assert s.ambiguity.tobytes() == t.ambiguity.tobytes()

    def test_each_sample_has_two_classes(self):
        for s in generate_dataset(SyntheticTaskSpec(class_count=4, seed=2), 30):
            assert len(np.unique(s.labels)) >= 2
            assert s.labels.max() < 4
            assert np.isfinite(s.image).all() and s.image.min() >= 0 and s.image.max() <= 1

    def test_band_mask_size(self):
        spec = SyntheticTaskSpec(height=64, width=64, band_width=8, seed=1)
        for s in generate_dataset(spec, 3):
            assert s.ambiguity.sum() >= 8 * 64

    def test_band_wider_than_image(self):
        with pytest.raises(ValueError):
            SyntheticTaskSpec(width=8, band_width=9)

    def test_rejects_bad_spec(self):
        with pytest.raises(ValueError):
            SyntheticTaskSpec(class_count=1)
        with pytest.raises(ValueError):
            SyntheticTaskSpec(noise=-0.1)
        with pytest.raises(ValueError):
            generate_dataset(SyntheticTaskSpec(), 0)

    def test_noiseless_task_is_learnable(self):
        X, Y, _ = stack_samples(generate_dataset(SyntheticTaskSpec(height=16, width=16, noise=0.0, seed=1), 32))
        net = StochasticSegNet(NetConfig(widths=(8, 16), bank_size=1, seed=0))
        train_stage1(net, X, Y, TrainConfig(stage1_steps=300, stage2_steps=0))
        mean, _ = mc_predict(net, X, 1, 0)
        assert (mean.argmax(1) == Y).mean() > 0.99

    def test_dataset_directory_round_trip(self, tmp_path):
        samples = generate_dataset(SyntheticTaskSpec(height=8, width=8, band_width=2, seed=3), 3)
        save_dataset(tmp_path, samples, 3)
        assert (tmp_path / "manifest.txt").read_text() == "0 8 8 3\n1 8 8 3\n2 8 8 3\n"
        back, classes = load_dataset(tmp_path)
        assert classes == 3
        for s, t in zip(samples, back):
            np.testing.assert_array_equal(s.labels, t.labels)
            np.testing.assert_array_equal(s.ambiguity, t.ambiguity)
            assert np.abs(s.image - t.image).max() <= 0.5 / 255 + 1e-12
