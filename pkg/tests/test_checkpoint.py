import numpy as np
import pytest

from casttts.backbone import BlockConfig
from casttts.checkpoint import (
    CheckpointFormatError,
    CheckpointMeta,
    load_checkpoint,
    save_checkpoint,
)
from casttts.model import TtsModel


def small_model(seed=3, fusion="CA"):
    cfg = BlockConfig(n_layers=2, n_heads=2, d_model=16, d_timbre=8,
                      n_conv_blocks=1, fusion=fusion)
    m = TtsModel(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    for _, p in m.named_parameters():
        if not p.frozen:
            p.data = rng.normal(0, 0.1, size=p.shape).astype(np.float32)
    return m


class TestRoundTrip:
    def test_load_restores_everything(self, tmp_path):
        m = small_model()
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, m, CheckpointMeta(seed=42, stage_provenance="init>stage1"))
        loaded, meta = load_checkpoint(path)
        assert meta.seed == 42
        assert meta.stage_provenance == "init>stage1"
        assert loaded.cfg == m.cfg
        orig = dict(m.named_parameters())
        for name, p in loaded.named_parameters():
            assert np.array_equal(p.data, orig[name].data), name
            assert p.frozen == orig[name].frozen

    def test_save_load_save_byte_identical(self, tmp_path):
        m = small_model()
        p1, p2 = tmp_path / "1.ckpt", tmp_path / "2.ckpt"
        meta = CheckpointMeta(seed=7, stage_provenance="init")
        save_checkpoint(p1, m, meta)
        loaded, meta2 = load_checkpoint(p1)
        save_checkpoint(p2, loaded, meta2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_variant_config_round_trips(self, tmp_path):
        m = small_model(fusion="CA_TV")
        path = tmp_path / "tv.ckpt"
        save_checkpoint(path, m, CheckpointMeta(seed=1, stage_provenance="init"))
        loaded, _ = load_checkpoint(path)
        assert loaded.cfg.fusion == "CA_TV"
        names = {n for n, _ in loaded.named_parameters()}
        assert "backbone.tag_speech" in names


class TestFormatErrors:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"WRONGMAG" + b"\x00" * 32)
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        m = small_model()
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, m, CheckpointMeta(seed=0, stage_provenance="init"))
        blob = bytearray(path.read_bytes())
        blob[8] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_truncation(self, tmp_path):
        m = small_model()
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, m, CheckpointMeta(seed=0, stage_provenance="init"))
        path.write_bytes(path.read_bytes()[:-20])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)


class TestDeterminism:
    def test_two_identical_models_same_bytes(self, tmp_path):
        p1, p2 = tmp_path / "1.ckpt", tmp_path / "2.ckpt"
        meta = CheckpointMeta(seed=5, stage_provenance="init")
        save_checkpoint(p1, small_model(seed=5), meta)
        save_checkpoint(p2, small_model(seed=5), meta)
        assert p1.read_bytes() == p2.read_bytes()
