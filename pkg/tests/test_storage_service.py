"""
测试文件存储服务
"""
import numpy as np
import pandas as pd
import pytest

from ivuq.config import ExperimentConfig
from ivuq.exceptions import FileFormatException, InvalidArgumentException, StorageException
from ivuq.schemas.common import Provenance
from ivuq.schemas.network import BASELINE_TAG, HeadSpec
from ivuq.schemas.prediction import MixtureSidecar, PredictionMap
from ivuq.services.neuralnet import init_network
from ivuq.services.storage_service import (
    DATASET_MAGIC,
    PREDICTION_MAGIC,
    TRAILER_SIZE,
    storage_service,
)
from ivuq.services.synthdata import generate_phantom, sample_training_set

PROV = Provenance(config_hash="ab" * 32, seed=77)


class TestBinaryFiles:
    """测试二进制格式读写"""

    def test_dataset(self, tmp_path):
        data = sample_training_set(50, seed=1)
        path = storage_service.write_dataset(tmp_path / "train.ivuqds", data, PROV)
        loaded = storage_service.read_dataset(path)
        np.testing.assert_allclose(loaded.inputs, data.inputs, rtol=1e-6)
        np.testing.assert_allclose(loaded.labels, data.labels, rtol=1e-6)
        assert loaded.schedule == data.schedule
        assert storage_service.read_provenance(path, DATASET_MAGIC) == PROV

    def test_phantom(self, tmp_path):
        phantom = generate_phantom(50.0, seed=2, size=24)
        path = storage_service.write_phantom(tmp_path / "p.ivuqph", phantom)
        loaded = storage_service.read_phantom(path)
        np.testing.assert_array_equal(loaded.roi_label, phantom.roi_label)
        np.testing.assert_allclose(loaded.signals, phantom.signals, rtol=1e-6)
        assert np.all(np.isnan(loaded.truth[~loaded.foreground]))
        assert loaded.snr == 50.0

    def test_model_keeps_float64_parameters(self, tmp_path):
        net = init_network([14, 8, 8, 27], seed=5, head=HeadSpec.mdn(3))
        path = storage_service.write_model(tmp_path / "m.ivuqnn", net, PROV)
        loaded = storage_service.read_model(path, seed=5)
        np.testing.assert_array_equal(loaded.flat_parameters(), net.flat_parameters())
        assert loaded.head == HeadSpec.mdn(3)

    def test_model_without_head_rejected(self, tmp_path):
        net = init_network([14, 8, 8, 3], seed=5)
        net.head = None
        with pytest.raises(InvalidArgumentException):
            storage_service.write_model(tmp_path / "m.ivuqnn", net)

    def test_prediction(self, tmp_path, rng):
        dims = (3, 2, 2)
        maps = rng.random(dims + (3,))
        maps[0, 0, 0] = np.nan
        pred = PredictionMap(kind_tag=BASELINE_TAG, dims=dims, map_estimate=maps,
                             au=np.full(dims + (3,), np.nan), eu=np.full(dims + (3,), np.nan))
        path = storage_service.write_prediction(tmp_path / "x.ivuqpr", pred, PROV)
        loaded = storage_service.read_prediction(path)
        assert loaded.kind_tag == BASELINE_TAG
        assert loaded.dims == dims
        np.testing.assert_array_equal(loaded.valid, pred.valid)
        np.testing.assert_allclose(loaded.map_estimate[pred.valid], maps[pred.valid], rtol=1e-6)

    def test_truncated_file(self, tmp_path):
        path = storage_service.write_dataset(tmp_path / "t.ivuqds", sample_training_set(20, seed=1), PROV)
        data = path.read_bytes()
        path.write_bytes(data[:len(data) - TRAILER_SIZE - 40])
        with pytest.raises(FileFormatException):
            storage_service.read_dataset(path)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bogus.ivuqpr"
        path.write_bytes(b"NOTAFILE" + bytes(64))
        with pytest.raises(FileFormatException) as exc:
            storage_service.read_prediction(path)
        assert exc.value.details["expected"] == PREDICTION_MAGIC.decode()

    def test_missing_file(self, tmp_path):
        with pytest.raises(StorageException):
            storage_service.read_phantom(tmp_path / "absent.ivuqph")


class TestEnsembleFiles:
    """测试集成清单"""

    def test_round_trip(self, tmp_path, tiny_mdn_ensemble):
        manifest = storage_service.write_ensemble(tmp_path, tiny_mdn_ensemble, PROV)
        assert manifest.name == "ensemble.json"
        loaded = storage_service.read_ensemble(tmp_path)
        assert loaded.size == tiny_mdn_ensemble.size
        assert loaded.member_seeds == tiny_mdn_ensemble.member_seeds
        assert loaded.head == tiny_mdn_ensemble.head
        for a, b in zip(loaded.members, tiny_mdn_ensemble.members):
            np.testing.assert_array_equal(a.flat_parameters(), b.flat_parameters())

    def test_broken_manifest(self, tmp_path):
        (tmp_path / "ensemble.json").write_text("{\"head\": 3}", encoding="utf-8")
        with pytest.raises(FileFormatException):
            storage_service.read_ensemble(tmp_path)


class TestSidecars:
    """测试混合分布与样本附属文件"""

    def _sidecar(self, rng, ranges) -> MixtureSidecar:
        w = rng.random((2, 4, 3, 2))
        return MixtureSidecar(
            voxel_index=np.array([0, 2, 5, 7]),
            weights=w / w.sum(axis=-1, keepdims=True),
            means=rng.random((2, 4, 3, 2)),
            stds=0.1 * rng.random((2, 4, 3, 2)) + 0.01,
            lower=ranges.lower,
            upper=ranges.upper,
        )

    def test_mixtures(self, tmp_path, rng, ranges):
        sidecar = self._sidecar(rng, ranges)
        path = storage_service.write_mixtures(tmp_path / "x.npz", sidecar, PROV)
        loaded = storage_service.read_mixtures(path)
        assert loaded.m == 2
        np.testing.assert_array_equal(loaded.voxel_index, sidecar.voxel_index)
        np.testing.assert_allclose(loaded.member(1).weights.sum(axis=-1), 1.0, atol=1e-12)

    def test_mixtures_are_byte_reproducible(self, tmp_path, rng, ranges):
        sidecar = self._sidecar(rng, ranges)
        a = storage_service.write_mixtures(tmp_path / "a.npz", sidecar, PROV)
        b = storage_service.write_mixtures(tmp_path / "b.npz", sidecar, PROV)
        assert a.read_bytes() == b.read_bytes()

    def test_corrupt_mixtures(self, tmp_path):
        path = tmp_path / "bad.npz"
        path.write_bytes(b"not a zip")
        with pytest.raises(FileFormatException):
            storage_service.read_mixtures(path)


class TestVolumes:
    """测试原始体数据与描述文件"""

    def test_round_trip_with_mask(self, tmp_path, rng, schedule):
        signals = rng.random((4, 3, 2, len(schedule)))
        mask = rng.random((4, 3, 2)) > 0.5
        raw = storage_service.write_volume(tmp_path / "vol.raw", signals, schedule.values, mask)
        volume = storage_service.read_volume(raw)
        assert volume.dims == (4, 3, 2)
        np.testing.assert_allclose(volume.signals, signals, rtol=1e-6)
        np.testing.assert_array_equal(volume.mask, mask)

    def test_big_endian(self, tmp_path, rng, short_schedule):
        signals = rng.random((2, 2, 1, len(short_schedule)))
        raw = storage_service.write_volume(tmp_path / "be.raw", signals, short_schedule.values, endianness="big")
        np.testing.assert_allclose(storage_service.read_volume(raw).signals, signals, rtol=1e-6)

    def test_size_mismatch(self, tmp_path, rng, short_schedule):
        raw = storage_service.write_volume(tmp_path / "v.raw", rng.random((2, 2, 1, 6)), short_schedule.values)
        raw.write_bytes(raw.read_bytes()[:-4])
        with pytest.raises(FileFormatException):
            storage_service.read_volume(raw)

    def test_missing_sidecar(self, tmp_path):
        raw = tmp_path / "lonely.raw"
        raw.write_bytes(bytes(16))
        with pytest.raises(StorageException):
            storage_service.read_volume(raw)

    def test_read_mask(self, tmp_path):
        path = tmp_path / "roi.mask"
        path.write_bytes(bytes([0, 1, 2, 0, 0, 255]))
        mask = storage_service.read_mask(path, (1, 2, 3))
        np.testing.assert_array_equal(mask.reshape(-1), [False, True, True, False, False, True])
        with pytest.raises(FileFormatException):
            storage_service.read_mask(path, (2, 2, 2))
        with pytest.raises(StorageException):
            storage_service.read_mask(tmp_path / "absent.mask", (1, 2, 3))


class TestTables:
    """测试 CSV 与配置文件"""

    def test_csv_header(self, tmp_path):
        path = storage_service.write_csv(tmp_path / "t.csv", pd.DataFrame({"a": [1.5, 2.0]}), PROV)
        first = path.read_text(encoding="utf-8").splitlines()[0]
        assert first == f"# config_hash={PROV.config_hash} seed=77"
        assert storage_service.read_csv(path)["a"].tolist() == [1.5, 2.0]

    def test_config_written_next_to_outputs(self, tmp_path):
        cfg = ExperimentConfig(seed=9)
        path = storage_service.write_config(tmp_path, cfg)
        assert path.name == "config.env"
        assert ExperimentConfig.load(path).config_hash == cfg.config_hash
