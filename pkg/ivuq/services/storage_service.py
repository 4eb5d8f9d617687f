"""
File storage: datasets, phantoms, models, ensemble manifests, predictions,
raw volumes and CSV tables.

Binary files are little-endian and end with a provenance trailer:
    b"IVUQPV" + u64 master seed + 32-byte config SHA-256
CSV files start with ``# config_hash=<hex> seed=<int>``.
"""
import io
import json
import struct
import zipfile
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd
from dotenv import dotenv_values
from pydantic import ValidationError

from ivuq.config import ExperimentConfig
from ivuq.exceptions import FileFormatException, InvalidArgumentException, StorageException
from ivuq.schemas.common import EnsembleManifest, Provenance, VolumeInput
from ivuq.schemas.dataset import PhantomVolume, TrainingSet
from ivuq.schemas.ivim import BValueSchedule, PriorRanges
from ivuq.schemas.network import HEAD_TAGS, HeadSpec
from ivuq.schemas.prediction import MixtureSidecar, PredictionMap
from ivuq.services.ensemble import DeepEnsemble
from ivuq.services.neuralnet import DenseNetwork
from ivuq.utils.logger import logger

PathLike = Union[str, Path]

DATASET_MAGIC = b"IVUQDS1"
PHANTOM_MAGIC = b"IVUQPH1"
MODEL_MAGIC = b"IVUQNN1"
PREDICTION_MAGIC = b"IVUQPR1"
TRAILER_MAGIC = b"IVUQPV"
TRAILER_SIZE = len(TRAILER_MAGIC) + 8 + 32

MODEL_VERSION = 1
PREDICTION_VERSION = 1

TAG_TO_KIND = {tag: kind for kind, tag in HEAD_TAGS.items()}

# Fixed zip member timestamp so .npz sidecars are byte-reproducible.
ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class _Reader:
    """Sequential little-endian reader over a file body."""

    def __init__(self, body: bytes, path: Path):
        self.body = body
        self.path = path
        self.offset = 0

    def _take(self, size: int) -> bytes:
        if self.offset + size > len(self.body):
            raise FileFormatException(
                f"文件被截断: {self.path}",
                details={"path": str(self.path), "offset": self.offset, "needed": size},
            )
        chunk = self.body[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str):
        values = struct.unpack("<" + fmt, self._take(struct.calcsize("<" + fmt)))
        return values[0] if len(values) == 1 else values

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self._take(dt.itemsize * count), dtype=dt).copy()

    def finish(self) -> None:
        if self.offset != len(self.body):
            raise FileFormatException(
                f"文件包含多余数据: {self.path}",
                details={"path": str(self.path), "extra_bytes": len(self.body) - self.offset},
            )


def _trailer(provenance: Optional[Provenance]) -> bytes:
    provenance = provenance or Provenance()
    digest = bytes.fromhex(provenance.config_hash) if provenance.config_hash else bytes(32)
    return TRAILER_MAGIC + struct.pack("<Q", provenance.seed) + digest


def _f32(values) -> bytes:
    return np.ascontiguousarray(values, dtype="<f4").tobytes()


class StorageService:
    """Local filesystem persistence for every artifact the CLI reads or writes."""

    # ---- low level ---------------------------------------------------------

    def _write_bytes(self, path: PathLike, payload: bytes, provenance: Optional[Provenance]) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "wb") as f:
                f.write(payload)
                f.write(_trailer(provenance))
        except OSError as e:
            logger.error(f"写入文件失败 {path}: {e}", exc_info=True)
            raise StorageException(f"写入文件失败: {path}", details={"path": str(path), "error": str(e)}) from e
        logger.debug(f"已写入 {path} ({len(payload)} 字节)")
        return path

    def _read_bytes(self, path: PathLike, magic: bytes) -> Tuple[_Reader, Optional[Provenance]]:
        path = Path(path)
        try:
            with open(path, "rb") as f:
                data = f.read()
        except OSError as e:
            raise StorageException(f"读取文件失败: {path}", details={"path": str(path), "error": str(e)}) from e
        if not data.startswith(magic):
            raise FileFormatException(
                f"文件标识不匹配: {path}",
                details={"path": str(path), "expected": magic.decode(), "got": data[:len(magic)].hex()},
            )
        provenance = None
        if len(data) >= len(magic) + TRAILER_SIZE and data[-TRAILER_SIZE:].startswith(TRAILER_MAGIC):
            tail = data[-TRAILER_SIZE:]
            seed = struct.unpack("<Q", tail[len(TRAILER_MAGIC):len(TRAILER_MAGIC) + 8])[0]
            digest = tail[len(TRAILER_MAGIC) + 8:]
            provenance = Provenance(config_hash=digest.hex(), seed=seed)
            data = data[:-TRAILER_SIZE]
        return _Reader(data[len(magic):], path), provenance

    def read_provenance(self, path: PathLike, magic: bytes) -> Optional[Provenance]:
        return self._read_bytes(path, magic)[1]

    # ---- training set ------------------------------------------------------

    def write_dataset(self, path: PathLike, data: TrainingSet, provenance: Optional[Provenance] = None) -> Path:
        n, n_b = data.inputs.shape
        payload = b"".join([
            DATASET_MAGIC,
            struct.pack("<II", n, n_b),
            _f32(data.schedule.as_array()),
            _f32(data.inputs),
            _f32(data.labels),
        ])
        return self._write_bytes(path, payload, provenance)

    def read_dataset(self, path: PathLike, prior_ranges: Optional[PriorRanges] = None) -> TrainingSet:
        reader, _ = self._read_bytes(path, DATASET_MAGIC)
        n, n_b = reader.unpack("II")
        b_values = reader.array("<f4", n_b).astype(np.float64)
        inputs = reader.array("<f4", n * n_b).reshape(n, n_b).astype(np.float64)
        labels = reader.array("<f4", n * 3).reshape(n, 3).astype(np.float64)
        reader.finish()
        try:
            schedule = BValueSchedule(values=b_values.tolist())
        except ValidationError as e:
            raise FileFormatException(f"数据集 b 值无效: {path}", details={"path": str(path)}) from e
        return TrainingSet(
            schedule=schedule,
            prior_ranges=prior_ranges or PriorRanges(),
            inputs=inputs,
            labels=labels,
        )

    def write_dataset_csv(self, path: PathLike, data: TrainingSet, provenance: Optional[Provenance] = None) -> Path:
        columns = {f"s_b{b:g}": data.inputs[:, i] for i, b in enumerate(data.schedule.values)}
        columns.update({"d": data.labels[:, 0], "f": data.labels[:, 1], "d_star": data.labels[:, 2]})
        if data.snr is not None:
            columns["snr"] = data.snr
        return self.write_csv(path, pd.DataFrame(columns), provenance)

    # ---- phantoms ----------------------------------------------------------

    def write_phantom(self, path: PathLike, phantom: PhantomVolume, provenance: Optional[Provenance] = None) -> Path:
        payload = b"".join([
            PHANTOM_MAGIC,
            struct.pack("<HHIf", phantom.width, phantom.height, len(phantom.schedule), phantom.snr),
            _f32(phantom.schedule.as_array()),
            np.ascontiguousarray(phantom.roi_label, dtype=np.uint8).tobytes(),
            _f32(phantom.truth),
            _f32(phantom.signals),
        ])
        return self._write_bytes(path, payload, provenance)

    def read_phantom(self, path: PathLike) -> PhantomVolume:
        reader, _ = self._read_bytes(path, PHANTOM_MAGIC)
        w, h, n_b, snr = reader.unpack("HHIf")
        b_values = reader.array("<f4", n_b).astype(np.float64)
        roi_label = reader.array("u1", w * h).reshape(h, w)
        truth = reader.array("<f4", w * h * 3).reshape(h, w, 3).astype(np.float64)
        signals = reader.array("<f4", w * h * n_b).reshape(h, w, n_b).astype(np.float64)
        reader.finish()
        return PhantomVolume(
            width=w,
            height=h,
            snr=float(snr),
            schedule=BValueSchedule(values=b_values.tolist()),
            roi_label=roi_label,
            truth=truth,
            signals=signals,
        )

    # ---- networks and ensembles --------------------------------------------

    def write_model(self, path: PathLike, net: DenseNetwork, provenance: Optional[Provenance] = None) -> Path:
        if net.head is None:
            raise InvalidArgumentException("模型缺少输出头信息，无法保存")
        sizes = net.layer_sizes
        payload = b"".join([
            MODEL_MAGIC,
            struct.pack("<HBB", MODEL_VERSION, HEAD_TAGS[net.head.kind], len(sizes)),
            struct.pack(f"<{len(sizes)}I", *sizes),
            struct.pack("<I", net.head.k),
            np.ascontiguousarray(net.flat_parameters(), dtype="<f8").tobytes(),
        ])
        return self._write_bytes(path, payload, provenance)

    def read_model(self, path: PathLike, seed: int = 0) -> DenseNetwork:
        reader, _ = self._read_bytes(path, MODEL_MAGIC)
        version, tag, n_sizes = reader.unpack("HBB")
        if version != MODEL_VERSION or tag not in TAG_TO_KIND:
            raise FileFormatException(
                f"不支持的模型文件: {path}", details={"path": str(path), "version": version, "head_tag": tag}
            )
        sizes = list(reader.unpack(f"{n_sizes}I")) if n_sizes > 1 else [reader.unpack("I")]
        k = reader.unpack("I")
        head = HeadSpec(kind=TAG_TO_KIND[tag], k=k)
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(reader.array("<f8", fan_out * fan_in).reshape(fan_out, fan_in))
            biases.append(reader.array("<f8", fan_out))
        reader.finish()
        return DenseNetwork(sizes, weights, biases, seed=seed, head=head)

    def write_ensemble(
        self, out_dir: PathLike, ens: DeepEnsemble, provenance: Optional[Provenance] = None
    ) -> Path:
        """Member files ``member_<i>.ivuqnn`` plus ``ensemble.json`` in out_dir."""
        out_dir = Path(out_dir)
        files = []
        for i, net in enumerate(ens.members):
            name = f"member_{i:02d}.ivuqnn"
            self.write_model(out_dir / name, net, provenance)
            files.append(name)
        manifest = EnsembleManifest(
            head=ens.head,
            prior_ranges=ens.prior_ranges,
            b_values=ens.schedule.values,
            layer_sizes=ens.layer_sizes,
            member_files=files,
            member_seeds=ens.member_seeds,
            provenance=provenance or Provenance(),
        )
        return self.write_text(out_dir / "ensemble.json", manifest.model_dump_json(indent=2) + "\n")

    def read_ensemble(self, manifest_path: PathLike) -> DeepEnsemble:
        manifest_path = Path(manifest_path)
        if manifest_path.is_dir():
            manifest_path = manifest_path / "ensemble.json"
        try:
            manifest = EnsembleManifest.model_validate_json(self.read_text(manifest_path))
        except ValidationError as e:
            raise FileFormatException(
                f"集成清单格式错误: {manifest_path}", details={"path": str(manifest_path), "errors": str(e)}
            ) from e
        members = []
        for name, seed in zip(manifest.member_files, manifest.member_seeds):
            net = self.read_model(manifest_path.parent / name, seed=seed)
            if net.head.kind != manifest.head.kind or net.head.k != manifest.head.k:
                raise FileFormatException(
                    f"成员输出头与清单不一致: {name}", details={"path": str(manifest_path.parent / name)}
                )
            members.append(net)
        return DeepEnsemble(
            members,
            manifest.head,
            manifest.prior_ranges,
            BValueSchedule(values=manifest.b_values),
            manifest.member_seeds,
        )

    # ---- predictions -------------------------------------------------------

    def write_prediction(self, path: PathLike, pred: PredictionMap, provenance: Optional[Provenance] = None) -> Path:
        nx, ny, nz = pred.dims
        voxels = np.concatenate([pred.flat("map_estimate"), pred.flat("au"), pred.flat("eu")], axis=1)
        payload = b"".join([
            PREDICTION_MAGIC,
            struct.pack("<BBIII", PREDICTION_VERSION, pred.kind_tag, nx, ny, nz),
            _f32(voxels),
        ])
        return self._write_bytes(path, payload, provenance)

    def read_prediction(self, path: PathLike) -> PredictionMap:
        reader, _ = self._read_bytes(path, PREDICTION_MAGIC)
        version, tag, nx, ny, nz = reader.unpack("BBIII")
        if version != PREDICTION_VERSION:
            raise FileFormatException(f"不支持的预测文件版本: {path}", details={"path": str(path), "version": version})
        voxels = reader.array("<f4", nx * ny * nz * 9).reshape(nx, ny, nz, 9).astype(np.float64)
        reader.finish()
        return PredictionMap(
            kind_tag=tag,
            dims=(nx, ny, nz),
            map_estimate=voxels[..., 0:3],
            au=voxels[..., 3:6],
            eu=voxels[..., 6:9],
        )

    def _write_npz(self, path: Path, arrays: Dict[str, np.ndarray]) -> Path:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
                for name, array in arrays.items():
                    buffer = io.BytesIO()
                    np.lib.format.write_array(buffer, np.asarray(array), allow_pickle=False)
                    info = zipfile.ZipInfo(f"{name}.npy", date_time=ZIP_EPOCH)
                    info.compress_type = zipfile.ZIP_DEFLATED
                    zf.writestr(info, buffer.getvalue())
        except OSError as e:
            raise StorageException(f"写入文件失败: {path}", details={"path": str(path), "error": str(e)}) from e
        return path

    def write_mixtures(
        self, path: PathLike, sidecar: MixtureSidecar, provenance: Optional[Provenance] = None
    ) -> Path:
        provenance = provenance or Provenance()
        return self._write_npz(Path(path), {
            "voxel_index": sidecar.voxel_index.astype("<i8"),
            "weights": sidecar.weights.astype("<f4"),
            "means": sidecar.means.astype("<f4"),
            "stds": sidecar.stds.astype("<f4"),
            "lower": sidecar.lower.astype("<f8"),
            "upper": sidecar.upper.astype("<f8"),
            "config_hash": np.array(provenance.config_hash),
            "seed": np.array(provenance.seed, dtype="<u8"),
        })

    def read_mixtures(self, path: PathLike) -> MixtureSidecar:
        path = Path(path)
        try:
            with np.load(path, allow_pickle=False) as npz:
                return MixtureSidecar(
                    voxel_index=npz["voxel_index"],
                    weights=npz["weights"],
                    means=npz["means"],
                    stds=npz["stds"],
                    lower=npz["lower"],
                    upper=npz["upper"],
                )
        except OSError as e:
            raise StorageException(f"读取文件失败: {path}", details={"path": str(path), "error": str(e)}) from e
        except (KeyError, ValueError, zipfile.BadZipFile) as e:
            raise FileFormatException(f"混合分布文件格式错误: {path}", details={"path": str(path), "error": str(e)}) from e

    def write_samples(self, path: PathLike, samples: np.ndarray) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            np.save(path, np.asarray(samples, dtype="<f4"), allow_pickle=False)
        except OSError as e:
            raise StorageException(f"写入文件失败: {path}", details={"path": str(path), "error": str(e)}) from e
        return path

    # ---- raw volumes -------------------------------------------------------

    @staticmethod
    def sidecar_path(raw_path: PathLike) -> Path:
        return Path(raw_path).with_suffix(".env")

    def write_volume(
        self,
        raw_path: PathLike,
        signals: np.ndarray,
        b_values,
        mask: Optional[np.ndarray] = None,
        endianness: str = "little",
    ) -> Path:
        """float32 (x, y, z, n_b) stack in C order plus a key=value sidecar."""
        raw_path = Path(raw_path)
        signals = np.asarray(signals)
        if signals.ndim != 4:
            raise InvalidArgumentException("体数据必须为 (x, y, z, n_b)", details={"shape": list(signals.shape)})
        dtype = "<f4" if endianness == "little" else ">f4"
        lines = [
            f"dims={','.join(str(d) for d in signals.shape[:3])}",
            f"b_values={','.join(f'{b:g}' for b in b_values)}",
            f"endianness={endianness}",
        ]
        try:
            raw_path.parent.mkdir(parents=True, exist_ok=True)
            raw_path.write_bytes(np.ascontiguousarray(signals, dtype=dtype).tobytes())
            if mask is not None:
                mask_path = raw_path.with_suffix(".mask")
                mask_path.write_bytes(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())
                lines.append(f"mask={mask_path.name}")
        except OSError as e:
            raise StorageException(f"写入文件失败: {raw_path}", details={"path": str(raw_path), "error": str(e)}) from e
        self.write_text(self.sidecar_path(raw_path), "\n".join(lines) + "\n")
        return raw_path

    def read_volume(self, raw_path: PathLike, sidecar: Optional[PathLike] = None) -> VolumeInput:
        raw_path = Path(raw_path)
        sidecar = Path(sidecar) if sidecar is not None else self.sidecar_path(raw_path)
        if not sidecar.is_file():
            raise StorageException(f"缺少体数据描述文件: {sidecar}", details={"path": str(sidecar)})
        meta = dotenv_values(sidecar)
        try:
            dims = tuple(int(v) for v in meta["dims"].split(","))
            b_values = [float(v) for v in meta["b_values"].split(",")]
            endianness = (meta.get("endianness") or "little").strip().lower()
        except (KeyError, AttributeError, ValueError) as e:
            raise FileFormatException(f"体数据描述文件格式错误: {sidecar}", details={"path": str(sidecar)}) from e
        if len(dims) != 3 or endianness not in ("little", "big"):
            raise FileFormatException(
                f"体数据描述文件格式错误: {sidecar}",
                details={"path": str(sidecar), "dims": list(dims), "endianness": endianness},
            )
        dtype = np.dtype("<f4" if endianness == "little" else ">f4")
        expected = int(np.prod(dims)) * len(b_values)
        try:
            raw = np.fromfile(raw_path, dtype=dtype)
        except OSError as e:
            raise StorageException(f"读取文件失败: {raw_path}", details={"path": str(raw_path), "error": str(e)}) from e
        if raw.size != expected:
            raise FileFormatException(
                f"体数据大小与描述不符: {raw_path}",
                details={"path": str(raw_path), "values": int(raw.size), "expected": expected},
            )
        mask = self.read_mask(sidecar.parent / meta["mask"], dims) if meta.get("mask") else None
        try:
            return VolumeInput(
                dims=dims,
                schedule=BValueSchedule(values=b_values),
                signals=raw.reshape(dims + (len(b_values),)).astype(np.float64),
                mask=mask,
            )
        except ValidationError as e:
            raise FileFormatException(f"体数据无效: {raw_path}", details={"path": str(raw_path), "errors": str(e)}) from e

    def read_mask(self, mask_path: PathLike, dims: Tuple[int, int, int]) -> np.ndarray:
        """u8 raw mask, one byte per voxel; non-zero is inside."""
        mask_path = Path(mask_path)
        try:
            raw = np.fromfile(mask_path, dtype=np.uint8)
        except OSError as e:
            raise StorageException(f"读取掩膜失败: {mask_path}", details={"path": str(mask_path)}) from e
        if raw.size != int(np.prod(dims)):
            raise FileFormatException(
                f"掩膜尺寸与体数据不符: {mask_path}",
                details={"path": str(mask_path), "values": int(raw.size), "dims": list(dims)},
            )
        return raw.reshape(dims) > 0

    # ---- text, CSV and config ----------------------------------------------

    def write_text(self, path: PathLike, text: str) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding="utf-8")
        except OSError as e:
            raise StorageException(f"写入文件失败: {path}", details={"path": str(path), "error": str(e)}) from e
        return path

    def read_text(self, path: PathLike) -> str:
        path = Path(path)
        try:
            return path.read_text(encoding="utf-8")
        except OSError as e:
            raise StorageException(f"读取文件失败: {path}", details={"path": str(path), "error": str(e)}) from e

    def write_json(self, path: PathLike, data) -> Path:
        if hasattr(data, "model_dump_json"):
            return self.write_text(path, data.model_dump_json(indent=2) + "\n")
        return self.write_text(path, json.dumps(data, indent=2, sort_keys=True) + "\n")

    def write_csv(self, path: PathLike, df: pd.DataFrame, provenance: Optional[Provenance] = None) -> Path:
        provenance = provenance or Provenance()
        body = df.to_csv(index=False, float_format="%.10g", lineterminator="\n")
        header = f"# config_hash={provenance.config_hash} seed={provenance.seed}\n"
        return self.write_text(path, header + body)

    def read_csv(self, path: PathLike) -> pd.DataFrame:
        path = Path(path)
        try:
            return pd.read_csv(path, comment="#")
        except OSError as e:
            raise StorageException(f"读取文件失败: {path}", details={"path": str(path), "error": str(e)}) from e

    def write_config(self, out_dir: PathLike, cfg: ExperimentConfig) -> Path:
        """Effective config next to the outputs, as ``config.env``."""
        text = cfg.to_env_text().replace(
            f"# config_hash={cfg.config_hash}", f"# config_hash={cfg.config_hash} seed={cfg.seed}", 1
        )
        return self.write_text(Path(out_dir) / "config.env", text)


storage_service = StorageService()
