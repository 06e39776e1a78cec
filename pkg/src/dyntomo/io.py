"""File formats: dataset directories, volume files, checkpoints, configs.

All binary payloads are little-endian. Text formats are UTF-8 `key=value`
lines where unknown keys are an error, so configuration drift never passes
silently.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .deform import CoordDomain, DeformDecoder, PlaneGrid
from .gaussians import GaussianSet, Volume
from .geometry import Box, ConeBeamGeometry
from .losses import LossWeights
from .model import ReconModel
from .period import LearnablePeriod
from .phantom import ProjectionSet
from .training import Adam, TrainConfig

VOLUME_MAGIC = b"DTVL"
CHECKPOINT_MAGIC = b"DTCK"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {0: None, 1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TORCH_TO_CODE = {torch.float32: 1, torch.float64: 2}


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# key=value text


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise FormatError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list, np.ndarray)):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise FormatError(f"not a boolean: {s!r}")


def _parse_vec3(s: str) -> tuple[float, float, float]:
    parts = [p for p in s.split(",") if p.strip()]
    if len(parts) != 3:
        raise FormatError(f"expected 3 comma-separated numbers, got {s!r}")
    return tuple(float(p) for p in parts)  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# geometry text block


def geometry_to_text(geom: ConeBeamGeometry, true_period: float | None = None) -> str:
    lines = [
        f"dso={_fmt(float(geom.dso))}",
        f"dsd={_fmt(float(geom.dsd))}",
        f"det_w={_fmt(float(geom.det_size[0]))}",
        f"det_h={_fmt(float(geom.det_size[1]))}",
        f"nu={geom.det_res[0]}",
        f"nv={geom.det_res[1]}",
        f"bounds_min={_fmt(geom.scene_bounds.lo)}",
        f"bounds_max={_fmt(geom.scene_bounds.hi)}",
    ]
    if true_period is not None:
        lines.append(f"t_true_period={_fmt(float(true_period))}")
    return "\n".join(lines) + "\n"


def geometry_from_text(text: str) -> tuple[ConeBeamGeometry, float | None]:
    kv = parse_kv(text)
    required = {"dso", "dsd", "det_w", "det_h", "nu", "nv", "bounds_min", "bounds_max"}
    unknown = set(kv) - required - {"t_true_period"}
    if unknown:
        raise FormatError(f"unknown geometry keys: {sorted(unknown)}")
    missing = required - set(kv)
    if missing:
        raise FormatError(f"missing geometry keys: {sorted(missing)}")
    geom = ConeBeamGeometry(
        dso=float(kv["dso"]),
        dsd=float(kv["dsd"]),
        det_size=(float(kv["det_w"]), float(kv["det_h"])),
        det_res=(int(kv["nu"]), int(kv["nv"])),
        scene_bounds=Box(_parse_vec3(kv["bounds_min"]), _parse_vec3(kv["bounds_max"])),
    )
    period = float(kv["t_true_period"]) if "t_true_period" in kv else None
    return geom, period


# ---------------------------------------------------------------------------
# dataset directory


def write_dataset(path, dataset: ProjectionSet) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    (root / "geometry.txt").write_text(geometry_to_text(dataset.geometry, dataset.true_period), encoding="utf-8")
    lines = ["index,timestamp,angle"]
    for j in range(len(dataset)):
        lines.append(f"{j},{dataset.timestamps[j]!r},{dataset.angles[j]!r}")
        (root / f"proj_{j:04d}.raw").write_bytes(
            np.ascontiguousarray(dataset.images[j], dtype="<f4").tobytes()
        )
    (root / "meta.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_dataset(path) -> ProjectionSet:
    root = Path(path)
    geom, period = geometry_from_text((root / "geometry.txt").read_text(encoding="utf-8"))
    nu, nv = geom.det_res
    lines = (root / "meta.csv").read_text(encoding="utf-8").strip().splitlines()
    if not lines or lines[0].strip() != "index,timestamp,angle":
        raise FormatError("meta.csv must start with header 'index,timestamp,angle'")
    timestamps, angles, images = [], [], []
    for j, line in enumerate(lines[1:]):
        cells = line.split(",")
        if len(cells) != 3 or int(cells[0]) != j:
            raise FormatError(f"meta.csv row {j} malformed: {line!r}")
        timestamps.append(float(cells[1]))
        angles.append(float(cells[2]))
        raw = (root / f"proj_{j:04d}.raw").read_bytes()
        img = np.frombuffer(raw, dtype="<f4")
        if img.size != nu * nv:
            raise FormatError(f"proj_{j:04d}.raw holds {img.size} floats, expected {nu * nv}")
        images.append(img.reshape(nv, nu).astype(np.float64))
    return ProjectionSet(geom, np.array(timestamps), np.array(angles), np.array(images), true_period=period)


# ---------------------------------------------------------------------------
# volume + raw image files


def write_volume(path, vol: Volume) -> None:
    nx, ny, nz = vol.resolution
    header = VOLUME_MAGIC + struct.pack("<III", nx, ny, nz)
    payload = np.asarray(vol.data, dtype=np.float64).ravel(order="F").astype("<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_volume(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != VOLUME_MAGIC:
        raise FormatError("not a DTVL volume file")
    nx, ny, nz = struct.unpack("<III", blob[4:16])
    data = np.frombuffer(blob[16:], dtype="<f4")
    if data.size != nx * ny * nz:
        raise FormatError(f"volume payload holds {data.size} floats, expected {nx * ny * nz}")
    return data.reshape((nx, ny, nz), order="F").astype(np.float64)


def write_image_raw(path, image: np.ndarray) -> None:
    Path(path).write_bytes(np.ascontiguousarray(image, dtype="<f4").tobytes())


def read_image_raw(path, det_res: tuple[int, int]) -> np.ndarray:
    nu, nv = det_res
    img = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if img.size != nu * nv:
        raise FormatError(f"raw image holds {img.size} floats, expected {nu * nv}")
    return img.reshape(nv, nu).astype(np.float64)


# ---------------------------------------------------------------------------
# train / simulate / eval configs


_WEIGHT_FIELDS = {f.name for f in dataclasses.fields(LossWeights)}
_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig) if f.name != "weights"}


def train_config_to_text(config: TrainConfig) -> str:
    lines = []
    for name in sorted(_CONFIG_FIELDS):
        lines.append(f"{name}={_fmt(getattr(config, name))}")
    for name in sorted(_WEIGHT_FIELDS):
        lines.append(f"{name}={_fmt(getattr(config.weights, name))}")
    return "\n".join(lines) + "\n"


def train_config_from_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    kv = parse_kv(text)
    unknown = set(kv) - set(_CONFIG_FIELDS) - _WEIGHT_FIELDS
    if unknown:
        raise FormatError(f"unknown train config keys: {sorted(unknown)}")
    base = base if base is not None else TrainConfig()
    kwargs = {}
    for name, f in _CONFIG_FIELDS.items():
        if name not in kv:
            kwargs[name] = getattr(base, name)
            continue
        raw = kv[name]
        if f.type in ("int",):
            kwargs[name] = int(raw)
        elif f.type in ("float",):
            kwargs[name] = float(raw)
        elif f.type in ("bool",):
            kwargs[name] = _parse_bool(raw)
        else:
            kwargs[name] = raw
    weights = {}
    for name in _WEIGHT_FIELDS:
        weights[name] = float(kv[name]) if name in kv else getattr(base.weights, name)
    return TrainConfig(weights=LossWeights(**weights), **kwargs)


@dataclass
class SimulateConfig:
    t_true: float = 3.0
    n_proj: int = 120
    duration: float = 40.0
    nu: int = 64
    nv: int = 64
    det_w: float = 2.0
    det_h: float = 2.0
    dso: float = 1.5
    dsd: float = 3.0
    bounds_min: tuple[float, float, float] = (-0.5, -0.5, -0.5)
    bounds_max: tuple[float, float, float] = (0.5, 0.5, 0.5)
    seed: int = 0

    def geometry(self) -> ConeBeamGeometry:
        return ConeBeamGeometry(
            dso=self.dso,
            dsd=self.dsd,
            det_size=(self.det_w, self.det_h),
            det_res=(self.nu, self.nv),
            scene_bounds=Box(self.bounds_min, self.bounds_max),
        )


def simulate_config_from_text(text: str) -> SimulateConfig:
    kv = parse_kv(text)
    names = {f.name: f for f in dataclasses.fields(SimulateConfig)}
    unknown = set(kv) - set(names)
    if unknown:
        raise FormatError(f"unknown simulate config keys: {sorted(unknown)}")
    kwargs = {}
    for name, raw in kv.items():
        f = names[name]
        if name in ("bounds_min", "bounds_max"):
            kwargs[name] = _parse_vec3(raw)
        elif f.type == "int":
            kwargs[name] = int(raw)
        else:
            kwargs[name] = float(raw)
    return SimulateConfig(**kwargs)


@dataclass
class EvalConfig:
    t_true: float = 3.0
    eval_res: int = 64
    n_times: int = 10


def eval_config_from_text(text: str) -> EvalConfig:
    kv = parse_kv(text)
    names = {f.name for f in dataclasses.fields(EvalConfig)}
    unknown = set(kv) - names
    if unknown:
        raise FormatError(f"unknown eval config keys: {sorted(unknown)}")
    kwargs: dict = {}
    if "t_true" in kv:
        kwargs["t_true"] = float(kv["t_true"])
    if "eval_res" in kv:
        kwargs["eval_res"] = int(kv["eval_res"])
    if "n_times" in kv:
        kwargs["n_times"] = int(kv["n_times"])
    return EvalConfig(**kwargs)


# ---------------------------------------------------------------------------
# metrics CSV

METRICS_HEADER = "iter,l_render,l_pc,l_tv3d,l_tv4d,total,T_hat,lr_pos"


def write_metrics_csv(path, rows: list[dict]) -> None:
    lines = [METRICS_HEADER]
    cols = METRICS_HEADER.split(",")
    for row in rows:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in cols))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# checkpoints


def _sections_to_bytes(sections: list[tuple[str, int, bytes]]) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(sections))]
    for name, code, payload in sections:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BQ", code, len(payload)) + payload)
    return b"".join(parts)


def _sections_from_bytes(blob: bytes) -> dict[str, tuple[int, bytes]]:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a DTCK checkpoint")
    version, n = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    out: dict[str, tuple[int, bytes]] = {}
    off = 12
    for _ in range(n):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        code, payload_len = struct.unpack_from("<BQ", blob, off)
        off += 9
        out[name] = (code, blob[off : off + payload_len])
        off += payload_len
    if off != len(blob):
        raise FormatError("trailing bytes after final checkpoint section")
    return out


def _arrays_to_bytes(arrays: list[np.ndarray], np_dtype: np.dtype) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype=np_dtype).tobytes() for a in arrays)


def write_checkpoint(
    path,
    model: ReconModel,
    config: TrainConfig,
    geometry: ConeBeamGeometry,
    adam: Adam | None = None,
) -> None:
    code = _TORCH_TO_CODE[model.dtype]
    np_dtype = _DTYPE_CODES[code]
    g = model.gaussians
    gauss_payload = struct.pack("<I", g.count) + _arrays_to_bytes(
        [t.detach().cpu().numpy() for t in (g.centers, g.raw_log_scales, g.raw_quaternions, g.raw_densities)],
        np_dtype,
    )
    grid = model.grid
    plane_payload = struct.pack("<III", grid.levels, grid.base_res, grid.feature_dim) + _arrays_to_bytes(
        [p.detach().cpu().numpy() for group in grid.planes for p in group], np_dtype
    )
    dom = grid.domain
    domain_payload = _arrays_to_bytes(
        [np.concatenate([dom.box.lo_array, dom.box.hi_array, [dom.t_lo, dom.t_hi]])], np.dtype("<f8")
    )
    dec_params = list(model.decoder.named_parameters())
    dec_payload = struct.pack("<II", model.decoder.fusion.in_features, model.decoder.fusion.out_features)
    dec_payload += _arrays_to_bytes([p.detach().cpu().numpy() for _, p in dec_params], np_dtype)
    tau_payload = _arrays_to_bytes([model.period.tau_hat.detach().cpu().numpy().reshape(1)], np_dtype)

    sections = [
        ("gaussians", code, gauss_payload),
        ("planes", code, plane_payload),
        ("domain", 2, domain_payload),
        ("decoder", code, dec_payload),
        ("tau_hat", code, tau_payload),
        ("config", 0, train_config_to_text(config).encode("utf-8")),
        ("geometry", 0, geometry_to_text(geometry).encode("utf-8")),
    ]
    if adam is not None:
        names = sorted(adam.m)
        chunks = [struct.pack("<I", len(names))]
        for name in names:
            raw = name.encode("utf-8")
            m = adam.m[name].detach().cpu().numpy()
            chunks.append(struct.pack("<H", len(raw)) + raw)
            chunks.append(struct.pack("<IQ", adam.steps[name], m.size))
            chunks.append(_arrays_to_bytes([m, adam.v[name].detach().cpu().numpy()], np_dtype))
        sections.append(("moments", code, b"".join(chunks)))
    Path(path).write_bytes(_sections_to_bytes(sections))


def _take(payload: bytes, off: int, shape, np_dtype) -> tuple[np.ndarray, int]:
    n = int(np.prod(shape)) if shape else 1
    nbytes = n * np_dtype.itemsize
    arr = np.frombuffer(payload[off : off + nbytes], dtype=np_dtype).reshape(shape)
    return arr, off + nbytes


def read_checkpoint(path):
    """Load (model, config, geometry, adam_or_None) from a checkpoint file."""
    sections = _sections_from_bytes(Path(path).read_bytes())
    for required in ("gaussians", "planes", "domain", "decoder", "tau_hat", "config", "geometry"):
        if required not in sections:
            raise FormatError(f"checkpoint missing section {required!r}")

    config = train_config_from_text(sections["config"][1].decode("utf-8"))
    geometry, _ = geometry_from_text(sections["geometry"][1].decode("utf-8"))
    code, gauss = sections["gaussians"]
    np_dtype = _DTYPE_CODES[code]
    torch_dtype = torch.float32 if code == 1 else torch.float64
    (k,) = struct.unpack_from("<I", gauss, 0)
    off = 4
    centers, off = _take(gauss, off, (k, 3), np_dtype)
    log_scales, off = _take(gauss, off, (k, 3), np_dtype)
    quats, off = _take(gauss, off, (k, 4), np_dtype)
    dens, off = _take(gauss, off, (k,), np_dtype)
    gset = GaussianSet(
        torch.as_tensor(centers.copy(), dtype=torch_dtype),
        torch.as_tensor(log_scales.copy(), dtype=torch_dtype),
        torch.as_tensor(quats.copy(), dtype=torch_dtype),
        torch.as_tensor(dens.copy(), dtype=torch_dtype),
    )

    dom_arr = np.frombuffer(sections["domain"][1], dtype="<f8")
    domain = CoordDomain(
        Box(tuple(dom_arr[0:3]), tuple(dom_arr[3:6])), float(dom_arr[6]), float(dom_arr[7])
    )

    _, planes_raw = sections["planes"]
    levels, base_res, feat = struct.unpack_from("<III", planes_raw, 0)
    off = 12
    planes = []
    for level in range(1, levels + 1):
        n = level * base_res
        group = []
        for _ in range(6):
            arr, off = _take(planes_raw, off, (n, n, feat), np_dtype)
            group.append(torch.as_tensor(arr.copy(), dtype=torch_dtype))
        planes.append(group)
    grid = PlaneGrid(levels, base_res, feat, domain, planes=planes)

    _, dec_raw = sections["decoder"]
    in_dim, width = struct.unpack_from("<II", dec_raw, 0)
    decoder = DeformDecoder(in_dim, width, dtype=torch_dtype)
    off = 8
    with torch.no_grad():
        for _, p in decoder.named_parameters():
            arr, off = _take(dec_raw, off, tuple(p.shape), np_dtype)
            p.copy_(torch.as_tensor(arr.copy(), dtype=torch_dtype))

    tau = np.frombuffer(sections["tau_hat"][1], dtype=np_dtype)
    period = LearnablePeriod(float(tau[0]), dtype=torch_dtype)
    model = ReconModel(gset, grid, decoder, period)

    adam = None
    if "moments" in sections:
        _, raw = sections["moments"]
        (count,) = struct.unpack_from("<I", raw, 0)
        off = 4
        adam = Adam()
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + name_len].decode("utf-8")
            off += name_len
            step, numel = struct.unpack_from("<IQ", raw, off)
            off += 12
            m, off = _take(raw, off, (numel,), np_dtype)
            v, off = _take(raw, off, (numel,), np_dtype)
            ref = model.named_trainable()[name]
            adam.m[name] = torch.as_tensor(m.copy(), dtype=torch_dtype).reshape(ref.shape)
            adam.v[name] = torch.as_tensor(v.copy(), dtype=torch_dtype).reshape(ref.shape)
            adam.steps[name] = int(step)
    return model, config, geometry, adam
