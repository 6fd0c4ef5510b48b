"""File formats: PLY point clouds, pose/landmark/mask files, dataset
manifests, and network checkpoints.

PLY supports ascii and binary_little_endian with double (or float) x/y/z,
optional uchar red/green/blue, and an optional integer label per vertex.
Poses are JSON holding the rotation, translation, and the normalization
(center, scale) metadata; rotations are re-validated on load.  Checkpoints
are .npz archives with a versioned JSON header carrying the full
hyperparameter config.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from segreg.geometry import PointCloud, RigidTransform
from segreg.networks import RegNetConfig, SegNetConfig
from segreg.phantom import PhantomConfig, RegistrationSample

__all__ = [
    "save_ply",
    "load_ply",
    "save_pose",
    "load_pose",
    "save_landmarks",
    "load_landmarks",
    "save_mask",
    "load_mask",
    "save_sample",
    "load_sample",
    "write_manifest",
    "read_manifest",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

_FLOAT_TYPES = {"float": np.float32, "float32": np.float32,
                "double": np.float64, "float64": np.float64}
_INT_TYPES = {"char": np.int8, "int8": np.int8, "uchar": np.uint8,
              "uint8": np.uint8, "short": np.int16, "int16": np.int16,
              "ushort": np.uint16, "uint16": np.uint16, "int": np.int32,
              "int32": np.int32, "uint": np.uint32, "uint32": np.uint32}


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

def save_ply(cloud: PointCloud, path: str | Path, binary: bool = True) -> None:
    path = Path(path)
    n = len(cloud)
    props = [("x", "double"), ("y", "double"), ("z", "double")]
    if cloud.colors is not None:
        props += [("red", "uchar"), ("green", "uchar"), ("blue", "uchar")]
    if cloud.labels is not None:
        props += [("label", "int")]
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {n}"]
    header += [f"property {t} {name}" for name, t in props]
    header.append("end_header")
    header_bytes = ("\n".join(header) + "\n").encode("ascii")

    colors_u8 = None
    if cloud.colors is not None:
        colors_u8 = np.clip(np.round(cloud.colors * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(header_bytes)
        if binary:
            dtype = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
            if colors_u8 is not None:
                dtype += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
            if cloud.labels is not None:
                dtype += [("label", "<i4")]
            rec = np.empty(n, dtype=dtype)
            rec["x"], rec["y"], rec["z"] = cloud.positions.T
            if colors_u8 is not None:
                rec["red"], rec["green"], rec["blue"] = colors_u8.T
            if cloud.labels is not None:
                rec["label"] = cloud.labels.astype(np.int32)
            fh.write(rec.tobytes())
        else:
            lines = []
            for i in range(n):
                row = [repr(float(v)) for v in cloud.positions[i]]
                if colors_u8 is not None:
                    row += [str(int(v)) for v in colors_u8[i]]
                if cloud.labels is not None:
                    row.append(str(int(cloud.labels[i])))
                lines.append(" ".join(row))
            fh.write(("\n".join(lines) + "\n").encode("ascii"))


def _ply_error(msg: str, offset: int) -> ValueError:
    return ValueError(f"malformed PLY at byte {offset}: {msg}")


def load_ply(path: str | Path) -> PointCloud:
    raw = Path(path).read_bytes()
    offset = 0
    lines = []
    while True:
        end = raw.find(b"\n", offset)
        if end < 0:
            raise _ply_error("header not terminated by end_header", offset)
        line = raw[offset:end].decode("ascii", errors="replace").strip()
        lines.append((line, offset))
        offset = end + 1
        if line == "end_header":
            break
        if offset > 65536:
            raise _ply_error("header too large", offset)

    if not lines or lines[0][0] != "ply":
        raise _ply_error("missing 'ply' magic", 0)
    fmt = None
    n_vertex = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    for line, at in lines[1:-1]:
        if line.startswith("comment") or not line:
            continue
        parts = line.split()
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] not in ("ascii", "binary_little_endian"):
                raise _ply_error(f"unsupported format {line!r}", at)
            fmt = parts[1]
        elif parts[0] == "element":
            if parts[1] == "vertex":
                n_vertex = int(parts[2])
                in_vertex = True
            else:
                in_vertex = False
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise _ply_error("list properties are not supported", at)
            props.append((parts[2], parts[1]))
    if fmt is None:
        raise _ply_error("missing format line", 0)
    if n_vertex is None:
        raise _ply_error("missing vertex element", 0)
    if n_vertex < 1:
        raise _ply_error("empty vertex element (need N >= 1)", 0)

    names = [name for name, _ in props]
    for needed in ("x", "y", "z"):
        if needed not in names:
            raise _ply_error(f"missing required property {needed!r}", 0)
    np_types = []
    for name, tname in props:
        if name in ("x", "y", "z"):
            if tname not in _FLOAT_TYPES:
                raise _ply_error(f"property {name} must be float/double", 0)
            np_types.append(_FLOAT_TYPES[tname])
        elif name in ("red", "green", "blue"):
            if tname != "uchar" and tname != "uint8":
                raise _ply_error(f"property {name} must be uchar", 0)
            np_types.append(np.uint8)
        elif name == "label":
            if tname not in _INT_TYPES:
                raise _ply_error("label must be an integer type", 0)
            np_types.append(_INT_TYPES[tname])
        else:
            raise _ply_error(f"unknown property {name!r}", 0)

    if fmt == "binary_little_endian":
        dtype = np.dtype([(nm, np.dtype(t).newbyteorder("<"))
                          for (nm, _), t in zip(props, np_types)])
        need = dtype.itemsize * n_vertex
        if len(raw) - offset < need:
            raise _ply_error(
                f"truncated payload: need {need} bytes, have {len(raw) - offset}",
                offset)
        rec = np.frombuffer(raw[offset: offset + need], dtype=dtype)
    else:
        text = raw[offset:].decode("ascii", errors="replace").split()
        need = len(props) * n_vertex
        if len(text) < need:
            raise _ply_error(
                f"truncated payload: need {need} fields, have {len(text)}",
                offset)
        table = np.array(text[:need]).reshape(n_vertex, len(props))
        rec = {nm: table[:, i].astype(t)
               for i, ((nm, _), t) in enumerate(zip(props, np_types))}

    pos = np.stack([np.asarray(rec["x"], dtype=np.float64),
                    np.asarray(rec["y"], dtype=np.float64),
                    np.asarray(rec["z"], dtype=np.float64)], axis=1)
    colors = None
    if "red" in names:
        colors = np.stack([np.asarray(rec[c], dtype=np.float64) / 255.0
                           for c in ("red", "green", "blue")], axis=1)
    labels = None
    if "label" in names:
        labels = np.asarray(rec["label"], dtype=np.int64)
    return PointCloud(pos, colors=colors, labels=labels)


# ---------------------------------------------------------------------------
# poses, landmarks, masks
# ---------------------------------------------------------------------------

def save_pose(T: RigidTransform, path: str | Path, center=None,
              scale: float | None = None, extra: dict | None = None) -> None:
    doc = {
        "rotation": T.rotation.tolist(),
        "translation": T.translation.tolist(),
    }
    if center is not None:
        doc["center"] = np.asarray(center, dtype=float).tolist()
    if scale is not None:
        doc["scale"] = float(scale)
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_pose(path: str | Path) -> tuple[RigidTransform, dict]:
    doc = json.loads(Path(path).read_text())
    R = np.asarray(doc["rotation"], dtype=np.float64)
    t = np.asarray(doc["translation"], dtype=np.float64)
    if R.shape != (3, 3):
        raise ValueError(f"pose rotation must be 3x3, got {R.shape}")
    if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6 or abs(np.linalg.det(R) - 1) > 1e-6:
        raise ValueError("pose rotation fails orthonormality/determinant check")
    meta = {k: v for k, v in doc.items() if k not in ("rotation", "translation")}
    # renormalize tiny drift so RigidTransform's strict tolerance accepts it
    u, _, vt = np.linalg.svd(R)
    return RigidTransform(u @ vt, t), meta


def save_landmarks(landmarks: np.ndarray, path: str | Path) -> None:
    rows = ["x,y,z"] + [",".join(repr(float(v)) for v in lm) for lm in landmarks]
    Path(path).write_text("\n".join(rows) + "\n")


def load_landmarks(path: str | Path) -> np.ndarray:
    lines = Path(path).read_text().strip().splitlines()
    return np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    Path(path).write_text("\n".join(str(int(v)) for v in mask) + "\n")


def load_mask(path: str | Path) -> np.ndarray:
    return np.array([int(v) for v in Path(path).read_text().split()], dtype=np.int64)


# ---------------------------------------------------------------------------
# dataset layout
# ---------------------------------------------------------------------------

def save_sample(sample: RegistrationSample, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_ply(sample.preoperative, d / "pre.ply")
    save_ply(sample.intraoperative, d / "intra.ply")
    save_pose(sample.T_gt, d / "pose.json", center=sample.center,
              scale=sample.scale, extra={"meta": sample.meta})
    save_landmarks(sample.landmarks, d / "landmarks.csv")
    save_mask(sample.gt_mask, d / "mask.txt")


def load_sample(directory: str | Path) -> RegistrationSample:
    d = Path(directory)
    pre = load_ply(d / "pre.ply")
    intra = load_ply(d / "intra.ply")
    T, meta = load_pose(d / "pose.json")
    landmarks = load_landmarks(d / "landmarks.csv")
    mask = load_mask(d / "mask.txt")
    scale = float(meta.get("scale", 0.2))  # 0.4 m extent fallback for foreign data
    center = np.asarray(meta.get("center", [0.0, 0.0, 0.0]))
    extra = meta.get("meta", {})
    if "scale" not in meta:
        extra = dict(extra, assumed_scale=True)
    return RegistrationSample(
        preoperative=pre, intraoperative=intra, T_gt=T, landmarks=landmarks,
        gt_mask=mask, scale=scale, center=center,
        config=PhantomConfig(seed=int(extra.get("seed", 0))), meta=extra)


def write_manifest(directory: str | Path, sample_dirs: list[str],
                   config: dict | None = None, seed: int | None = None) -> None:
    doc = {"format_version": 1, "samples": sample_dirs}
    if config is not None:
        doc["config"] = config
    if seed is not None:
        doc["seed"] = seed
    Path(directory, "manifest.json").write_text(json.dumps(doc, indent=2) + "\n")


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory, "manifest.json")
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json under {directory}")
    doc = json.loads(path.read_text())
    if doc.get("format_version") != 1:
        raise ValueError(f"unsupported manifest version {doc.get('format_version')}")
    return doc


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, params: dict, seg_config: SegNetConfig,
                    reg_config: RegNetConfig, step: int = 0,
                    momentum: dict | None = None, rng_state: dict | None = None,
                    train_config: dict | None = None) -> None:
    """Serialize parameters (bit-exact float64) with a versioned header."""
    from segreg.autodiff import Tensor

    header = {
        "version": CHECKPOINT_VERSION,
        "step": step,
        "seg_config": asdict(seg_config),
        "reg_config": asdict(reg_config),
        "param_names": sorted(params),
        "train_config": train_config or {},
        "rng_state": rng_state or {},
    }
    arrays = {"__header__": np.frombuffer(
        json.dumps(header).encode("utf-8"), dtype=np.uint8)}
    for name, p in params.items():
        arr = p.data if isinstance(p, Tensor) else np.asarray(p)
        arrays[f"param/{name}"] = arr
    if momentum:
        for name, v in momentum.items():
            arrays[f"momentum/{name}"] = np.asarray(v)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path):
    """Return (params, seg_config, reg_config, state dict)."""
    from segreg.autodiff import Tensor

    with np.load(path) as z:
        if "__header__" not in z:
            raise ValueError("not a checkpoint file (missing header)")
        header = json.loads(bytes(z["__header__"]).decode("utf-8"))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        params = {}
        for name in header["param_names"]:
            params[name] = Tensor(z[f"param/{name}"], requires_grad=True)
        momentum = {}
        for key in z.files:
            if key.startswith("momentum/"):
                momentum[key[len("momentum/"):]] = z[key]
    seg_cfg = SegNetConfig(**{k: tuple(v) if isinstance(v, list) else v
                              for k, v in header["seg_config"].items()})
    reg_cfg = RegNetConfig(**{k: tuple(v) if isinstance(v, list) else v
                              for k, v in header["reg_config"].items()})
    state = {
        "step": header["step"],
        "momentum": momentum,
        "rng_state": header.get("rng_state", {}),
        "train_config": header.get("train_config", {}),
    }
    return params, seg_cfg, reg_cfg, state
