"""Scene checkpoints (PLY), depth (PFM), images and label maps (PNG), dataset manifests."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .core import Camera, GaussianSet, Level, RasterGrid, Scene, View, as_array, logit

log = logging.getLogger(__name__)

PathLike = Union[str, Path]

SCENE_SCHEMA = (
    ("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
    ("scale_0", "<f8"), ("scale_1", "<f8"), ("scale_2", "<f8"),
    ("rot_0", "<f8"), ("rot_1", "<f8"), ("rot_2", "<f8"), ("rot_3", "<f8"),
    ("opacity_logit", "<f8"),
    ("r", "<f8"), ("g", "<f8"), ("b", "<f8"),
    ("level", "u1"),
    ("birth_iter", "<i4"),
)

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_PLY_NAMES = {"f8": "double", "f4": "float", "u1": "uchar", "i4": "int"}

DEFAULT_IMPORT_OPACITY = 0.1


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- PLY

def _schema_text() -> str:
    return ", ".join(f"{n}:{_PLY_NAMES[t.lstrip('<')]}" for n, t in SCENE_SCHEMA)


def save_scene(scene: Scene, path: PathLike) -> None:
    """Binary little-endian PLY, coarse vertices first, then fine."""
    parts = [scene.coarse, scene.fine]
    n = scene.n_coarse + scene.n_fine
    arr = np.zeros(n, dtype=np.dtype(list(SCENE_SCHEMA)))
    gs = GaussianSet.concat(parts)
    for k, name in enumerate("xyz"):
        arr[name] = gs.mu[:, k]
    for k in range(3):
        arr[f"scale_{k}"] = gs.scale[:, k]
    for k in range(4):
        arr[f"rot_{k}"] = gs.rotation[:, k]
    arr["opacity_logit"] = gs.opacity_logit
    for k, name in enumerate("rgb"):
        arr[name] = gs.color[:, k]
    arr["level"] = gs.level
    arr["birth_iter"] = gs.birth_iter
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    for name, t in SCENE_SCHEMA:
        header.append(f"property {_PLY_NAMES[t.lstrip('<')]} {name}")
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(arr.tobytes())


def _read_ply(path: PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise FormatError(f"{path}: not a PLY file")
        fmt = None
        props = []
        n = None
        in_vertex = False
        while True:
            line = f.readline()
            if not line:
                raise FormatError(f"{path}: truncated header")
            tok = line.decode("ascii").split()
            if not tok or tok[0] in ("comment", "obj_info"):
                continue
            if tok[0] == "end_header":
                break
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    n = int(tok[2])
                elif n is not None:
                    raise FormatError(f"{path}: elements after 'vertex' are not supported")
            elif tok[0] == "property" and in_vertex:
                if tok[1] == "list":
                    raise FormatError(f"{path}: list properties are not supported on vertices")
                if tok[1] not in _PLY_TYPES:
                    raise FormatError(f"{path}: unknown property type {tok[1]!r}")
                props.append((tok[2], _PLY_TYPES[tok[1]]))
        if n is None:
            raise FormatError(f"{path}: no vertex element")
        if fmt == "binary_little_endian":
            dt = np.dtype([(name, "<" + t) for name, t in props])
            data = np.frombuffer(f.read(dt.itemsize * n), dtype=dt, count=n)
        elif fmt == "binary_big_endian":
            dt = np.dtype([(name, ">" + t) for name, t in props])
            data = np.frombuffer(f.read(dt.itemsize * n), dtype=dt, count=n)
        elif fmt == "ascii":
            dt = np.dtype([(name, t) for name, t in props])
            rows = np.loadtxt(f, dtype=np.float64, max_rows=n, ndmin=2) if n else np.zeros((0, len(props)))
            data = np.zeros(n, dtype=dt)
            for k, (name, _) in enumerate(props):
                data[name] = rows[:, k]
        else:
            raise FormatError(f"{path}: unsupported PLY format {fmt!r}")
    return data


def load_scene(path: PathLike) -> Scene:
    """Read a scene checkpoint, or import a plain x,y,z[,r,g,b] point cloud as coarse Gaussians."""
    data = _read_ply(path)
    names = data.dtype.names or ()
    if tuple(names) == tuple(n for n, _ in SCENE_SCHEMA):
        f = lambda k: np.asarray(data[k], dtype=np.float64)
        level = np.asarray(data["level"], dtype=np.uint8)
        if np.any(level > 1):
            raise FormatError(f"{path}: level must be 0 (coarse) or 1 (fine)")
        gs = GaussianSet(
            mu=np.stack([f("x"), f("y"), f("z")], axis=1),
            scale=np.stack([f(f"scale_{k}") for k in range(3)], axis=1),
            rotation=np.stack([f(f"rot_{k}") for k in range(4)], axis=1),
            opacity_logit=f("opacity_logit"),
            color=np.stack([f("r"), f("g"), f("b")], axis=1),
            level=level,
            birth_iter=np.asarray(data["birth_iter"], dtype=np.int64),
            ids=np.arange(len(data), dtype=np.int64),
        )
        coarse = gs.select(level == Level.COARSE)
        fine = gs.select(level == Level.FINE)
        return Scene(coarse=coarse, fine=fine, next_id=len(gs))
    if {"x", "y", "z"} <= set(names):
        pts = np.stack([np.asarray(data[k], dtype=np.float64) for k in "xyz"], axis=1)
        colors = None
        for keys in (("r", "g", "b"), ("red", "green", "blue")):
            if set(keys) <= set(names):
                c = np.stack([np.asarray(data[k], dtype=np.float64) for k in keys], axis=1)
                if data.dtype[keys[0]].kind in "ui":
                    c = c / 255.0
                colors = c
                break
        extra = set(names) - {"x", "y", "z", "r", "g", "b", "red", "green", "blue", "nx", "ny", "nz"}
        if extra:
            raise FormatError(
                f"{path}: unknown vertex properties {sorted(extra)}; expected scene schema "
                f"[{_schema_text()}] or a point cloud with x,y,z[,r,g,b]"
            )
        return Scene.from_coarse(coarse_from_points(pts, colors))
    raise FormatError(
        f"{path}: unknown vertex layout {list(names)}; expected scene schema [{_schema_text()}] "
        "or a point cloud with x,y,z[,r,g,b]"
    )


def save_points(path: PathLike, points: np.ndarray, colors: Optional[np.ndarray] = None) -> None:
    """Plain x,y,z[,r,g,b] point cloud (colors as uchar)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    arr = np.zeros(len(points), dtype=fields)
    for k, name in enumerate("xyz"):
        arr[name] = points[:, k]
    if colors is not None:
        c = np.clip(np.round(np.asarray(colors).reshape(-1, 3) * 255), 0, 255).astype(np.uint8)
        for k, name in enumerate(("red", "green", "blue")):
            arr[name] = c[:, k]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(points)}"]
    header += [f"property {'float' if t == '<f4' else 'uchar'} {n}" for n, t in fields]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(arr.tobytes())


def coarse_from_points(points: np.ndarray, colors: Optional[np.ndarray] = None,
                       opacity: float = DEFAULT_IMPORT_OPACITY) -> GaussianSet:
    """Isotropic coarse Gaussians sized by the mean distance to the 3 nearest neighbours."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if n == 0:
        return GaussianSet.empty()
    if n > 1:
        k = min(4, n)
        dist, _ = cKDTree(points).query(points, k=k)
        scale = np.mean(dist[:, 1:], axis=1)
        scale = np.where(scale > 0, scale, np.median(scale[scale > 0]) if np.any(scale > 0) else 0.01)
    else:
        scale = np.full(1, 0.01)
    if colors is None:
        colors = np.full((n, 3), 0.5)
    return GaussianSet.create(
        mu=points,
        scale=np.repeat(scale[:, None], 3, axis=1),
        opacity_logit=float(logit(opacity)),
        color=np.clip(colors, 0.0, 1.0),
    )


# ---------------------------------------------------------------- PFM / PNG

def write_pfm(path: PathLike, data) -> None:
    """Little-endian float32 PFM (rows stored bottom to top)."""
    a = as_array(data)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    color = a.ndim == 3
    h, w = a.shape[:2]
    with open(path, "wb") as f:
        f.write(b"PF\n" if color else b"Pf\n")
        f.write(f"{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(a[::-1], dtype="<f4").tobytes())


def read_pfm(path: PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise FormatError(f"{path}: not a PFM file")
        w, h = (int(v) for v in f.readline().split())
        scale = float(f.readline())
        dt = "<f4" if scale < 0 else ">f4"
        ch = 3 if kind == b"PF" else 1
        a = np.frombuffer(f.read(), dtype=dt, count=w * h * ch)
    a = a.reshape(h, w, ch)[::-1].astype(np.float64)
    return a if ch == 3 else a[:, :, 0]


def write_png(path: PathLike, image) -> None:
    a = as_array(image)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    Image.fromarray(np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)).save(path)


def read_png(path: PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_labels(path: PathLike, labels) -> None:
    a = np.asarray(as_array(labels))
    if a.ndim == 3:
        a = a[:, :, 0]
    Image.fromarray(a.astype(np.uint8), mode="L").save(path)


def read_labels(path: PathLike) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise FormatError(f"{path}: label maps must be 8-bit single channel, got mode {im.mode}")
        return np.asarray(im, dtype=np.float64)


def write_heatmap(path: PathLike, grid) -> None:
    """Min-max scaled single-channel map rendered with a perceptual colormap."""
    from matplotlib import colormaps

    a = as_array(grid)
    if a.ndim == 3:
        a = a[:, :, 0]
    lo, hi = float(a.min()), float(a.max())
    x = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
    rgb = colormaps["viridis"](x)[:, :, :3]
    write_png(path, rgb)


# ---------------------------------------------------------------- datasets

@dataclass
class Dataset:
    views: List[View]
    train: List[int]
    test: List[int]
    background: tuple = (0.0, 0.0, 0.0)
    root: Optional[Path] = None

    @property
    def train_views(self) -> List[View]:
        return [self.views[i] for i in self.train]

    @property
    def test_views(self) -> List[View]:
        return [self.views[i] for i in self.test]

    def index(self, name: str) -> int:
        for i, v in enumerate(self.views):
            if v.name == name:
                return i
        raise KeyError(name)


def _camera_from_entry(entry: dict) -> Camera:
    intr = entry["intrinsics"]
    R = np.asarray(entry["R"], dtype=np.float64).reshape(3, 3)
    t = np.asarray(entry["t"], dtype=np.float64).reshape(3)
    return Camera.from_intrinsics(intr["fx"], intr["fy"], intr["cx"], intr["cy"],
                                  entry["width"], entry["height"], R=R, t=t)


def load_dataset(manifest: PathLike) -> Dataset:
    """Read and validate a JSON dataset manifest; relative paths resolve against its folder."""
    manifest = Path(manifest)
    if not manifest.exists():
        raise FileNotFoundError(f"manifest {manifest} not found")
    spec = json.loads(manifest.read_text())
    root = manifest.parent
    entries = spec.get("views")
    if not entries:
        raise ValueError(f"{manifest}: no views listed")
    # order by declared index, falling back to name, so entry order does not matter
    entries = sorted(entries, key=lambda e: (e.get("index", 0), e["name"]))
    names = [e["name"] for e in entries]
    if len(set(names)) != len(names):
        raise ValueError(f"{manifest}: duplicate view names")
    views = []
    shape = None
    for e in entries:
        name = e["name"]
        try:
            cam = _camera_from_entry(e)
            cam.validate()
        except (KeyError, ValueError) as err:
            raise ValueError(f"view {name!r}: invalid camera: {err}") from err
        img_path = root / e["image"]
        if not img_path.exists():
            raise FileNotFoundError(f"view {name!r}: image {img_path} not found")
        image = read_png(img_path)
        if image.shape[:2] != (cam.height, cam.width):
            raise ValueError(f"view {name!r}: image is {image.shape[1]}x{image.shape[0]}, "
                             f"camera says {cam.width}x{cam.height}")
        if shape is None:
            shape = image.shape
        elif image.shape != shape:
            raise ValueError(f"view {name!r}: image dimensions {image.shape[:2]} differ from {shape[:2]}")
        depth = labels = None
        if e.get("depth"):
            p = root / e["depth"]
            if not p.exists():
                raise FileNotFoundError(f"view {name!r}: depth {p} not found")
            d = read_pfm(p)
            if d.shape != image.shape[:2]:
                raise ValueError(f"view {name!r}: depth shape {d.shape} differs from image")
            depth = RasterGrid(d)
        if e.get("labels"):
            p = root / e["labels"]
            if not p.exists():
                raise FileNotFoundError(f"view {name!r}: labels {p} not found")
            lab = read_labels(p)
            if lab.shape != image.shape[:2]:
                raise ValueError(f"view {name!r}: label shape {lab.shape} differs from image")
            labels = RasterGrid(lab)
        views.append(View(name, cam, RasterGrid(image), depth, labels))
    split = spec.get("split", {})
    train_names = split.get("train", names)
    test_names = split.get("test", [])
    lookup = {n: i for i, n in enumerate(names)}
    for n in list(train_names) + list(test_names):
        if n not in lookup:
            raise ValueError(f"{manifest}: split references unknown view {n!r}")
    train = sorted(lookup[n] for n in train_names)
    test = sorted(lookup[n] for n in test_names)
    for i in train:
        v = views[i]
        if v.depth is None:
            log.warning("view %r has no depth prior; its geometry score will be 0", v.name)
        if v.labels is None:
            log.warning("view %r has no label map; its semantic score will be 0", v.name)
    bg = tuple(float(x) for x in spec.get("background", (0.0, 0.0, 0.0)))
    return Dataset(views, train, test, bg, root)


def save_dataset(ds: Dataset, root: PathLike) -> Path:
    """Write images, priors and ``manifest.json`` under ``root``; returns the manifest path."""
    root = Path(root)
    for sub in ("images", "depth", "labels"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for i, v in enumerate(ds.views):
        cam = v.camera
        e = {
            "name": v.name,
            "index": i,
            "image": f"images/{v.name}.png",
            "intrinsics": {"fx": cam.K[0, 0], "fy": cam.K[1, 1], "cx": cam.K[0, 2], "cy": cam.K[1, 2]},
            "width": cam.width,
            "height": cam.height,
            "R": cam.R.reshape(-1).tolist(),
            "t": cam.t.tolist(),
        }
        write_png(root / e["image"], v.image)
        if v.depth is not None:
            e["depth"] = f"depth/{v.name}.pfm"
            write_pfm(root / e["depth"], v.depth)
        if v.labels is not None:
            e["labels"] = f"labels/{v.name}.png"
            write_labels(root / e["labels"], v.labels)
        entries.append(e)
    manifest = {
        "background": list(ds.background),
        "views": entries,
        "split": {"train": [ds.views[i].name for i in ds.train], "test": [ds.views[i].name for i in ds.test]},
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path
