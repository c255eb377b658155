"""Domain types and file I/O: sample CSVs, PFM/PGM/PNG maps, SEMPROB stacks."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

SEMPROB_MAGIC = "SEMPROB"


class FormatError(ValueError):
    """A malformed input file. ``where`` names the line or byte offset."""

    def __init__(self, path, where: str, message: str):
        self.path = str(path)
        self.where = where
        super().__init__(f"{self.path}: {where}: {message}")


@dataclass(frozen=True)
class GridDims:
    width: int
    height: int

    def __post_init__(self):
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError(f"grid dims must be >= 1, got {self.width}x{self.height}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def size(self) -> int:
        return self.width * self.height

    @property
    def scale(self) -> int:
        return max(self.width, self.height)

    def contains(self, u: int, v: int) -> bool:
        return 0 <= u < self.width and 0 <= v < self.height

    def normalize(self, u, v):
        """Map pixel (u, v) to centred coordinates with |u'|, |v'| <= 0.5."""
        s = float(self.scale)
        return (np.asarray(u, dtype=np.float64) - self.width / 2.0) / s, (
            np.asarray(v, dtype=np.float64) - self.height / 2.0
        ) / s

    def normalized_grid(self) -> tuple[np.ndarray, np.ndarray]:
        vv, uu = np.mgrid[0 : self.height, 0 : self.width]
        return self.normalize(uu, vv)


@dataclass(frozen=True)
class PixelCoord:
    u: int
    v: int


@dataclass(frozen=True)
class DepthSample:
    pixel: PixelCoord
    z: float
    id: int


class DepthSamples:
    """Sparse depth measurements stored column-wise; a sample's id is its index."""

    def __init__(self, u, v, z, dims: GridDims):
        self.u = np.asarray(u, dtype=np.int64).copy()
        self.v = np.asarray(v, dtype=np.int64).copy()
        self.z = np.asarray(z, dtype=np.float64).copy()
        self.dims = dims
        if not (self.u.shape == self.v.shape == self.z.shape) or self.u.ndim != 1:
            raise ValueError("u, v, z must be 1-D arrays of equal length")
        if len(self.u):
            if np.any(self.z <= 0) or not np.all(np.isfinite(self.z)):
                raise ValueError("sample depths must be finite and positive")
            if (
                self.u.min() < 0
                or self.v.min() < 0
                or self.u.max() >= dims.width
                or self.v.max() >= dims.height
            ):
                raise ValueError("sample outside the grid")
            flat = self.v * dims.width + self.u
            if len(np.unique(flat)) != len(flat):
                raise ValueError("duplicate sample pixel")
        for a in (self.u, self.v, self.z):
            a.setflags(write=False)

    def __len__(self) -> int:
        return len(self.z)

    def __iter__(self) -> Iterator[DepthSample]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> DepthSample:
        return DepthSample(PixelCoord(int(self.u[i]), int(self.v[i])), float(self.z[i]), i)

    @property
    def flat_index(self) -> np.ndarray:
        return self.v * self.dims.width + self.u

    @property
    def inverse_depth(self) -> np.ndarray:
        return 1.0 / self.z

    def normalized(self) -> tuple[np.ndarray, np.ndarray]:
        return self.dims.normalize(self.u, self.v)

    def subset(self, keep) -> "DepthSamples":
        """Samples at ``keep`` (mask or index array), renumbered from 0."""
        keep = np.asarray(keep)
        return DepthSamples(self.u[keep], self.v[keep], self.z[keep], self.dims)

    @classmethod
    def from_samples(cls, samples: Sequence[DepthSample], dims: GridDims) -> "DepthSamples":
        ordered = sorted(samples, key=lambda s: s.id)
        return cls(
            [s.pixel.u for s in ordered],
            [s.pixel.v for s in ordered],
            [s.z for s in ordered],
            dims,
        )


@dataclass(frozen=True)
class EdgeMap:
    scores: np.ndarray  # (H, W) float64 in [0, 1]

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 2:
            raise ValueError("edge map must be 2-D")
        if np.any(s < 0) or np.any(s > 1) or not np.all(np.isfinite(s)):
            raise ValueError("edge scores must lie in [0, 1]")
        s = s.copy()
        s.setflags(write=False)
        object.__setattr__(self, "scores", s)

    @property
    def dims(self) -> GridDims:
        return GridDims(self.scores.shape[1], self.scores.shape[0])


@dataclass(frozen=True)
class SemanticMap:
    label_names: tuple
    probs: np.ndarray  # (L, H, W), sums to one over axis 0

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 3 or p.shape[0] < 1:
            raise ValueError("semantic map must be (L, H, W) with L >= 1")
        if len(self.label_names) != p.shape[0]:
            raise ValueError("label count does not match probability planes")
        p = normalize_probabilities(p)
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "label_names", tuple(self.label_names))

    @property
    def dims(self) -> GridDims:
        return GridDims(self.probs.shape[2], self.probs.shape[1])

    @property
    def n_labels(self) -> int:
        return self.probs.shape[0]

    def argmax(self) -> np.ndarray:
        return np.argmax(self.probs, axis=0)


@dataclass(frozen=True)
class DenseDepthMap:
    inverse_depth: np.ndarray  # (H, W) float64, > 0
    valid: np.ndarray  # (H, W) bool
    stats: dict = field(default_factory=dict, compare=False)

    @property
    def dims(self) -> GridDims:
        return GridDims(self.inverse_depth.shape[1], self.inverse_depth.shape[0])

    @property
    def depth(self) -> np.ndarray:
        return 1.0 / self.inverse_depth


def normalize_probabilities(p: np.ndarray) -> np.ndarray:
    """Renormalize per-pixel vectors along axis 0; zero-sum pixels become uniform."""
    p = np.asarray(p, dtype=np.float64)
    total = p.sum(axis=0, keepdims=True)
    zero = total <= 0
    out = np.where(zero, 1.0 / p.shape[0], p / np.where(zero, 1.0, total))
    return out


# ---------------------------------------------------------------- samples


def load_samples(path, dims: GridDims, units: str = "depth") -> DepthSamples:
    """Read ``u,v,value`` rows; an optional first line ``u,v,z`` is a header.

    With ``units="inverse-depth"`` the value is inverted so storage is always depth.
    """
    if units not in ("depth", "inverse-depth"):
        raise ValueError(f"unknown sample units {units!r}")
    us, vs, zs = [], [], []
    seen: dict[tuple[int, int], int] = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            cells = [c.strip() for c in row]
            if lineno == 1 and [c.lower() for c in cells] == ["u", "v", "z"]:
                continue
            where = f"line {lineno}"
            if len(cells) != 3:
                raise FormatError(path, where, f"expected 3 fields, got {len(cells)}")
            try:
                u, v = int(cells[0]), int(cells[1])
                value = float(cells[2])
            except ValueError:
                raise FormatError(path, where, f"cannot parse row {row!r}") from None
            if not math.isfinite(value) or value <= 0:
                raise FormatError(path, where, f"non-positive value {value}")
            if not dims.contains(u, v):
                raise FormatError(path, where, f"pixel ({u},{v}) outside {dims.width}x{dims.height}")
            if (u, v) in seen:
                raise FormatError(path, where, f"duplicate pixel ({u},{v}), first at line {seen[(u, v)]}")
            seen[(u, v)] = lineno
            us.append(u)
            vs.append(v)
            zs.append(1.0 / value if units == "inverse-depth" else value)
    return DepthSamples(us, vs, zs, dims)


def write_samples(path, samples: DepthSamples) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["u", "v", "z"])
        for u, v, z in zip(samples.u, samples.v, samples.z):
            w.writerow([int(u), int(v), repr(float(z))])


# ---------------------------------------------------------------- PFM / PGM


def _read_token(data: bytes, pos: int, path) -> tuple[str, int]:
    """Next whitespace-delimited header token of a netpbm-style file (skips # comments)."""
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError(path, f"byte {start}", "unexpected end of header")
    return data[start:pos].decode("ascii", errors="replace"), pos


def read_pfm(path) -> np.ndarray:
    """Read a greyscale PFM as a top-down float32 array."""
    data = Path(path).read_bytes()
    magic, pos = _read_token(data, 0, path)
    if magic == "PF":
        raise FormatError(path, "byte 0", "colour PFM not supported, expected 'Pf'")
    if magic != "Pf":
        raise FormatError(path, "byte 0", f"bad PFM magic {magic!r}")
    try:
        tok, pos = _read_token(data, pos, path)
        width = int(tok)
        tok, pos = _read_token(data, pos, path)
        height = int(tok)
        tok, pos = _read_token(data, pos, path)
        scale = float(tok)
    except ValueError:
        raise FormatError(path, f"byte {pos}", "unreadable PFM header") from None
    if width < 1 or height < 1 or scale == 0:
        raise FormatError(path, f"byte {pos}", "invalid PFM dimensions or scale")
    pos += 1  # single whitespace byte ends the header
    need = width * height * 4
    if len(data) - pos != need:
        raise FormatError(path, f"byte {pos}", f"payload has {len(data) - pos} bytes, expected {need}")
    dtype = "<f4" if scale < 0 else ">f4"
    img = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos).reshape(height, width)
    return np.flipud(img).astype(np.float32)


def write_pfm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 2:
        raise ValueError("write_pfm expects a 2-D array")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(np.flipud(img)).astype("<f4").tobytes())


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit PGM (binary P5 or ascii P2) as uint8."""
    data = Path(path).read_bytes()
    magic, pos = _read_token(data, 0, path)
    if magic not in ("P5", "P2"):
        raise FormatError(path, "byte 0", f"bad PGM magic {magic!r}")
    try:
        tok, pos = _read_token(data, pos, path)
        width = int(tok)
        tok, pos = _read_token(data, pos, path)
        height = int(tok)
        tok, pos = _read_token(data, pos, path)
        maxval = int(tok)
    except ValueError:
        raise FormatError(path, f"byte {pos}", "unreadable PGM header") from None
    if width < 1 or height < 1 or not 0 < maxval < 256:
        raise FormatError(path, f"byte {pos}", "only 8-bit PGM with positive dimensions is supported")
    if magic == "P5":
        pos += 1
        need = width * height
        if len(data) - pos < need:
            raise FormatError(path, f"byte {pos}", f"payload has {len(data) - pos} bytes, expected {need}")
        return np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(height, width).copy()
    values = data[pos:].split()
    if len(values) != width * height:
        raise FormatError(path, f"byte {pos}", f"expected {width * height} values, got {len(values)}")
    return np.array([int(x) for x in values], dtype=np.uint8).reshape(height, width)


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("write_pgm expects a 2-D array")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_gray8(path) -> np.ndarray:
    """8-bit greyscale image from PGM or PNG (colour PNGs are converted to luma)."""
    if str(path).lower().endswith((".pgm", ".pnm")):
        return read_pgm(path)
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "P", "RGB", "RGBA", "LA"):
            raise FormatError(path, "byte 0", f"unsupported image mode {im.mode}")
        return np.asarray(im.convert("L"), dtype=np.uint8)


def _check_dims(path, arr: np.ndarray, dims: Optional[GridDims]) -> None:
    if dims is not None and arr.shape != dims.shape:
        raise FormatError(
            path, "header", f"dimensions {arr.shape[1]}x{arr.shape[0]} do not match grid {dims.width}x{dims.height}"
        )


def load_edge_map(path, dims: Optional[GridDims] = None) -> EdgeMap:
    """PGM values scale by 1/255; PFM values are clamped to [0, 1]."""
    if str(path).lower().endswith(".pfm"):
        raw = read_pfm(path).astype(np.float64)
        _check_dims(path, raw, dims)
        raw = np.nan_to_num(raw, nan=0.0)
        return EdgeMap(np.clip(raw, 0.0, 1.0))
    raw = read_pgm(path)
    _check_dims(path, raw, dims)
    return EdgeMap(raw.astype(np.float64) / 255.0)


def fallback_edges(image: np.ndarray) -> EdgeMap:
    """Central-difference gradient magnitude scaled by its 99th percentile.

    Border pixels get no gradient along the axis where a neighbour is missing.
    """
    img = np.asarray(image, dtype=np.float64)
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, 1:-1] = (img[:, 2:] - img[:, :-2]) / 2.0
    gy[1:-1, :] = (img[2:, :] - img[:-2, :]) / 2.0
    mag = np.hypot(gx, gy)
    ref = np.percentile(mag, 99) if mag.size else 0.0
    if ref <= 0:
        ref = mag.max() if mag.size else 0.0
    if ref <= 0:
        return EdgeMap(np.zeros_like(mag))
    return EdgeMap(np.clip(mag / ref, 0.0, 1.0))


# ---------------------------------------------------------------- SEMPROB


def load_semantic_map(path, dims: Optional[GridDims] = None) -> SemanticMap:
    data = Path(path).read_bytes()
    nl1 = data.find(b"\n")
    if nl1 < 0:
        raise FormatError(path, "byte 0", "missing header line")
    head = data[:nl1].decode("ascii", errors="replace").split()
    if len(head) != 4 or head[0] != SEMPROB_MAGIC:
        raise FormatError(path, "line 1", f"expected 'SEMPROB <W> <H> <L>', got {' '.join(head)!r}")
    try:
        w, h, n_labels = (int(x) for x in head[1:])
    except ValueError:
        raise FormatError(path, "line 1", "non-integer header field") from None
    if n_labels == 0:
        raise FormatError(path, "line 1", "label count L must be >= 1")
    if w < 1 or h < 1 or n_labels < 0:
        raise FormatError(path, "line 1", "invalid dimensions")
    nl2 = data.find(b"\n", nl1 + 1)
    if nl2 < 0:
        raise FormatError(path, f"byte {nl1 + 1}", "missing label line")
    names = data[nl1 + 1 : nl2].decode("utf-8", errors="replace").split()
    if len(names) != n_labels:
        raise FormatError(path, "line 2", f"expected {n_labels} label names, got {len(names)}")
    start = nl2 + 1
    need = w * h * n_labels * 4
    if len(data) - start != need:
        raise FormatError(path, f"byte {start}", f"payload has {len(data) - start} bytes, expected {need}")
    probs = np.frombuffer(data, dtype="<f4", offset=start).reshape(n_labels, h, w).astype(np.float64)
    bad = np.argwhere(~(probs >= 0))
    if len(bad):
        l, r, c = (int(x) for x in bad[0])
        off = start + 4 * ((l * h + r) * w + c)
        raise FormatError(path, f"byte {off}", f"negative or NaN score at label {l}, pixel ({c},{r})")
    if dims is not None and (w, h) != (dims.width, dims.height):
        raise FormatError(path, "line 1", f"dimensions {w}x{h} do not match grid {dims.width}x{dims.height}")
    return SemanticMap(tuple(names), probs)


def write_semantic_map(path, sem: SemanticMap) -> None:
    n_labels, h, w = sem.probs.shape
    with open(path, "wb") as fh:
        fh.write(f"{SEMPROB_MAGIC} {w} {h} {n_labels}\n".encode("ascii"))
        fh.write((" ".join(sem.label_names) + "\n").encode("utf-8"))
        fh.write(np.ascontiguousarray(sem.probs).astype("<f4").tobytes())


# ---------------------------------------------------------------- outputs


def visualization16(dmap: DenseDepthMap) -> tuple[np.ndarray, float, float]:
    """16-bit rendering of the inverse depth over valid pixels; invalid pixels are 0."""
    vals = dmap.inverse_depth[dmap.valid]
    out = np.zeros(dmap.inverse_depth.shape, dtype=np.uint16)
    if vals.size == 0:
        return out, float("nan"), float("nan")
    d_min, d_max = float(vals.min()), float(vals.max())
    if d_max == d_min:
        out[dmap.valid] = 65535
    else:
        scaled = np.round(65535.0 * (dmap.inverse_depth - d_min) / (d_max - d_min))
        out[dmap.valid] = scaled[dmap.valid].astype(np.uint16)
    return out, d_min, d_max


def write_png16(path, img: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(img, dtype=np.uint16)).save(path, format="PNG")


def read_png16(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im, dtype=np.uint16)


def write_outputs(dmap: DenseDepthMap, out_dir, stats: Optional[dict] = None) -> dict:
    """Write inverse_depth.pfm, depth_vis.png, validity.pgm and meta.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_pfm(out / "inverse_depth.pfm", dmap.inverse_depth)
    vis, d_min, d_max = visualization16(dmap)
    write_png16(out / "depth_vis.png", vis)
    write_pgm(out / "validity.pgm", np.where(dmap.valid, 255, 0).astype(np.uint8))
    meta = {
        "d_min": d_min if math.isfinite(d_min) else None,
        "d_max": d_max if math.isfinite(d_max) else None,
        "unit": "inverse-depth",
        "width": dmap.dims.width,
        "height": dmap.dims.height,
        "n_valid": int(dmap.valid.sum()),
        "solver": {**dmap.stats, **(stats or {})},
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta
