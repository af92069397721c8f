"""Raster ingestion, tiling, augmentation, normalization, channel grouping and
the synthetic multimodal dataset used for desk-scale verification.

Channel roles: IR, R, G, B (8-bit reflectance), DSM (float metres),
LABEL (class indices).  NDVI is derived on the fly from raw IR and R.
The on-disk container is MCR (see read_mcr/write_mcr); 8-bit PPM/PGM are
accepted for optical and label planes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError

OPTICAL_ROLES = ("IR", "R", "G", "B")
ALL_ROLES = ("IR", "R", "G", "B", "DSM", "NDVI", "LABEL")

# canonical class palette (RGB), class index order
PALETTE = (
    (255, 255, 255),  # impervious surfaces
    (0, 0, 255),      # building
    (0, 255, 255),    # low vegetation
    (0, 255, 0),      # tree
    (255, 255, 0),    # car
    (255, 0, 0),      # clutter / background
)

CLASS_NAMES = (
    "impervious_surfaces",
    "building",
    "low_vegetation",
    "tree",
    "car",
    "clutter_background",
)


@dataclass
class Raster:
    """Co-registered named channel planes sharing one extent."""

    channels: dict
    raster_id: str = ""

    def __post_init__(self):
        shapes = {c.shape for c in self.channels.values()}
        if len(shapes) > 1:
            raise DataError(f"channel extents differ: {shapes}")
        for role in self.channels:
            if role not in ALL_ROLES:
                raise DataError(f"unknown channel role {role!r}")
        if "LABEL" in self.channels:
            lab = self.channels["LABEL"]
            if lab.size and (lab.min() < 0 or lab.max() >= len(PALETTE)):
                raise DataError("LABEL values outside [0, num_classes)")

    @property
    def height(self):
        return next(iter(self.channels.values())).shape[0]

    @property
    def width(self):
        return next(iter(self.channels.values())).shape[1]


# ---------------------------------------------------------------------------
# MCR container (bit-exact): magic "MCR1"; u32 LE channel_count, height,
# width; per channel a 16-byte zero-padded ASCII role name + u8 dtype code
# (1 = f32, 2 = u8); then all planes channel-major, row-major, little-endian.

_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("u1")}
_CODE_FOR = {np.dtype("<f4"): 1, np.dtype("u1"): 2}


def write_mcr(path, raster):
    with open(path, "wb") as f:
        f.write(b"MCR1")
        f.write(struct.pack("<III", len(raster.channels), raster.height, raster.width))
        order = list(raster.channels)
        for role in order:
            plane = raster.channels[role]
            dt = np.dtype("u1") if plane.dtype == np.uint8 else np.dtype("<f4")
            name = role.encode("ascii")
            if len(name) > 16:
                raise DataError(f"role name {role!r} exceeds 16 bytes")
            f.write(name.ljust(16, b"\0"))
            f.write(struct.pack("B", _CODE_FOR[dt]))
        for role in order:
            plane = raster.channels[role]
            dt = np.dtype("u1") if plane.dtype == np.uint8 else np.dtype("<f4")
            f.write(np.ascontiguousarray(plane, dtype=dt).tobytes())


def read_mcr(path, raster_id=None):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != b"MCR1":
            raise DataError(f"{path}: bad magic {magic!r}")
        nch, h, w = struct.unpack("<III", f.read(12))
        descs = []
        for _ in range(nch):
            raw = f.read(17)
            if len(raw) != 17:
                raise DataError(f"{path}: truncated channel descriptor")
            name = raw[:16].rstrip(b"\0").decode("ascii")
            code = raw[16]
            if code not in _DTYPE_CODES:
                raise DataError(f"{path}: unknown dtype code {code}")
            descs.append((name, _DTYPE_CODES[code]))
        channels = {}
        for name, dt in descs:
            nbytes = h * w * dt.itemsize
            buf = f.read(nbytes)
            if len(buf) != nbytes:
                raise DataError(f"{path}: truncated plane {name}")
            arr = np.frombuffer(buf, dtype=dt).reshape(h, w)
            channels[name] = arr.astype(np.uint8) if dt == np.dtype("u1") else arr.astype(np.float32)
    return Raster(channels=channels, raster_id=raster_id or str(path))


# ---------------------------------------------------------------------------
# PPM / PGM (binary, maxval 255)


def _read_pnm_header(f, magic_expected):
    magic = f.readline().split()[0]
    if magic != magic_expected:
        raise DataError(f"expected {magic_expected.decode()}, got {magic!r}")
    vals = []
    while len(vals) < 3:
        line = f.readline()
        if not line:
            raise DataError("truncated PNM header")
        if line.lstrip().startswith(b"#"):
            continue
        vals.extend(int(v) for v in line.split())
    w, h, maxval = vals[:3]
    if maxval != 255:
        raise DataError(f"only maxval 255 supported, got {maxval}")
    return w, h


def read_ppm(path):
    with open(path, "rb") as f:
        w, h = _read_pnm_header(f, b"P6")
        buf = f.read(w * h * 3)
        if len(buf) != w * h * 3:
            raise DataError(f"{path}: truncated pixel data")
        return np.frombuffer(buf, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, rgb):
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        w, h = _read_pnm_header(f, b"P5")
        buf = f.read(w * h)
        if len(buf) != w * h:
            raise DataError(f"{path}: truncated pixel data")
        return np.frombuffer(buf, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path, gray):
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(gray, dtype=np.uint8).tobytes())


# ---------------------------------------------------------------------------
# label palette


def colorize(label_plane):
    """Class-index plane -> RGB image via the canonical palette."""
    lut = np.array(PALETTE, dtype=np.uint8)
    lab = np.asarray(label_plane)
    if lab.min() < 0 or lab.max() >= len(PALETTE):
        raise DataError("label index outside palette")
    return lut[lab]


def decode_label_colors(rgb):
    """RGB label image -> class-index plane; errors name the first bad pixel."""
    rgb = np.asarray(rgb)
    key = rgb[..., 0].astype(np.int64) * 65536 + rgb[..., 1].astype(np.int64) * 256 + rgb[..., 2]
    out = np.full(key.shape, -1, dtype=np.int64)
    for idx, (r, g, b) in enumerate(PALETTE):
        out[key == r * 65536 + g * 256 + b] = idx
    bad = np.argwhere(out < 0)
    if bad.size:
        r, c = bad[0]
        raise DataError(f"pixel ({r},{c}) color {tuple(int(v) for v in rgb[r, c])} not in palette")
    return out.astype(np.uint8)


# ---------------------------------------------------------------------------
# tiling


@dataclass
class TileSet:
    raster_id: str
    tile_size: int
    stride: int
    origins: list  # (row, col), row-major order
    padded_height: int
    padded_width: int


def _axis_origins(extent, tile, stride):
    origins = [0]
    while origins[-1] + tile < extent:
        origins.append(origins[-1] + stride)
    return origins


def tile_raster(raster, tile_size=1024, overlap=0.66):
    """Regular-grid tiling; stride = round(tile * (1 - overlap)), half-up.

    Overhanging last row/column tiles are zero padded on extraction.
    """
    if not 0 <= overlap < 1:
        raise ConfigurationError(f"overlap {overlap} outside [0,1)")
    stride = int(np.floor(tile_size * (1.0 - overlap) + 0.5))
    if stride < 1:
        raise ConfigurationError("overlap too large: stride rounds to zero")
    rows = _axis_origins(raster.height, tile_size, stride)
    cols = _axis_origins(raster.width, tile_size, stride)
    origins = [(r, c) for r in rows for c in cols]
    return TileSet(
        raster_id=raster.raster_id,
        tile_size=tile_size,
        stride=stride,
        origins=origins,
        padded_height=max(raster.height, rows[-1] + tile_size),
        padded_width=max(raster.width, cols[-1] + tile_size),
    )


def extract_tile(raster, tileset, index):
    r0, c0 = tileset.origins[index]
    t = tileset.tile_size
    channels = {}
    for role, plane in raster.channels.items():
        tile = np.zeros((t, t), dtype=plane.dtype)
        r1 = min(r0 + t, plane.shape[0])
        c1 = min(c0 + t, plane.shape[1])
        tile[: r1 - r0, : c1 - c0] = plane[r0:r1, c0:c1]
        channels[role] = tile
    return Raster(channels=channels, raster_id=f"{tileset.raster_id}@{r0},{c0}")


def rotate_augment(tile):
    """Original tile plus its 90/180/270-degree rotations, all channels."""
    if tile.height != tile.width:
        raise ConfigurationError("rotation augmentation requires square tiles")
    out = []
    for k in range(4):
        channels = {role: np.rot90(plane, k).copy() for role, plane in tile.channels.items()}
        out.append(Raster(channels=channels, raster_id=f"{tile.raster_id}#rot{90 * k}"))
    return out


# ---------------------------------------------------------------------------
# normalization


def normalize_optical(plane):
    """8-bit reflectance -> x/100 - 1 (float64; callers narrow as needed)."""
    return plane.astype(np.float64) / 100.0 - 1.0


def normalize_dsm(plane):
    """Per-tile mean-centering divided by 35 (height in metres)."""
    p = plane.astype(np.float64)
    return (p - p.mean()) / 35.0


def compute_ndvi(ir, red):
    """(IR - RED) / (IR + RED) from raw reflectance; 0 where both are 0."""
    ir = ir.astype(np.float64)
    red = red.astype(np.float64)
    den = ir + red
    out = np.zeros_like(ir)
    np.divide(ir - red, den, out=out, where=den != 0)
    return out


def downsample2_mean(plane):
    h, w = plane.shape[-2:]
    if h % 2 or w % 2:
        raise ConfigurationError("2x downsampling requires even extents")
    return plane.reshape(*plane.shape[:-2], h // 2, 2, w // 2, 2).mean(axis=(-3, -1))


def assemble_inputs(tile):
    """Tile raster -> (primary 3xh/2xw/2, auxiliary 3xh/2xw/2, label, label_half).

    Primary carries normalized IR-R-G; auxiliary carries normalized B, NDVI
    and normalized DSM; both are 2x2 stride-2 mean downsampled.  The label is
    kept at full resolution plus a nearest-neighbor half-resolution copy.
    """
    for role in ("IR", "R", "G", "B", "DSM", "LABEL"):
        if role not in tile.channels:
            raise DataError(f"tile {tile.raster_id!r} missing role {role}")
    primary = np.stack([normalize_optical(tile.channels[r]) for r in ("IR", "R", "G")])
    auxiliary = np.stack([
        normalize_optical(tile.channels["B"]),
        compute_ndvi(tile.channels["IR"], tile.channels["R"]),
        normalize_dsm(tile.channels["DSM"]),
    ])
    primary = downsample2_mean(primary).astype(np.float32)
    auxiliary = downsample2_mean(auxiliary).astype(np.float32)
    label = tile.channels["LABEL"].astype(np.int64)
    label_half = label[::2, ::2]
    return primary, auxiliary, label, label_half


# ---------------------------------------------------------------------------
# train / validation split


def _footprints_overlap(a, b, tile):
    (ra, ca), (rb, cb) = a, b
    return abs(ra - rb) < tile and abs(ca - cb) < tile


def split_train_val(tilesets, fraction=0.10, seed=0):
    """Seeded validation selection plus removal of overlapping train tiles.

    ``tilesets``: list of TileSet.  Returns (train_ids, val_ids, dropped_ids)
    where an id is (tileset_index, origin_index).  Selection happens before
    augmentation; augmented variants follow their parent tile.
    """
    if not 0 < fraction < 1:
        raise ConfigurationError(f"validation fraction {fraction} outside (0,1)")
    all_ids = [(si, oi) for si, ts in enumerate(tilesets) for oi in range(len(ts.origins))]
    rng = np.random.default_rng(seed)
    n_val = max(1, int(round(fraction * len(all_ids))))
    val_pick = rng.choice(len(all_ids), size=n_val, replace=False)
    val_ids = sorted(all_ids[i] for i in val_pick)
    val_set = set(val_ids)
    train_ids, dropped = [], []
    for tid in all_ids:
        if tid in val_set:
            continue
        si, oi = tid
        ts = tilesets[si]
        clash = any(
            vsi == si and _footprints_overlap(ts.origins[oi], tilesets[vsi].origins[voi], ts.tile_size)
            for vsi, voi in val_ids
        )
        (dropped if clash else train_ids).append(tid)
    if not train_ids:
        raise DataError("overlap removal left an empty training set")
    return train_ids, val_ids, dropped


# ---------------------------------------------------------------------------
# synthetic dataset

# per-class raw channel signatures (IR, R, G, B) and DSM height offsets;
# pairwise well separated so a nearest-centroid pixel classifier solves the
# task (the learning sanity floor for desk-scale training)
SYNTH_SIGNATURES = {
    0: (40, 170, 170, 170),
    1: (60, 60, 60, 200),
    2: (180, 60, 140, 60),
    3: (230, 40, 90, 40),
    4: (90, 220, 200, 40),
    5: (150, 220, 60, 60),
}
SYNTH_DSM_OFFSET = {0: 0.0, 1: 12.0, 2: 0.5, 3: 8.0, 4: 2.0, 5: 1.0}
SYNTH_OPTICAL_NOISE = 8.0
SYNTH_DSM_NOISE = 0.3


def synth_raster(size, rng, raster_id):
    """One synthetic scene: class-0 background plus random rectangles and
    ellipses of classes 1-5, with smooth terrain under the DSM."""
    label = np.zeros((size, size), dtype=np.uint8)
    yy, xx = np.mgrid[0:size, 0:size]
    n_shapes = int(rng.integers(8, 16))
    for _ in range(n_shapes):
        cls = int(rng.integers(1, 6))
        cy, cx = rng.integers(0, size, size=2)
        ry = int(rng.integers(max(2, size // 10), max(3, size // 3)))
        rx = int(rng.integers(max(2, size // 10), max(3, size // 3)))
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        label[mask] = cls

    sig = np.array([SYNTH_SIGNATURES[c] for c in range(6)], dtype=np.float32)
    base = sig[label]  # (H,W,4) in IR,R,G,B order
    optical = base + rng.normal(0, SYNTH_OPTICAL_NOISE, size=base.shape)
    optical = np.clip(np.rint(optical), 0, 255).astype(np.uint8)

    fy, fx = rng.uniform(0.5, 2.0, size=2)
    py, px = rng.uniform(0, 2 * np.pi, size=2)
    terrain = 3.0 * np.sin(2 * np.pi * fy * yy / size + py) * np.cos(2 * np.pi * fx * xx / size + px)
    offsets = np.array([SYNTH_DSM_OFFSET[c] for c in range(6)], dtype=np.float32)
    dsm = (terrain + offsets[label] + rng.normal(0, SYNTH_DSM_NOISE, size=label.shape)).astype(np.float32)

    return Raster(
        channels={
            "IR": optical[..., 0],
            "R": optical[..., 1],
            "G": optical[..., 2],
            "B": optical[..., 3],
            "DSM": dsm,
            "LABEL": label,
        },
        raster_id=raster_id,
    )


def synth_dataset(num_rasters, size, seed):
    """Deterministic synthetic multimodal rasters with exact labels."""
    master = np.random.default_rng(seed)
    rasters = []
    for i in range(num_rasters):
        rng = np.random.default_rng(master.integers(0, 2**63))
        rasters.append(synth_raster(size, rng, raster_id=f"synth{i:03d}"))
    return rasters


def nearest_centroid_accuracy(raster):
    """Accuracy of a per-pixel nearest-centroid classifier on raw channels;
    the solvability oracle for synthetic scenes."""
    feats = np.stack([raster.channels[r].astype(np.float32) for r in OPTICAL_ROLES], axis=-1)
    cent = np.array([SYNTH_SIGNATURES[c] for c in range(6)], dtype=np.float32)
    d2 = ((feats[..., None, :] - cent) ** 2).sum(axis=-1)
    pred = d2.argmin(axis=-1)
    return float((pred == raster.channels["LABEL"]).mean())
