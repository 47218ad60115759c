"""Point-cloud files, synthetic shapes, depth renders, and group masking.

A sample pairs a normalized cloud with an orthographic inverse-depth render
of that same cloud, so the pairing is exact by construction.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, ParseError
from .geometry import GroupedPointCloud, normalize_unit_sphere

SHAPES = ("sphere", "cube", "torus", "plane_with_hole")
VIEWS = ("+x", "-x", "+y", "-y", "+z", "-z")
MANIFEST = "manifest.txt"
CAMERA_DISTANCE = 2.0


# -- point-cloud files ---------------------------------------------------

def _format_row(p):
    return " ".join(repr(float(v)) for v in p)


def _check_finite(values, line):
    if not all(math.isfinite(v) for v in values):
        raise ParseError("non-finite coordinate", line)


def save_xyz(path, points):
    pts = np.asarray(points, dtype=np.float64)
    with open(path, "w") as fh:
        for p in pts:
            fh.write(_format_row(p) + "\n")


def load_xyz(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) != 3:
                raise ParseError(f"expected 3 values 'x y z', got {len(parts)}", lineno)
            try:
                row = [float(v) for v in parts]
            except ValueError:
                raise ParseError(f"not a number in {text!r}", lineno) from None
            _check_finite(row, lineno)
            rows.append(row)
    if not rows:
        raise ParseError("empty cloud")
    return np.array(rows)


def save_ply(path, points):
    pts = np.asarray(points, dtype=np.float64)
    header = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
              "property double x", "property double y", "property double z", "end_header"]
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        for p in pts:
            fh.write(_format_row(p) + "\n")


def load_ply(path) -> np.ndarray:
    """Read the x/y/z vertex properties of an ASCII PLY file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    lines = raw.split(b"\n")
    if not lines or lines[0].strip() != b"ply":
        raise ParseError("missing 'ply' magic", 1)
    elements = []   # (name, count, [property names])
    encoding = None
    lineno = 1
    for lineno, line in enumerate(lines[1:], 2):
        words = line.decode("ascii", errors="replace").split()
        if not words or words[0] in ("comment", "obj_info"):
            continue
        if words[0] == "format":
            encoding = words[1] if len(words) > 1 else None
        elif words[0] == "element":
            elements.append((words[1], int(words[2]), []))
        elif words[0] == "property":
            if not elements:
                raise ParseError("property before any element", lineno)
            elements[-1][2].append(words[-1])
        elif words[0] == "end_header":
            break
        else:
            raise ParseError(f"unexpected header keyword {words[0]!r}", lineno)
    else:
        raise ParseError("missing end_header")
    if encoding != "ascii":
        raise ParseError(f"unsupported encoding {encoding!r} (only ascii PLY is read)")
    body = lines[lineno:]
    pos = 0
    points = None
    for name, count, props in elements:
        if name != "vertex":
            pos += count
            continue
        try:
            cols = [props.index(c) for c in "xyz"]
        except ValueError:
            raise ParseError("vertex element lacks x/y/z properties") from None
        rows = []
        for i in range(count):
            ln = lineno + pos + i + 1
            if pos + i >= len(body):
                raise ParseError("file ends before all vertices were read", ln)
            words = body[pos + i].split()
            if len(words) < len(props):
                raise ParseError(f"expected {len(props)} values, got {len(words)}", ln)
            try:
                row = [float(words[c]) for c in cols]
            except ValueError:
                raise ParseError("not a number", ln) from None
            _check_finite(row, ln)
            rows.append(row)
        points = np.array(rows).reshape(-1, 3)
        pos += count
    if points is None or len(points) == 0:
        raise ParseError("empty cloud")
    return points


def load_cloud(path) -> np.ndarray:
    return load_ply(path) if str(path).lower().endswith(".ply") else load_xyz(path)


def save_cloud(path, points):
    (save_ply if str(path).lower().endswith(".ply") else save_xyz)(path, points)


# -- images --------------------------------------------------------------

def to_bytes(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.min() < 0 or img.max() > 1:
        raise ContractError("image values must lie in [0, 1]")
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def save_pgm(path, image):
    data = to_bytes(image)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def load_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM as floats in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ParseError(f"not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval}")
    pixels = raw[pos + 1:pos + 1 + w * h]
    if len(pixels) != w * h:
        raise ParseError("truncated PGM pixel data")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w) / 255.0


_VIEW_AXES = {
    # view: (depth axis, sign toward camera, horizontal axis, vertical axis)
    "+z": (2, 1, 0, 1), "-z": (2, -1, 0, 1),
    "+x": (0, 1, 1, 2), "-x": (0, -1, 1, 2),
    "+y": (1, 1, 0, 2), "-y": (1, -1, 0, 2),
}


def render_projection(cloud, h, w, view="+z"):
    """Orthographic inverse-depth render seen from ``view``.

    The camera sits at distance 2 on the view axis; a pixel holds
    ``1 / depth`` of the nearest point landing in it (so values lie in
    [1/3, 1] for a normalized cloud) and 0 where nothing lands.
    """
    if h < 8 or w < 8:
        raise ConfigError(f"image must be at least 8x8, got {h}x{w}")
    if view not in _VIEW_AXES:
        raise ConfigError(f"unknown view {view!r}; expected one of {VIEWS}")
    pts = np.asarray(cloud, dtype=np.float64)
    axis, sign, ua, va = _VIEW_AXES[view]
    depth = CAMERA_DISTANCE - sign * pts[:, axis]
    cols = np.clip(np.floor((pts[:, ua] + 1.0) * 0.5 * w).astype(np.int64), 0, w - 1)
    rows = np.clip(np.floor((1.0 - pts[:, va]) * 0.5 * h).astype(np.int64), 0, h - 1)
    image = np.zeros(h * w)
    np.maximum.at(image, rows * w + cols, 1.0 / depth)
    return np.clip(image, 0.0, 1.0).reshape(h, w)


# -- synthetic shapes ----------------------------------------------------

def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _rotation_about(axis, angle):
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * k @ k


def _sphere(rng, n):
    # antipodal pairs (plus one balanced great-circle triple for odd n) keep
    # the centroid at the origin, so normalization leaves every norm at 1
    if n == 1:
        return _unit_vectors(rng, 1)
    triple = n % 2
    half = _unit_vectors(rng, (n - 3 * triple) // 2)
    parts = [half, -half]
    if triple:
        p = _unit_vectors(rng, 1)[0]
        perp = np.cross(p, [1.0, 0.0, 0.0] if abs(p[0]) < 0.9 else [0.0, 1.0, 0.0])
        rot = _rotation_about(perp, 2 * math.pi / 3)
        parts.append(np.stack([p, rot @ p, rot @ rot @ p]))
    return np.concatenate(parts)[rng.permutation(n)]


def _cube(rng, n):
    # stratified: face f gets n // 6 points (remainder to the first faces);
    # each -axis face mirrors its +axis partner so the centroid stays at 0
    counts = [n // 6 + (1 if f < n % 6 else 0) for f in range(6)]
    faces = []
    for axis in range(3):
        p = rng.uniform(-1.0, 1.0, size=(counts[2 * axis], 3))
        p[:, axis] = 1.0
        faces += [p, -p[:counts[2 * axis + 1]]]
    return np.concatenate(faces)


def _torus(rng, n, major=1.0, minor=0.4):
    out = []
    while sum(len(o) for o in out) < n:
        u = rng.uniform(0, 2 * math.pi, size=2 * n)
        v = rng.uniform(0, 2 * math.pi, size=2 * n)
        # area element grows with the distance from the axis
        keep = rng.uniform(0, 1, size=2 * n) < (major + minor * np.cos(v)) / (major + minor)
        u, v = u[keep], v[keep]
        r = major + minor * np.cos(v)
        out.append(np.stack([r * np.cos(u), r * np.sin(u), minor * np.sin(v)], axis=1))
    return np.concatenate(out)[:n]


def _plane_with_hole(rng, n, hole=0.4):
    out = []
    while sum(len(o) for o in out) < n:
        p = rng.uniform(-1, 1, size=(2 * n, 2))
        p = p[np.hypot(p[:, 0], p[:, 1]) >= hole]
        out.append(np.column_stack([p, np.zeros(len(p))]))
    return np.concatenate(out)[:n]


_GENERATORS = {"sphere": _sphere, "cube": _cube, "torus": _torus, "plane_with_hole": _plane_with_hole}


def synth_shape(kind, n, seed):
    """Sample ``n`` surface points of a named shape and normalize them."""
    if kind not in _GENERATORS:
        raise ConfigError(f"unknown shape {kind!r}; expected one of {SHAPES}")
    if n < 1:
        raise ContractError("need at least one point")
    raw = _GENERATORS[kind](np.random.default_rng(seed), n)
    return normalize_unit_sphere(raw)[0]


# -- masking -------------------------------------------------------------

def masked_count(mask_ratio, g):
    return int(math.floor(mask_ratio * g + 0.5))


@dataclass
class MaskSpec:
    mask_ratio: float
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask ratio must lie in [0, 1), got {self.mask_ratio}")

    def masked_indices(self, g):
        k = masked_count(self.mask_ratio, g)
        perm = np.random.default_rng(self.seed).permutation(g)
        return np.sort(perm[:k])


@dataclass
class MaskedGroups:
    visible_idx: np.ndarray
    masked_idx: np.ndarray
    visible_groups: np.ndarray   # (G_vis, M, 3), center-relative
    visible_centers: np.ndarray
    masked_centers: np.ndarray

    @property
    def num_visible_points(self):
        return self.visible_groups.shape[0] * self.visible_groups.shape[1]


def apply_mask(grouped: GroupedPointCloud, spec: MaskSpec) -> MaskedGroups:
    g = grouped.num_groups
    masked = spec.masked_indices(g)
    visible = np.setdiff1d(np.arange(g), masked)
    return MaskedGroups(visible, masked, grouped.groups[visible],
                        grouped.centers[visible], grouped.centers[masked])


def sample_mask_seed(sample_id, base_seed=0):
    """Stable per-sample mask seed (independent of Python's hash salt)."""
    return zlib.crc32(sample_id.encode("utf-8")) ^ (base_seed & 0xFFFFFFFF)


# -- samples and datasets ------------------------------------------------

@dataclass
class Sample:
    id: str
    cloud: np.ndarray
    image: np.ndarray
    kind: str = ""
    seed: int = 0
    view: str = "+z"


def make_sample(sample_id, kind, n, seed, image_size, view="+z") -> Sample:
    cloud = synth_shape(kind, n, seed)
    # the stored text form is exact (shortest repr), so rendering now matches a re-render after loading
    image = to_bytes(render_projection(cloud, image_size, image_size, view)) / 255.0
    return Sample(sample_id, cloud, image, kind, seed, view)


@dataclass
class ManifestRow:
    id: str
    kind: str
    seed: int
    n: int
    view: str
    image_size: int


def _sample_seed(base_seed, i):
    return int(np.random.SeedSequence([base_seed, i]).generate_state(1)[0])


def build_dataset(out_dir, shapes=("sphere",), n=1024, count=4, seed=0, image_size=64, view="+z"):
    """Write ``count`` samples (cloud .xyz + render .pgm) and a manifest."""
    for kind in shapes:
        if kind not in SHAPES:
            raise ConfigError(f"unknown shape {kind!r}; expected one of {SHAPES}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(count):
        kind = shapes[i % len(shapes)]
        row = ManifestRow(f"{kind}_{i:04d}", kind, _sample_seed(seed, i), n, view, image_size)
        sample = make_sample(row.id, kind, n, row.seed, image_size, view)
        save_xyz(out / f"{row.id}.xyz", sample.cloud)
        save_pgm(out / f"{row.id}.pgm", sample.image)
        rows.append(row)
    write_manifest(out / MANIFEST, rows)
    return rows


def write_manifest(path, rows):
    with open(path, "w") as fh:
        fh.write("# pointfill dataset manifest v1\n")
        fh.write("# id kind seed n view image_size\n")
        for r in rows:
            fh.write(f"{r.id} {r.kind} {r.seed} {r.n} {r.view} {r.image_size}\n")


def read_manifest(path):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) != 6:
                raise ParseError(f"manifest row needs 6 fields, got {len(parts)}", lineno)
            rows.append(ManifestRow(parts[0], parts[1], int(parts[2]), int(parts[3]), parts[4], int(parts[5])))
    return rows


@dataclass
class Dataset:
    root: Path
    samples: list = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"dataset manifest not found: {manifest}")
    samples = []
    for row in read_manifest(manifest):
        cloud = load_xyz(root / f"{row.id}.xyz")
        image = load_pgm(root / f"{row.id}.pgm")
        samples.append(Sample(row.id, cloud, image, row.kind, row.seed, row.view))
    return Dataset(root, samples)


def pairing_is_exact(sample: Sample) -> bool:
    h, w = sample.image.shape
    return np.array_equal(to_bytes(render_projection(sample.cloud, h, w, sample.view)), to_bytes(sample.image))
