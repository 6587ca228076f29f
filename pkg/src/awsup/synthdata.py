"""Synthetic three-channel cardiac phantoms with ring/scar/edema labels.

Channel 0 plays the structure sequence (ring and blood pool contrast, blind to
pathology), channel 1 the scar-enhancing sequence and channel 2 the
edema-enhancing sequence (bright over edema and scar). Labels: 0 background,
1 healthy myocardium, 2 scar, 3 edema.
"""

import hashlib
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DatasetError, GenerationError

BG, MYO, SCAR, EDEMA = 0, 1, 2, 3
SPLITS = ("train", "val", "test")

# tissue -> intensity per channel: background, body, blood pool, myocardium, scar, edema
DEFAULT_CONTRAST = (
    (0.05, 0.30, 0.85, 0.45, 0.45, 0.45),
    (0.05, 0.25, 0.50, 0.15, 0.90, 0.22),
    (0.05, 0.25, 0.15, 0.30, 0.70, 0.70),
)


@dataclass
class PhantomParams:
    size: int = 96
    center_jitter: float = 6.0
    outer_radius: tuple = (15.0, 20.0)
    thickness: tuple = (4.5, 7.0)
    scar_arc_deg: tuple = (35.0, 80.0)
    scar_depth: tuple = (0.5, 1.0)
    edema_margin_deg: tuple = (15.0, 35.0)
    contrast: tuple = DEFAULT_CONTRAST
    noise_sigma: float = 0.04
    pathology_fraction: tuple = (0.01, 0.08)
    max_draws: int = 100


@dataclass
class CaseRecord:
    case_id: str
    images: np.ndarray  # (3, H, W) float64 in [0, 1], multiples of 1/255
    labels: np.ndarray  # (H, W) uint8 codes 0..3
    params: dict = field(default_factory=dict)

    @property
    def lv_mask(self):
        return lv_region(self.labels)


def lv_region(labels):
    """Epicardial region: the myocardial ring with its enclosed blood pool."""
    return ndimage.binary_fill_holes(np.asarray(labels) > 0)


def _angle_diff(a, b):
    return np.abs((a - b + np.pi) % (2 * np.pi) - np.pi)


def _draw_geometry(p, rng):
    size = p.size
    c = size / 2.0 - 0.5 + rng.uniform(-p.center_jitter, p.center_jitter, size=2)
    r_out = rng.uniform(*p.outer_radius)
    thick = rng.uniform(*p.thickness)
    r_in = r_out - thick
    scar_arc = np.deg2rad(rng.uniform(*p.scar_arc_deg))
    scar_center = rng.uniform(0, 2 * np.pi)
    depth = rng.uniform(*p.scar_depth)
    margin = np.deg2rad(rng.uniform(*p.edema_margin_deg))
    body = (rng.uniform(0.36, 0.46) * size, rng.uniform(0.30, 0.42) * size, rng.uniform(0, np.pi))
    return dict(cy=c[0], cx=c[1], r_out=r_out, r_in=r_in, scar_arc=scar_arc,
                scar_center=scar_center, scar_depth=depth, edema_margin=margin,
                body_a=body[0], body_b=body[1], body_rot=body[2])


def _rasterize(g, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - g["cy"], xx - g["cx"]
    r = np.hypot(dy, dx)
    ang = np.arctan2(dy, dx)
    ring = (r >= g["r_in"]) & (r <= g["r_out"])
    pool = r < g["r_in"]
    off = _angle_diff(ang, g["scar_center"])
    scar_r = g["r_in"] + g["scar_depth"] * (g["r_out"] - g["r_in"])
    scar = ring & (off <= g["scar_arc"] / 2) & (r <= scar_r)
    edema = ring & (off <= g["scar_arc"] / 2 + g["edema_margin"]) & ~scar
    cy = cx = size / 2.0 - 0.5
    cr, sr = np.cos(g["body_rot"]), np.sin(g["body_rot"])
    u = (yy - cy) * cr + (xx - cx) * sr
    v = -(yy - cy) * sr + (xx - cx) * cr
    body = (u / g["body_a"]) ** 2 + (v / g["body_b"]) ** 2 <= 1.0
    labels = np.zeros((size, size), dtype=np.uint8)
    labels[ring] = MYO
    labels[edema] = EDEMA
    labels[scar] = SCAR
    return labels, pool, body


def _quantize(x):
    return np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0


def generate_case(params, seed, case_id="case_0000"):
    """Pure function of ``(params, seed)``; raises GenerationError if no valid geometry is found."""
    p = params
    rng = np.random.default_rng(seed)
    size = p.size
    lo, hi = p.pathology_fraction
    for _ in range(p.max_draws):
        g = _draw_geometry(p, rng)
        if g["r_in"] < 2 or min(g["cy"], g["cx"]) - g["r_out"] < 2 or \
                max(g["cy"], g["cx"]) + g["r_out"] > size - 3:
            continue
        labels, pool, body = _rasterize(g, size)
        n_scar = int((labels == SCAR).sum())
        n_edema = int((labels == EDEMA).sum())
        frac = (n_scar + n_edema) / labels.size
        if n_scar == 0 or n_edema == 0 or not lo <= frac <= hi:
            continue
        break
    else:
        raise GenerationError(f"no feasible phantom geometry after {p.max_draws} draws (seed {seed})")
    tissue = np.zeros((size, size), dtype=np.intp)
    tissue[body] = 1
    tissue[pool] = 2
    tissue[labels == MYO] = 3
    tissue[labels == SCAR] = 4
    tissue[labels == EDEMA] = 5
    table = np.asarray(p.contrast, dtype=np.float64)
    clean = table[:, tissue]
    noise = rng.normal(0.0, p.noise_sigma, size=clean.shape) if p.noise_sigma > 0 else 0.0
    images = _quantize(clean + noise)
    snapshot = {"seed": int(seed), **{k: float(v) for k, v in g.items()},
                "noise_sigma": float(p.noise_sigma), "size": size}
    return CaseRecord(case_id, images, labels, snapshot)


def case_seed(master_seed, index):
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1)[0])


def generate_cases(n_cases, seed=0, params=None):
    params = params or PhantomParams()
    return [generate_case(params, case_seed(seed, i), f"case_{i:04d}") for i in range(n_cases)]


def _hash_key(case_id):
    return hashlib.sha256(case_id.encode("utf-8")).hexdigest()


def split_cases(cases, counts=None, fractions=(0.6, 0.2, 0.2)):
    """Deterministic train/val/test split ordered by a hash of the case id.

    ``counts`` (n_train, n_val, n_test) overrides ``fractions``.
    """
    ordered = sorted(cases, key=lambda c: _hash_key(c.case_id))
    n = len(ordered)
    if counts is None:
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        counts = (n_train, n_val, n - n_train - n_val)
    if sum(counts) > n:
        raise DatasetError(f"split counts {counts} exceed {n} cases")
    out, pos = {}, 0
    for name, k in zip(SPLITS, counts):
        out[name] = sorted(ordered[pos:pos + k], key=lambda c: c.case_id)
        pos += k
    return out


# ---------------------------------------------------------------------------
# Disk layout: root/{train,val,test}/case_XXXX/{ch0,ch1,ch2,gt}.pgm + params.txt,
# root/manifest.txt with one "sha256  relative/path" line per file.


def write_pgm(path, arr):
    arr = np.asarray(arr)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise DatasetError(f"PGM payload must be a 2-D uint8 array, got {arr.dtype} {arr.shape}")
    H, W = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise DatasetError(f"{path}: only 8-bit binary PGM (P5) is supported")
    W, H = int(tokens[1]), int(tokens[2])
    data = raw[pos + 1:]
    if len(data) != W * H:
        raise DatasetError(f"{path}: expected {W * H} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(H, W).copy()


def _sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _write_params(path, params):
    with open(path, "w") as fh:
        for k in sorted(params):
            fh.write(f"{k}={params[k]!r}\n")


def _read_params(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                k, _, v = line.partition("=")
                out[k] = float(v) if "." in v or "e" in v or "inf" in v or "nan" in v else int(v)
    return out


def write_dataset(splits, root):
    """Write ``{split: [CaseRecord]}`` under ``root`` and return the manifest path."""
    entries = []
    for split in SPLITS:
        for case in splits.get(split, []):
            rel_dir = os.path.join(split, case.case_id)
            d = os.path.join(root, rel_dir)
            os.makedirs(d, exist_ok=True)
            for c in range(case.images.shape[0]):
                write_pgm(os.path.join(d, f"ch{c}.pgm"), np.round(case.images[c] * 255.0).astype(np.uint8))
            write_pgm(os.path.join(d, "gt.pgm"), case.labels.astype(np.uint8))
            _write_params(os.path.join(d, "params.txt"), case.params)
            for name in ("ch0.pgm", "ch1.pgm", "ch2.pgm", "gt.pgm", "params.txt"):
                rel = os.path.join(rel_dir, name)
                entries.append((_sha256(os.path.join(root, rel)), rel))
    manifest = os.path.join(root, "manifest.txt")
    with open(manifest, "w") as fh:
        for digest, rel in entries:
            fh.write(f"{digest}  {rel}\n")
    return manifest


def verify_manifest(root):
    manifest = os.path.join(root, "manifest.txt")
    if not os.path.exists(manifest):
        raise DatasetError(f"{root}: manifest.txt is missing")
    with open(manifest) as fh:
        lines = [l.rstrip("\n") for l in fh if l.strip()]
    for line in lines:
        digest, rel = line.split("  ", 1)
        path = os.path.join(root, rel)
        if not os.path.exists(path):
            raise DatasetError(f"{root}: {rel} listed in manifest but missing")
        if _sha256(path) != digest:
            raise DatasetError(f"{root}: checksum mismatch for {rel}")
    return len(lines)


def read_dataset(root, verify=True):
    """Inverse of :func:`write_dataset`; returns ``{split: [CaseRecord]}``."""
    if not os.path.isdir(root):
        raise DatasetError(f"dataset root {root} does not exist")
    if verify:
        verify_manifest(root)
    out = {}
    for split in SPLITS:
        d = os.path.join(root, split)
        cases = []
        if os.path.isdir(d):
            for cid in sorted(os.listdir(d)):
                cd = os.path.join(d, cid)
                chans = []
                for c in range(3):
                    chans.append(read_pgm(os.path.join(cd, f"ch{c}.pgm")).astype(np.float64) / 255.0)
                labels = read_pgm(os.path.join(cd, "gt.pgm"))
                pfile = os.path.join(cd, "params.txt")
                if not os.path.exists(pfile):
                    raise DatasetError(f"{pfile} is missing")
                cases.append(CaseRecord(cid, np.stack(chans), labels, _read_params(pfile)))
        out[split] = cases
    return out


def params_dict(params):
    return asdict(params)
