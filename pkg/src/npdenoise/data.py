"""Mesh loading, surface sampling and dataset construction.

A dataset is a directory of ``<id>.clean.pcb`` / ``<id>.noisy.pcb`` /
``<id>.planes.pln`` triplets plus a ``manifest.json`` that records how each
one was produced.
"""

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io, rng
from .errors import DataError, NPDError, ParseError, UsageError
from .geom import NoiseModel, add_gaussian_noise, normalize_unit_cube
from .planefit import PlaneFitParams, fit_all

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
AREA_EPS = 1e-14


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    dropped: int = 0

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        nv = self.vertices.shape[0]
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= nv):
            raise UsageError("face index out of range")
        areas = triangle_areas(self.vertices, self.faces)
        keep = areas > AREA_EPS
        if not keep.all():
            self.dropped += int((~keep).sum())
            self.faces = self.faces[keep]

    def areas(self):
        return triangle_areas(self.vertices, self.faces)


def triangle_areas(vertices, faces):
    if faces.size == 0:
        return np.zeros(0)
    a, b, c = (vertices[faces[:, k]] for k in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def _fan(poly):
    return [(poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1)]


def _parse_off(lines, path):
    tokens = []  # (line number, [tokens]) for non-empty, non-comment lines
    for no, line in enumerate(lines, 1):
        body = line.split("#", 1)[0].split()
        if body:
            tokens.append((no, body))
    if not tokens:
        raise ParseError("empty file", path, 1)
    no, head = tokens[0]
    if not head[0].startswith("OFF"):
        raise ParseError(f"expected OFF header, found {head[0]!r}", path, no)
    rest = ([head[0][3:]] if head[0][3:] else []) + head[1:]
    pos = 1
    if not rest:
        if len(tokens) < 2:
            raise ParseError("missing counts line", path, no)
        no, rest = tokens[1]
        pos = 2
    try:
        nv, nf = int(rest[0]), int(rest[1])
    except (ValueError, IndexError):
        raise ParseError("malformed counts line", path, no) from None
    if nv < 0 or nf < 0:
        raise ParseError("negative element count", path, no)
    verts, faces = [], []
    for k in range(nv):
        if pos >= len(tokens):
            raise ParseError(f"file ends after {k} of {nv} vertices", path, tokens[-1][0])
        no, tok = tokens[pos]
        pos += 1
        try:
            verts.append([float(t) for t in tok[:3]])
        except ValueError:
            raise ParseError("malformed vertex", path, no) from None
        if len(tok) < 3:
            raise ParseError("vertex needs 3 coordinates", path, no)
    for k in range(nf):
        if pos >= len(tokens):
            raise ParseError(f"file ends after {k} of {nf} faces", path, tokens[-1][0])
        no, tok = tokens[pos]
        pos += 1
        try:
            cnt = int(tok[0])
            idx = [int(t) for t in tok[1:1 + cnt]]
        except ValueError:
            raise ParseError("malformed face", path, no) from None
        if cnt < 3 or len(idx) != cnt:
            raise ParseError(f"face declares {cnt} vertices but lists {len(idx)}", path, no)
        if min(idx) < 0 or max(idx) >= nv:
            raise ParseError("face index out of range", path, no)
        faces.extend(_fan(idx))
    return verts, faces


def _obj_index(token, nv, path, no):
    try:
        i = int(token.split("/")[0])
    except ValueError:
        raise ParseError(f"malformed face index {token!r}", path, no) from None
    if i > 0:
        i -= 1
    elif i < 0:
        i += nv
    else:
        raise ParseError("OBJ indices are 1-based; found 0", path, no)
    if not 0 <= i < nv:
        raise ParseError(f"face index {token!r} out of range", path, no)
    return i


def _parse_obj(lines, path):
    verts, faces = [], []
    for no, line in enumerate(lines, 1):
        tok = line.split("#", 1)[0].split()
        if not tok:
            continue
        if tok[0] == "v":
            if len(tok) < 4:
                raise ParseError("vertex needs 3 coordinates", path, no)
            try:
                verts.append([float(t) for t in tok[1:4]])
            except ValueError:
                raise ParseError("malformed vertex", path, no) from None
        elif tok[0] == "f":
            if len(tok) < 4:
                raise ParseError("face needs at least 3 vertices", path, no)
            poly = [_obj_index(t, len(verts), path, no) for t in tok[1:]]
            faces.extend(_fan(poly))
    return verts, faces


def load_mesh(path):
    """Read an OFF or OBJ file (chosen by extension, else by OFF header)."""
    path = Path(path)
    try:
        text = path.read_text(errors="replace")
    except OSError as exc:
        raise ParseError(exc.strerror or str(exc), path) from exc
    lines = text.splitlines()
    suffix = path.suffix.lower()
    if suffix == ".obj":
        verts, faces = _parse_obj(lines, path)
    elif suffix == ".off" or text.lstrip().startswith("OFF"):
        verts, faces = _parse_off(lines, path)
    else:
        raise ParseError(f"unknown mesh format {suffix!r}", path)
    verts = np.array(verts, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(verts)):
        raise ParseError("non-finite vertex coordinates", path)
    return TriangleMesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_off(path, mesh):
    lines = ["OFF", f"{mesh.vertices.shape[0]} {mesh.faces.shape[0]} 0"]
    lines += [" ".join(repr(float(x)) for x in v) for v in mesh.vertices]
    lines += ["3 " + " ".join(str(int(i)) for i in f) for f in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def sample_surface(mesh, n, seed):
    """``n`` points, triangle chosen with probability proportional to area,
    uniform within the triangle."""
    areas = mesh.areas()
    total = float(areas.sum()) if areas.size else 0.0
    if not total > 0:
        raise DataError("mesh has no non-degenerate faces to sample")
    gen = rng.generator(seed, stream=0x5A3F)
    tri = gen.choice(areas.size, size=int(n), p=areas / total)
    r1 = np.sqrt(gen.random(int(n)))
    r2 = gen.random(int(n))
    a, b, c = (mesh.vertices[mesh.faces[tri, k]] for k in range(3))
    return (1.0 - r1)[:, None] * a + (r1 * (1.0 - r2))[:, None] * b + (r1 * r2)[:, None] * c


# analytic meshes ------------------------------------------------------------

def plane_mesh(size=1.0, cells=4):
    s = np.linspace(-size / 2, size / 2, cells + 1)
    gx, gy = np.meshgrid(s, s, indexing="ij")
    verts = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])
    faces = []
    for i in range(cells):
        for j in range(cells):
            v0 = i * (cells + 1) + j
            v1, v2, v3 = v0 + 1, v0 + cells + 1, v0 + cells + 2
            faces += [(v0, v2, v3), (v0, v3, v1)]
    return TriangleMesh(verts, faces)


def sphere_mesh(radius=1.0, subdivisions=3):
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache, new_faces = {}, []

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return TriangleMesh(radius * np.array(verts), faces)


def cylinder_mesh(radius=0.5, height=1.0, segments=48, caps=True):
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.column_stack([radius * np.cos(ang), radius * np.sin(ang)])
    bottom = np.column_stack([ring, np.full(segments, -height / 2)])
    top = np.column_stack([ring, np.full(segments, height / 2)])
    verts = [bottom, top]
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces += [(i, j, segments + j), (i, segments + j, segments + i)]
    if caps:
        verts.append(np.array([[0, 0, -height / 2], [0, 0, height / 2]]))
        cb, ct = 2 * segments, 2 * segments + 1
        for i in range(segments):
            j = (i + 1) % segments
            faces += [(cb, j, i), (ct, segments + i, segments + j)]
    return TriangleMesh(np.vstack(verts), faces)


def box_mesh(size=(1.0, 1.0, 1.0)):
    sx, sy, sz = (s / 2 for s in size)
    verts = np.array([[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = [t for q in quads for t in _fan(q)]
    return TriangleMesh(verts, faces)


def merge_meshes(meshes):
    verts, faces, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += m.vertices.shape[0]
    return TriangleMesh(np.vstack(verts), np.vstack(faces))


def transformed(mesh, rotation=None, scale=1.0, offset=(0.0, 0.0, 0.0)):
    v = mesh.vertices * np.asarray(scale, dtype=np.float64)
    if rotation is not None:
        v = v @ rotation.T
    return TriangleMesh(v + np.asarray(offset), mesh.faces)


def random_rotation(gen):
    q = gen.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


ANALYTIC_KINDS = ("plane", "sphere", "cylinder", "cube", "mix")


def analytic_mesh(kind, seed):
    """A randomly posed and proportioned primitive (or a pair of them)."""
    gen = rng.generator(seed, stream=0xA11A)
    rot = random_rotation(gen)
    if kind == "plane":
        return transformed(plane_mesh(), rot, scale=(1.0, gen.uniform(0.4, 1.0), 1.0))
    if kind == "sphere":
        return transformed(sphere_mesh(), rot, scale=gen.uniform(0.6, 1.0, size=3))
    if kind == "cylinder":
        return transformed(cylinder_mesh(height=gen.uniform(0.6, 2.0)), rot)
    if kind == "cube":
        return transformed(box_mesh(gen.uniform(0.4, 1.0, size=3)), rot)
    if kind == "mix":
        a, b = gen.choice(["plane", "sphere", "cylinder", "cube"], size=2, replace=False)
        sub = [analytic_mesh(str(k), int(gen.integers(1 << 62))) for k in (a, b)]
        shift = gen.normal(size=3)
        shift *= 0.8 / np.linalg.norm(shift)
        return merge_meshes([sub[0], transformed(sub[1], offset=shift)])
    raise UsageError(f"unknown analytic shape {kind!r}; choose from {ANALYTIC_KINDS}")


def analytic_corpus(count, seed, kinds=ANALYTIC_KINDS):
    """``[(name, mesh), ...]`` cycling through ``kinds``."""
    out = []
    for i in range(int(count)):
        kind = kinds[i % len(kinds)]
        sub_seed = int(rng.stream_key(seed, i) & np.uint64((1 << 62) - 1))
        out.append((f"analytic:{kind}:{seed}:{i}", analytic_mesh(kind, sub_seed)))
    return out


def resolve_mesh_source(src):
    """Accept a path, an ``analytic:<kind>:<seed>[:<i>]`` name, or a ``(name, mesh)`` pair."""
    if isinstance(src, tuple):
        return src
    s = str(src)
    if s.startswith("analytic:"):
        parts = s.split(":")
        if len(parts) < 3:
            raise UsageError(f"analytic source must look like analytic:<kind>:<seed>, got {s!r}")
        seed = int(parts[2]) if len(parts) == 3 else int(rng.stream_key(int(parts[2]), int(parts[3])) & np.uint64((1 << 62) - 1))
        return s, analytic_mesh(parts[1], seed)
    return s, load_mesh(s)


# datasets --------------------------------------------------------------------

@dataclass
class BuildParams:
    n_points: int = 2048
    sigma: float = 0.01
    plane_fit: PlaneFitParams = field(default_factory=PlaneFitParams)
    seed: int = 0
    holdout: int = 0

    def __post_init__(self):
        if isinstance(self.plane_fit, dict):
            self.plane_fit = PlaneFitParams(**self.plane_fit)
        if self.n_points < 4:
            raise UsageError("n_points must be at least 4")
        NoiseModel(self.sigma, self.seed)


@dataclass
class ManifestEntry:
    id: str
    clean_path: str
    noisy_path: str
    planes_path: str
    source_mesh: str
    n_points: int
    sigma: float
    seeds: dict
    split: str = "train"
    plane_fit: dict = field(default_factory=dict)


@dataclass
class DatasetManifest:
    entries: list
    global_info: dict
    root: Path = Path(".")
    failures: list = field(default_factory=list)

    @property
    def dataset_id(self):
        return self.global_info.get("dataset_id", "")

    def to_dict(self):
        return {
            "version": MANIFEST_VERSION,
            "global": self.global_info,
            "entries": [asdict(e) for e in self.entries],
            "failures": self.failures,
        }

    def save(self, path=None):
        path = Path(path) if path else self.root / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            doc = json.loads(path.read_text())
        except OSError as exc:
            raise DataError(f"{path}: {exc.strerror or exc}") from exc
        except ValueError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict) or doc.get("version") != MANIFEST_VERSION:
            raise DataError(f"{path}: unsupported manifest version {doc.get('version') if isinstance(doc, dict) else None!r}")
        try:
            entries = [ManifestEntry(**e) for e in doc["entries"]]
        except (KeyError, TypeError) as exc:
            raise DataError(f"{path}: malformed manifest entries ({exc})") from exc
        return cls(entries, doc.get("global", {}), path.parent, doc.get("failures", []))

    def path_of(self, rel):
        return self.root / rel

    def validate(self):
        """Raise :class:`DataError` naming the first problem found."""
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError("manifest ids are not unique")
        if not self.entries:
            raise DataError(f"{self.root}: manifest has no entries")
        if len({e.n_points for e in self.entries}) > 1:
            raise DataError("manifest entries have differing n_points")
        for e in self.entries:
            for rel in (e.clean_path, e.noisy_path, e.planes_path):
                if not self.path_of(rel).is_file():
                    raise DataError(f"missing dataset file {self.path_of(rel)}")
        return True

    def select(self, split=None):
        if split is None:
            return list(self.entries)
        chosen = [e for e in self.entries if e.split == split]
        return chosen if chosen else list(self.entries)

    def load_clean(self, e):
        return io.read_cloud(self.path_of(e.clean_path))

    def load_noisy(self, e):
        return io.read_cloud(self.path_of(e.noisy_path))

    def load_planes(self, e):
        return io.read_planes(self.path_of(e.planes_path))

    def training_samples(self, split="train"):
        from .net import TrainSample

        out = []
        for e in self.select(split):
            clean, noisy, planes = self.load_clean(e), self.load_noisy(e), self.load_planes(e)
            if not (clean.shape == noisy.shape and len(planes) == clean.shape[0]):
                raise DataError(f"entry {e.id}: clean/noisy/planes lengths differ")
            out.append(TrainSample(e.id, clean, noisy, planes, e.sigma))
        return out


def worker_count():
    try:
        return max(1, int(os.environ.get("NPD_THREADS", "1")))
    except ValueError:
        return 1


def _creation_time():
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch and epoch.isdigit() else int(time.time())
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def _build_one(index, name, mesh, out_dir, params):
    stem = Path(name).stem if not name.startswith("analytic:") else name.split(":")[1]
    eid = f"{index:04d}_{stem}"
    sample_seed = int(rng.stream_key(params.seed, index) & np.uint64((1 << 62) - 1))
    pts = sample_surface(mesh, params.n_points, sample_seed)
    clean, _ = normalize_unit_cube(pts)
    # keep exactly what the f32 file will hold
    clean = clean.astype(np.float32).astype(np.float64)
    planes, report = fit_all(clean, params.plane_fit)
    if report.degenerate:
        raise DataError(f"{name}: degenerate plane fit at {len(report.degenerate)} points")
    noisy = add_gaussian_noise(clean, NoiseModel(params.sigma, params.seed), cloud_id=index)
    entry = ManifestEntry(
        id=eid,
        clean_path=f"{eid}.clean.pcb",
        noisy_path=f"{eid}.noisy.pcb",
        planes_path=f"{eid}.planes.pln",
        source_mesh=name,
        n_points=params.n_points,
        sigma=params.sigma,
        seeds={"sample": sample_seed, "noise": params.seed, "noise_stream": index},
        plane_fit={**report.params, "expanded_radius": report.expanded_radius},
    )
    io.write_cloud(out_dir / entry.clean_path, clean)
    io.write_planes(out_dir / entry.planes_path, planes)
    io.write_cloud(out_dir / entry.noisy_path, noisy)
    return entry


def build_dataset(mesh_sources, out_dir, params=None):
    """Sample, normalize, fit reference planes and add noise for each mesh.

    ``mesh_sources`` holds paths, ``analytic:`` names or ``(name, mesh)``
    pairs. Failed meshes are recorded in the manifest and skipped; if every
    mesh fails a :class:`DataError` is raised. The last ``params.holdout``
    entries get split ``"test"``.
    """
    params = params or BuildParams()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sources = list(mesh_sources)

    def job(item):
        i, src = item
        try:
            name, mesh = resolve_mesh_source(src)
            return _build_one(i, name, mesh, out_dir, params), None
        except NPDError as exc:
            log.warning("skipping mesh %s: %s", src if not isinstance(src, tuple) else src[0], exc)
            return None, {"index": i, "source": str(src if not isinstance(src, tuple) else src[0]), "error": str(exc)}

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        results = list(pool.map(job, enumerate(sources)))
    entries = [e for e, _ in results if e is not None]
    failures = [f for _, f in results if f is not None]
    if not entries:
        raise DataError(f"all {len(sources)} meshes failed to build")
    for e in entries[len(entries) - params.holdout:] if params.holdout else []:
        e.split = "test"
    digest = hashlib.sha256()
    for e in entries:
        for rel in (e.clean_path, e.noisy_path, e.planes_path):
            digest.update((out_dir / rel).read_bytes())
    global_info = {
        "formats": {"cloud": "PCB1", "planes": "PLN1"},
        "plane_fit": params.plane_fit.to_dict(),
        "n_points": params.n_points,
        "sigma": params.sigma,
        "seed": params.seed,
        "created": _creation_time(),
        "dataset_id": digest.hexdigest()[:16],
    }
    manifest = DatasetManifest(entries, global_info, out_dir, failures)
    manifest.save()
    return manifest
