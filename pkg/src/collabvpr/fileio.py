"""Binary descriptor, codebook and database files, pose CSVs and world manifests.

All binary formats are little-endian and start with a 4-byte magic and a
``uint32`` format version:

``CVPD`` local descriptors
    ``M:uint32, d:uint32`` then ``M*d`` float32, row-major.
``CVPC`` codebook
    ``K:uint32, d:uint32, softness:float64`` then ``K*d`` float32.
``CVDB`` reference database
    ``count:uint32, length:uint32`` then per entry
    ``id:uint64, x:float64, y:float64, descriptor:length*float32``.

Values are widened to float64 on load.

A world directory holds ``manifest.json`` (schema below), the per-view ``.cvpd``
files it references, and ``reference_poses.csv``::

    {
      "format": "collabvpr-world", "version": 1,
      "scene": {<SceneConfig fields>},
      "references": [{"id": int, "pose": [x, y], "file": "<relative path>"}],
      "queries": [{"place_id": int | null,
                   "agents": [{"agent_id": int, "role": "ego" | "collaborator",
                               "pose": [x, y], "observed_place": int | null,
                               "file": "<relative path>"}]}]
    }

The first agent of every query is the ego.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .aggregation import Codebook, LocalDescriptorSet
from .retrieval import ReferenceDatabase
from .simworld import AgentObservation, QueryGroup, ReferenceView, SceneConfig, World

FORMAT_VERSION = 1
WORLD_FORMAT = "collabvpr-world"

_HEADER = struct.Struct("<4sI")


class FileFormatError(ValueError):
    pass


def _read_header(buf: bytes, magic: bytes, path) -> int:
    if len(buf) < _HEADER.size:
        raise FileFormatError(f"{path}: file too short")
    got, version = _HEADER.unpack_from(buf)
    if got != magic:
        raise FileFormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise FileFormatError(f"{path}: unsupported format version {version}")
    return _HEADER.size


def _floats(buf: bytes, offset: int, count: int, path) -> np.ndarray:
    end = offset + 4 * count
    if len(buf) != end:
        raise FileFormatError(f"{path}: expected {end} bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=offset).astype(np.float64)


def write_descriptors(path, descriptors: LocalDescriptorSet | np.ndarray) -> None:
    data = descriptors.data if isinstance(descriptors, LocalDescriptorSet) else np.asarray(descriptors)
    m, d = data.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(b"CVPD", FORMAT_VERSION))
        fh.write(struct.pack("<II", m, d))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_descriptors(path, image_id=None) -> LocalDescriptorSet:
    buf = Path(path).read_bytes()
    off = _read_header(buf, b"CVPD", path)
    if len(buf) < off + 8:
        raise FileFormatError(f"{path}: truncated header")
    m, d = struct.unpack_from("<II", buf, off)
    data = _floats(buf, off + 8, m * d, path).reshape(m, d)
    return LocalDescriptorSet(data, Path(path).stem if image_id is None else image_id)


def write_codebook(path, codebook: Codebook) -> None:
    k, d = codebook.centroids.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(b"CVPC", FORMAT_VERSION))
        fh.write(struct.pack("<IId", k, d, codebook.softness))
        fh.write(np.ascontiguousarray(codebook.centroids, dtype="<f4").tobytes())


def read_codebook(path) -> Codebook:
    buf = Path(path).read_bytes()
    off = _read_header(buf, b"CVPC", path)
    if len(buf) < off + 16:
        raise FileFormatError(f"{path}: truncated header")
    k, d, softness = struct.unpack_from("<IId", buf, off)
    return Codebook(_floats(buf, off + 16, k * d, path).reshape(k, d), softness)


def _entry_dtype(length: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("x", "<f8"), ("y", "<f8"), ("desc", "<f4", (length,))])


def write_database(path, db: ReferenceDatabase) -> None:
    entries = np.zeros(len(db), dtype=_entry_dtype(db.dim))
    entries["id"] = [int(i) for i in db.ids]
    entries["x"] = db.poses[:, 0]
    entries["y"] = db.poses[:, 1]
    entries["desc"] = db.descriptors
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(b"CVDB", FORMAT_VERSION))
        fh.write(struct.pack("<II", len(db), db.dim))
        fh.write(entries.tobytes())


def read_database(path) -> ReferenceDatabase:
    buf = Path(path).read_bytes()
    off = _read_header(buf, b"CVDB", path)
    if len(buf) < off + 8:
        raise FileFormatError(f"{path}: truncated header")
    count, length = struct.unpack_from("<II", buf, off)
    dt = _entry_dtype(length)
    if len(buf) != off + 8 + count * dt.itemsize:
        raise FileFormatError(f"{path}: size does not match {count} entries of length {length}")
    entries = np.frombuffer(buf, dtype=dt, count=count, offset=off + 8)
    return ReferenceDatabase(
        [int(i) for i in entries["id"]],
        np.stack([entries["x"], entries["y"]], axis=1),
        entries["desc"].astype(np.float64),
    )


def read_poses_csv(path) -> dict[int, tuple[float, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["id", "x", "y"]:
            raise FileFormatError(f"{path}: pose CSV must start with the header 'id,x,y'")
        poses = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                pid, x, y = int(row[0]), float(row[1]), float(row[2])
            except (ValueError, IndexError) as exc:
                raise FileFormatError(f"{path}:{lineno}: malformed row {row!r}") from exc
            if pid in poses:
                raise FileFormatError(f"{path}:{lineno}: duplicate id {pid}")
            poses[pid] = (x, y)
    return poses


def write_poses_csv(path, poses) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("id,x,y\n")
        for pid, (x, y) in poses:
            fh.write(f"{int(pid)},{x:.17g},{y:.17g}\n")


def save_world(world: World, directory) -> Path:
    root = Path(directory)
    (root / "references").mkdir(parents=True, exist_ok=True)
    (root / "queries").mkdir(parents=True, exist_ok=True)
    refs = []
    for r in world.references:
        rel = f"references/{r.place_id}.cvpd"
        write_descriptors(root / rel, r.descriptors)
        refs.append({"id": r.place_id, "pose": list(r.pose), "file": rel})
    queries = []
    for q, group in enumerate(world.queries):
        agents = []
        for a in group.agents:
            rel = f"queries/q{q}_a{a.agent_id}.cvpd"
            write_descriptors(root / rel, a.descriptors)
            agents.append(
                {"agent_id": a.agent_id, "role": a.role, "pose": list(a.pose), "observed_place": a.observed_place, "file": rel}
            )
        queries.append({"place_id": group.place_id, "agents": agents})
    manifest = {
        "format": WORLD_FORMAT,
        "version": FORMAT_VERSION,
        "scene": world.config.to_dict(),
        "references": refs,
        "queries": queries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    write_poses_csv(root / "reference_poses.csv", [(r.place_id, r.pose) for r in world.references])
    return root / "manifest.json"


def load_world(directory) -> World:
    root = Path(directory)
    path = root / "manifest.json" if root.is_dir() else root
    root = path.parent
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: invalid JSON ({exc})") from exc
    if manifest.get("format") != WORLD_FORMAT or manifest.get("version") != FORMAT_VERSION:
        raise FileFormatError(f"{path}: not a version {FORMAT_VERSION} world manifest")
    try:
        refs = tuple(
            ReferenceView(int(r["id"]), tuple(r["pose"]), read_descriptors(root / r["file"], f"ref-{r['id']}"))
            for r in manifest["references"]
        )
        queries = []
        for q in manifest["queries"]:
            obs = [
                AgentObservation(
                    int(a["agent_id"]), a["role"], tuple(a["pose"]), read_descriptors(root / a["file"]), a.get("observed_place")
                )
                for a in q["agents"]
            ]
            queries.append(QueryGroup(obs[0], tuple(obs[1:]), q.get("place_id")))
        scene = SceneConfig(**manifest["scene"])
    except (KeyError, TypeError, IndexError) as exc:
        raise FileFormatError(f"{path}: malformed manifest ({exc!r})") from exc
    return World(scene, refs, tuple(queries))
