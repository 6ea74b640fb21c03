"""On-disk formats: images, event CSVs, dataset manifests and field checkpoints."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .blur_events import EventStream
from .field import EncodingConfig, FieldParams
from .lie import PoseSE3, Trajectory
from .render import Intrinsics

FIELD_MAGIC = b"EVDBFLD1"
MANIFEST_VERSION = 1


def write_pfm(path, image: np.ndarray) -> None:
    """Little-endian color PFM (float32, rows stored bottom-to-top)."""
    image = np.asarray(image, dtype="<f4")
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("PFM writer expects an (H, W, 3) image")
    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(image[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind != b"PF":
            raise ValueError(f"{path}: not a color PFM file")
        w, h = (int(v) for v in f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(), dtype=dtype, count=w * h * 3)
    return data.reshape(h, w, 3)[::-1].astype(np.float64)


def write_ppm(path, image: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def write_events_csv(path, stream: EventStream) -> None:
    with open(path, "w") as f:
        f.write("t,x,y,p\n")
        for t, x, y, p in zip(stream.t, stream.x, stream.y, stream.polarity):
            f.write(f"{float(t)!r},{int(x)},{int(y)},{int(p)}\n")


def read_events_csv(path) -> EventStream:
    with open(path) as f:
        header = f.readline().strip()
        if header != "t,x,y,p":
            raise ValueError(f"{path}: expected header 't,x,y,p', found {header!r}")
        rows = [line.split(",") for line in f if line.strip()]
    if not rows:
        return EventStream.empty()
    cols = list(zip(*rows))
    return EventStream([float(v) for v in cols[0]], [int(v) for v in cols[1]],
                       [int(v) for v in cols[2]], [int(v) for v in cols[3]])


# ---------------------------------------------------------------------------
# dataset manifest


@dataclass
class ViewRecord:
    name: str
    exposure: tuple[float, float]
    init_pose: PoseSE3
    blurry: str
    events: str
    blurry_ppm: str = ""
    sharp: str = ""  # ground-truth sharp image at mid-exposure
    gt_mid_pose: PoseSE3 | None = None
    gt_trajectory: Trajectory | None = None

    def to_json(self) -> dict:
        d = dict(name=self.name, exposure=list(self.exposure), init_pose=self.init_pose.as_row12(),
                 blurry=self.blurry, blurry_ppm=self.blurry_ppm, events=self.events, sharp=self.sharp)
        if self.gt_mid_pose is not None:
            d["gt_mid_pose"] = self.gt_mid_pose.as_row12()
        if self.gt_trajectory is not None:
            d["gt_trajectory"] = dict(timestamps=[float(t) for t in self.gt_trajectory.timestamps],
                                      poses=[P.as_row12() for P in self.gt_trajectory.poses])
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ViewRecord":
        traj = None
        if "gt_trajectory" in d:
            traj = Trajectory(d["gt_trajectory"]["timestamps"],
                              [PoseSE3.from_row12(r) for r in d["gt_trajectory"]["poses"]])
        return cls(d["name"], tuple(d["exposure"]), PoseSE3.from_row12(d["init_pose"]), d["blurry"],
                   d["events"], d.get("blurry_ppm", ""), d.get("sharp", ""),
                   PoseSE3.from_row12(d["gt_mid_pose"]) if "gt_mid_pose" in d else None, traj)


@dataclass
class NovelRecord:
    name: str
    pose: PoseSE3
    sharp: str

    def to_json(self) -> dict:
        return dict(name=self.name, pose=self.pose.as_row12(), sharp=self.sharp)

    @classmethod
    def from_json(cls, d: dict) -> "NovelRecord":
        return cls(d["name"], PoseSE3.from_row12(d["pose"]), d["sharp"])


@dataclass
class Manifest:
    intrinsics: Intrinsics
    theta: float
    views: list[ViewRecord]
    novel: list[NovelRecord] = field(default_factory=list)
    pos_scale: float = 1.0
    generator: dict = field(default_factory=dict)
    version: int = MANIFEST_VERSION

    def to_json(self) -> dict:
        return dict(version=self.version, intrinsics=self.intrinsics.to_dict(), theta=self.theta,
                    pos_scale=self.pos_scale, views=[v.to_json() for v in self.views],
                    novel_views=[n.to_json() for n in self.novel], generator=self.generator)

    @classmethod
    def from_json(cls, d: dict) -> "Manifest":
        if d.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {d.get('version')}")
        return cls(Intrinsics.from_dict(d["intrinsics"]), float(d["theta"]),
                   [ViewRecord.from_json(v) for v in d["views"]],
                   [NovelRecord.from_json(n) for n in d.get("novel_views", [])],
                   float(d.get("pos_scale", 1.0)), d.get("generator", {}), d["version"])


def save_manifest(path, manifest: Manifest) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=1))


def load_manifest(path) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        return Manifest.from_json(json.loads(path.read_text()))
    except (KeyError, TypeError) as e:
        raise ValueError(f"{path}: malformed manifest ({e})") from e


# ---------------------------------------------------------------------------
# field checkpoints


def save_field(path, params: FieldParams) -> None:
    """Magic, uint32 header length, JSON header, then little-endian float64 weights."""
    header = json.dumps(dict(shapes=[list(s) for s in params.shapes],
                             encoding=dict(K_pos=params.encoding.K_pos, K_dir=params.encoding.K_dir,
                                           pos_scale=params.encoding.pos_scale))).encode()
    with open(path, "wb") as f:
        f.write(FIELD_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(params.numpy().astype("<f8").tobytes())


def load_field(path, dtype=torch.float32) -> FieldParams:
    with open(path, "rb") as f:
        if f.read(len(FIELD_MAGIC)) != FIELD_MAGIC:
            raise ValueError(f"{path}: not a field checkpoint")
        (n,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(n))
        flat = np.frombuffer(f.read(), dtype="<f8")
    enc = EncodingConfig(**header["encoding"])
    return FieldParams([tuple(s) for s in header["shapes"]], torch.tensor(flat.copy(), dtype=dtype), enc)
