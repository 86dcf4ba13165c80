"""Synthetic dynamic HDR scenes, multi-exposure LDR capture and dataset manifests.

The default ``two-sphere`` scene has a small emitter (radiance 50) orbiting a
dim Lambertian sphere lit only by that emitter, over a black background.  Ground
truth radiance comes from an analytic ray trace; LDR frames are produced with a
gamma-2.2 power response, hard clip and 8-bit quantization.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .camera import Camera, orbit_cameras
from .errors import ContractViolation, ManifestError
from .imageio import read_pfm, read_png, write_pfm, write_png

CRF_GAMMA = 2.2
PATTERNS = ("stereo", "monocular")
SPLIT_POLICIES = ("interleave", "time", "none")
MANIFEST_FORMAT = "hdr4dgs-manifest"


@dataclass
class SceneSpec:
    name: str = "two-sphere"
    timesteps: int = 20
    cameras: int = 5
    exposures: tuple = (0.125, 2.0, 32.0)
    size: int = 64
    supersample: int = 2
    camera_radius: float = 4.0
    camera_height: float = 1.2
    fov_deg: float = 45.0
    emitter_radiance: float = 50.0
    emitter_radius: float = 0.25
    orbit_radius: float = 1.2
    orbit_turns: float = 0.5
    diffuse_radius: float = 0.5
    diffuse_peak: float = 5e-3
    albedo: tuple = (1.0, 0.55, 0.25)

    def __post_init__(self):
        self.exposures = tuple(float(e) for e in self.exposures)
        self.albedo = tuple(float(a) for a in self.albedo)
        if self.name != "two-sphere":
            raise ContractViolation(f"unknown scene {self.name!r}")
        if self.timesteps < 2:
            raise ContractViolation("need at least 2 timesteps")
        if self.cameras < 1:
            raise ContractViolation("need at least 1 camera")
        if not self.exposures or min(self.exposures) <= 0 or len(set(self.exposures)) != len(self.exposures):
            raise ContractViolation("exposures must be positive and distinct")

    def times(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.timesteps)

    def camera_list(self) -> list[Camera]:
        return orbit_cameras(self.cameras, self.camera_radius, self.camera_height, self.size, self.fov_deg)

    def emitter_center(self, t: float) -> np.ndarray:
        ang = 2.0 * np.pi * self.orbit_turns * t
        return np.array([self.orbit_radius * np.cos(ang), 0.0, self.orbit_radius * np.sin(ang)])

    def bounds(self) -> tuple[list, list]:
        r = self.orbit_radius + self.emitter_radius
        h = max(self.diffuse_radius, self.emitter_radius)
        return [-r, -h, -r], [r, h, r]

    def light_constant(self) -> float:
        # peak diffuse radiance occurs at the point nearest the emitter
        d_min = self.orbit_radius - self.diffuse_radius
        return self.diffuse_peak * d_min**2 / max(self.albedo)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["exposures"] = list(self.exposures)
        d["albedo"] = list(self.albedo)
        return d


def _ray_sphere(origin, dirs, center, radius):
    """Nearest positive hit distance per ray (inf where missed)."""
    oc = origin - center
    b = dirs @ oc
    c = oc @ oc - radius * radius
    disc = b * b - c
    hit = disc >= 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > 1e-9, t0, t1)
    return np.where(hit & (t > 1e-9), t, np.inf)


def shade_rays(spec: SceneSpec, origin, dirs, t: float) -> np.ndarray:
    """Radiance along world rays ``dirs`` (..., 3) from ``origin`` at time ``t``."""
    shape = dirs.shape[:-1]
    d = dirs.reshape(-1, 3)
    emitter = spec.emitter_center(t)
    t_em = _ray_sphere(origin, d, emitter, spec.emitter_radius)
    t_df = _ray_sphere(origin, d, np.zeros(3), spec.diffuse_radius)
    out = np.zeros((len(d), 3))
    em_hit = np.isfinite(t_em) & (t_em <= t_df)
    out[em_hit] = spec.emitter_radiance
    df_hit = np.isfinite(t_df) & ~em_hit
    if np.any(df_hit):
        p = origin + d[df_hit] * t_df[df_hit, None]
        n = p / spec.diffuse_radius
        to_light = emitter - p
        dist = np.linalg.norm(to_light, axis=1)
        cos = np.maximum(np.sum(n * to_light, axis=1) / dist, 0.0)
        irradiance = spec.light_constant() * cos / dist**2
        out[df_hit] = irradiance[:, None] * np.asarray(spec.albedo)[None, :]
    return out.reshape(shape + (3,))


def render_hdr_gt(spec: SceneSpec, camera: Camera, t: float) -> np.ndarray:
    """Linear radiance image (H, W, 3), box-filtered over a supersample grid."""
    origin, dirs = camera.pixel_rays(spec.supersample)
    return shade_rays(spec, origin, dirs, t).mean(axis=2)


def apply_crf(hdr, exposure: float, gamma: float = CRF_GAMMA) -> np.ndarray:
    """8-bit LDR capture: round(255 * clip((E * e)^(1/gamma), 0, 1))."""
    if not exposure > 0:
        raise ContractViolation(f"exposure must be positive, got {exposure}")
    x = np.clip(np.asarray(hdr, dtype=np.float64) * exposure, 0.0, None) ** (1.0 / gamma)
    return np.round(255.0 * np.clip(x, 0.0, 1.0)).astype(np.uint8)


def invert_crf(ldr, exposure: float, gamma: float = CRF_GAMMA) -> np.ndarray:
    return (np.asarray(ldr, dtype=np.float64) / 255.0) ** gamma / exposure


def quantization_step(ldr, exposure: float, gamma: float = CRF_GAMMA) -> np.ndarray:
    """Radiance width of one code value around each LDR code."""
    code = np.asarray(ldr, dtype=np.float64)
    hi = invert_crf(np.minimum(code + 0.5, 255.0), exposure, gamma)
    lo = invert_crf(np.maximum(code - 0.5, 0.0), exposure, gamma)
    return hi - lo


def is_test_frame(time_index: int, camera_id: int, policy: str) -> bool:
    """Split rule. ``interleave`` holds out (camera, time) pairs on a diagonal, so every
    test timestamp is still seen from other cameras; ``time`` holds out whole timestamps.
    Both tag about 15% of frames as test."""
    if policy == "interleave":
        return (time_index + camera_id) % 7 == 3
    if policy == "time":
        return time_index % 7 == 3
    if policy == "none":
        return False
    raise ContractViolation(f"unknown split policy {policy!r}")


# ---------------------------------------------------------------------------
# manifest


@dataclass
class FrameRecord:
    ldr_path: Path
    hdr_path: Path | None
    time: float
    time_index: int
    exposure: float
    camera: Camera
    camera_id: int
    split: str


@dataclass
class Manifest:
    root: Path
    data: dict = field(default_factory=dict)

    @property
    def entries(self) -> list[dict]:
        return self.data["frames"]

    @property
    def times(self) -> list[float]:
        return self.data["times"]

    @property
    def bounds(self):
        return self.data["bounds"]

    @property
    def scene_name(self) -> str:
        return self.data["scene"]["name"]

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2) + "\n"

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / "manifest.json"
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path, check_files: bool = True) -> "Manifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
        if data.get("format") != MANIFEST_FORMAT:
            raise ManifestError(f"{path} is not a {MANIFEST_FORMAT} file")
        m = cls(path.parent, data)
        if check_files:
            for e in m.entries:
                if not (m.root / e["path"]).is_file():
                    raise ManifestError(f"missing file {e['path']} referenced by {path}")
        return m

    def records(self, split: str | None = None) -> list[FrameRecord]:
        out = []
        for e in self.entries:
            if e["kind"] != "ldr" or (split is not None and e["split"] != split):
                continue
            out.append(FrameRecord(
                ldr_path=self.root / e["path"],
                hdr_path=self.root / e["hdr_path"] if e.get("hdr_path") else None,
                time=float(e["time"]),
                time_index=int(e["time_index"]),
                exposure=float(e["exposure"]),
                camera=Camera.from_dict(e["camera"]),
                camera_id=int(e["camera_id"]),
                split=e["split"],
            ))
        return out

    def has_hdr(self) -> bool:
        return any(e["kind"] == "hdr" for e in self.entries)

    def dataset_hash(self) -> str:
        h = hashlib.sha256(self.to_json().encode("utf-8"))
        for e in sorted(self.entries, key=lambda e: e["path"]):
            h.update(e["path"].encode("utf-8"))
            h.update((self.root / e["path"]).read_bytes())
        return h.hexdigest()[:16]


def load_ldr(record: FrameRecord) -> np.ndarray:
    return read_png(record.ldr_path)


def load_hdr(record: FrameRecord) -> np.ndarray:
    if record.hdr_path is None:
        raise ManifestError(f"frame {record.ldr_path.name} has no HDR ground truth")
    return read_pfm(record.hdr_path).astype(np.float64)


def write_dataset(
    spec: SceneSpec,
    out_dir,
    with_hdr: bool = True,
    pattern: str = "stereo",
    split_policy: str = "interleave",
) -> Manifest:
    """Render the scene from every camera and timestep and write PNG/PFM files plus manifest.json.

    ``stereo`` writes every exposure per (camera, time); ``monocular`` cycles one
    exposure per (camera, time).
    """
    if pattern not in PATTERNS:
        raise ContractViolation(f"unknown capture pattern {pattern!r}")
    if split_policy not in SPLIT_POLICIES:
        raise ContractViolation(f"unknown split policy {split_policy!r}")
    out = Path(out_dir)
    try:
        (out / "ldr").mkdir(parents=True, exist_ok=True)
        if with_hdr:
            (out / "hdr").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc

    frames = []
    cams = spec.camera_list()
    times = spec.times()
    n_exp = len(spec.exposures)
    for q, cam in enumerate(cams):
        for i, t in enumerate(times):
            split = "test" if is_test_frame(i, q, split_policy) else "train"
            hdr = render_hdr_gt(spec, cam, float(t))
            hdr_rel = None
            if with_hdr:
                hdr_rel = f"hdr/c{q:02d}_t{i:03d}.pfm"
                write_pfm(out / hdr_rel, hdr)
                frames.append({
                    "kind": "hdr", "path": hdr_rel, "camera_id": q, "time_index": i,
                    "time": float(t), "camera": cam.to_dict(), "split": split,
                })
            if pattern == "stereo":
                exp_ids = range(n_exp)
            else:
                exp_ids = [(i + q) % n_exp]
            for p in exp_ids:
                e = spec.exposures[p]
                rel = f"ldr/c{q:02d}_t{i:03d}_e{p}.png"
                write_png(out / rel, apply_crf(hdr, e))
                frames.append({
                    "kind": "ldr", "path": rel, "camera_id": q, "time_index": i, "time": float(t),
                    "exposure": e, "camera": cam.to_dict(), "split": split, "hdr_path": hdr_rel,
                })
    lo, hi = spec.bounds()
    data = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "scene": spec.to_dict(),
        "pattern": pattern,
        "split_policy": split_policy,
        "with_hdr": bool(with_hdr),
        "times": [float(t) for t in times],
        "exposures": list(spec.exposures),
        "bounds": [lo, hi],
        "crf": {"kind": "gamma", "gamma": CRF_GAMMA},
        "frames": frames,
    }
    manifest = Manifest(out, data)
    manifest.save()
    return manifest
