"""Monte Carlo photon transport through a turbid slab with a binary target plane.

The slab occupies ``0 <= z <= thickness``; light enters at ``z = 0`` moving
along ``+z``.  In transmission geometry the target (a DMD-like mask) sits on
the entry face and the detector on the rear face.  In reflection geometry
the target sits ``target_plane`` mm behind the rear face and the detector
shares the entry face with the source.

Photon ``i`` of state ``f`` draws its random numbers from the Philox
counter ``(block, i, f)`` keyed by the master seed, so tallies are
independent of how photons are split across workers.
"""

from __future__ import annotations

import logging
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .rng import PhotonStreams

log = logging.getLogger(__name__)

C_MM_PER_US = 299792.458
ROULETTE_THRESHOLD = 1e-4
ROULETTE_SURVIVAL = 0.1
MAX_INTERACTIONS = 100_000
_COS_ZERO = 1.0 - 1e-12

# photon fates
EXIT_FRONT = 0
EXIT_REAR = 1
ABSORBED_TARGET = 2
ROULETTE_KILLED = 3
DISCARDED = 4
IN_FLIGHT = -1

FATE_NAMES = {
    EXIT_FRONT: "front",
    EXIT_REAR: "rear",
    ABSORBED_TARGET: "target",
    ROULETTE_KILLED: "roulette",
    DISCARDED: "discarded",
}

GEOMETRIES = ("reflection", "transmission")


@dataclass(frozen=True)
class PhantomSpec:
    """Optical parameters of a homogeneous slab (lengths in mm)."""

    mu_s: float = 6.0
    mu_a: float = 0.01
    g: float = 0.9
    thickness: float = 5.0
    refractive_index: float = 1.41
    fresnel: bool = False

    def __post_init__(self):
        if self.mu_s < 0 or self.mu_a < 0:
            raise ValueError("mu_s and mu_a must be non-negative")
        if not -1.0 < self.g < 1.0:
            raise ValueError("anisotropy g must lie in (-1, 1)")
        if self.thickness < 0:
            raise ValueError("thickness must be non-negative")
        if self.refractive_index < 1.0:
            raise ValueError("refractive index must be >= 1")


@dataclass(frozen=True)
class SourceSpec:
    beam_radius: float = 15.0
    profile: str = "disk"  # collimated uniform disk or "pencil"
    wavelength_nm: float = 850.0  # documentation only
    fluence: float = 0.021  # mW/mm^2, documentation only

    def __post_init__(self):
        if self.beam_radius <= 0:
            raise ValueError("beam_radius must be positive")
        if self.profile not in ("disk", "pencil"):
            raise ValueError(f"unknown source profile {self.profile!r}")


@dataclass(frozen=True)
class DetectorSpec:
    """Pixel grid centred on the optical axis (plus ``offset``), pitch in mm."""

    shape: tuple[int, int] = (64, 64)
    pitch: float = 0.375
    offset: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.pitch <= 0 or min(self.shape) <= 0:
            raise ValueError("detector needs a positive pitch and non-empty grid")

    def pixel_index(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Flat row-major pixel index for lateral positions, -1 when off the grid."""
        h, w = self.shape
        col = np.floor((x - self.offset[0]) / self.pitch + w / 2.0)
        row = np.floor((y - self.offset[1]) / self.pitch + h / 2.0)
        inside = (col >= 0) & (col < w) & (row >= 0) & (row < h) & np.isfinite(col) & np.isfinite(row)
        idx = np.full(np.shape(x), -1, dtype=np.int64)
        idx[inside] = row[inside].astype(np.int64) * w + col[inside].astype(np.int64)
        return idx


@dataclass(frozen=True, eq=False)
class TargetFrame:
    """A binary target (True = white/transmitting) shown from onset for duration (us)."""

    image: np.ndarray
    onset_us: int
    duration_us: int

    def __post_init__(self):
        object.__setattr__(self, "image", np.asarray(self.image, dtype=bool))
        if self.duration_us <= 0 or self.onset_us < 0:
            raise ValueError("target frames need onset >= 0 and duration > 0")


@dataclass(frozen=True)
class SceneSpec:
    geometry: str = "transmission"
    source: SourceSpec = field(default_factory=SourceSpec)
    detector: DetectorSpec = field(default_factory=DetectorSpec)
    target_plane: float = 0.0
    target_frames: tuple = ()
    rise_us: int = 0  # display switching time

    def __post_init__(self):
        if self.geometry not in GEOMETRIES:
            raise ValueError(f"geometry must be one of {GEOMETRIES}")
        if self.target_plane < 0:
            raise ValueError("target plane must not sit inside the phantom")
        object.__setattr__(self, "target_frames", tuple(self.target_frames))
        for frame in self.target_frames:
            if frame.image.shape != tuple(self.detector.shape):
                raise ValueError("target images must match the detector grid")
            if 2 * self.rise_us > frame.duration_us:
                raise ValueError("rise time longer than half a flash")


@dataclass(frozen=True, eq=False)
class IntensityFrame:
    pixels: np.ndarray
    t: int

    def __post_init__(self):
        if np.any(self.pixels < 0):
            raise ValueError("intensity frames must be non-negative")


@dataclass(frozen=True)
class PhotonExit:
    position: tuple[float, float, float]
    direction: tuple[float, float, float]
    weight: float
    path_length: float
    time_of_flight_us: float
    n_scatter: int
    fate: str


# --------------------------------------------------------------- sampling

def mfp_count(spec: PhantomSpec, geometry: str) -> float:
    """Optical thickness in mean free paths; reflection light crosses the slab twice."""
    if geometry not in GEOMETRIES:
        raise ValueError(f"geometry must be one of {GEOMETRIES}")
    passes = 2 if geometry == "reflection" else 1
    return spec.mu_s * spec.thickness * passes


def sample_step(u, mu_t: float):
    """Free path ``-ln(u) / mu_t`` for a uniform deviate ``u`` in (0, 1]."""
    if mu_t <= 0:
        raise ValueError("mu_t must be positive")
    u = np.asarray(u, dtype=np.float64)
    if np.any(u <= 0) or np.any(u > 1):
        raise ValueError("deviate must lie in (0, 1]")
    step = -np.log(u) / mu_t
    return float(step) if step.ndim == 0 else step


def sample_hg(g: float, u):
    """Henyey-Greenstein deflection cosine by inversion of its CDF."""
    u = np.asarray(u, dtype=np.float64)
    if g == 0.0:
        cos = 2.0 * u - 1.0
    else:
        frac = (1.0 - g * g) / (1.0 - g + 2.0 * g * u)
        cos = (1.0 + g * g - frac * frac) / (2.0 * g)
    cos = np.clip(cos, -1.0, 1.0)
    return float(cos) if cos.ndim == 0 else cos


def _rotate(ux, uy, uz, cos_t, phi):
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t * cos_t))
    cos_p, sin_p = np.cos(phi), np.sin(phi)
    normal = np.abs(uz) > _COS_ZERO
    temp = np.sqrt(np.maximum(1e-300, 1.0 - uz * uz))
    nx = np.where(
        normal,
        sin_t * cos_p,
        sin_t * (ux * uz * cos_p - uy * sin_p) / temp + ux * cos_t,
    )
    ny = np.where(
        normal,
        sin_t * sin_p,
        sin_t * (uy * uz * cos_p + ux * sin_p) / temp + uy * cos_t,
    )
    nz = np.where(normal, np.sign(uz) * cos_t, -sin_t * cos_p * temp + uz * cos_t)
    norm = np.sqrt(nx * nx + ny * ny + nz * nz)
    return nx / norm, ny / norm, nz / norm


def _fresnel(n_in: float, n_out: float, cos_i):
    """Unpolarised Fresnel reflectance and transmitted cosine (MCML convention)."""
    cos_i = np.abs(cos_i)
    sin_i = np.sqrt(np.maximum(0.0, 1.0 - cos_i * cos_i))
    sin_t = n_in * sin_i / n_out
    total = sin_t >= 1.0
    cos_t = np.sqrt(np.maximum(0.0, 1.0 - sin_t * sin_t))
    with np.errstate(divide="ignore", invalid="ignore"):
        rs = ((n_in * cos_i - n_out * cos_t) / (n_in * cos_i + n_out * cos_t)) ** 2
        rp = ((n_in * cos_t - n_out * cos_i) / (n_in * cos_t + n_out * cos_i)) ** 2
    r = np.where(total, 1.0, 0.5 * (rs + rp))
    return np.nan_to_num(r, nan=1.0), cos_t


# ----------------------------------------------------------------- engine

@dataclass
class PhotonBatch:
    """Final state of a batch of photons (one entry per photon)."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    ux: np.ndarray
    uy: np.ndarray
    uz: np.ndarray
    weight: np.ndarray
    path: np.ndarray
    air_path: np.ndarray
    n_scatter: np.ndarray
    fate: np.ndarray

    @classmethod
    def concatenate(cls, batches: Sequence["PhotonBatch"]) -> "PhotonBatch":
        names = cls.__dataclass_fields__
        return cls(**{n: np.concatenate([getattr(b, n) for b in batches]) for n in names})

    def fate_counts(self) -> dict[str, int]:
        return {name: int(np.count_nonzero(self.fate == code)) for code, name in FATE_NAMES.items()}


def _launch(source: SourceSpec, u: np.ndarray):
    if source.profile == "pencil":
        return np.zeros(len(u)), np.zeros(len(u))
    r = source.beam_radius * np.sqrt(u[:, 0])
    phi = 2.0 * math.pi * u[:, 1]
    return r * np.cos(phi), r * np.sin(phi)


def transport(
    phantom: PhantomSpec,
    scene: SceneSpec,
    mask: np.ndarray | None,
    photon_ids: np.ndarray,
    seed: int,
    frame: int = 0,
) -> PhotonBatch:
    """Propagate the photons ``photon_ids`` and return their final states.

    ``mask`` is the boolean target on the detector grid (True = white) or
    ``None`` for a scene without a target.
    """
    streams = PhotonStreams(seed, frame)
    ids = np.asarray(photon_ids, dtype=np.uint64)
    n = len(ids)
    d = float(phantom.thickness)
    mu_s, mu_a, g = phantom.mu_s, phantom.mu_a, phantom.g
    n_rel = phantom.refractive_index
    reflection = scene.geometry == "reflection"
    flat_mask = None if mask is None else np.asarray(mask, dtype=bool).ravel()
    det = scene.detector

    blocks = np.zeros(n, dtype=np.uint64)
    u0 = streams.block(ids, blocks)
    blocks += np.uint64(1)
    x, y = _launch(scene.source, u0)
    z = np.zeros(n)
    ux, uy, uz = np.zeros(n), np.zeros(n), np.ones(n)
    w = np.ones(n)
    path = np.zeros(n)
    air = np.zeros(n)
    nsc = np.zeros(n, dtype=np.int64)
    fate = np.full(n, IN_FLIGHT, dtype=np.int8)

    if flat_mask is not None and not reflection:
        pix = det.pixel_index(x, y)
        blocked = (pix < 0) | ~flat_mask[np.maximum(pix, 0)]
        fate[blocked] = ABSORBED_TARGET

    active = np.flatnonzero(fate == IN_FLIGHT)
    iterations = 0
    while active.size:
        iterations += 1
        if iterations > MAX_INTERACTIONS:
            fate[active] = DISCARDED
            log.warning("discarding %d photons after %d interactions", active.size, MAX_INTERACTIONS)
            break
        u = streams.block(ids[active], blocks[active])
        blocks[active] += np.uint64(1)
        ax, ay, az = x[active], y[active], z[active]
        aux, auy, auz = ux[active], uy[active], uz[active]
        aw, apath, aair, ansc = w[active], path[active], air[active], nsc[active]
        afate = fate[active]

        with np.errstate(divide="ignore"):
            step = -np.log(u[:, 0]) / mu_s if mu_s > 0 else np.full(active.size, np.inf)
            dist_b = np.where(auz > 0, (d - az) / auz, np.where(auz < 0, -az / auz, np.inf))
        hit = step >= dist_b
        seg = np.where(hit, dist_b, step)
        seg = np.where(np.isfinite(seg), seg, 0.0)
        ax = ax + aux * seg
        ay = ay + auy * seg
        az = np.where(hit, np.where(auz > 0, d, 0.0), az + auz * seg)
        aw = aw * np.exp(-mu_a * seg)
        apath = apath + seg

        # interior scattering
        sc = ~hit
        if np.any(sc):
            cos_t = sample_hg(g, u[sc, 1])
            cos_t = np.atleast_1d(cos_t)
            nx, ny, nz = _rotate(aux[sc], auy[sc], auz[sc], cos_t, 2.0 * math.pi * u[sc, 2])
            aux[sc], auy[sc], auz[sc] = nx, ny, nz
            ansc[sc] += 1
            low = sc & (aw < ROULETTE_THRESHOLD)
            survive = low & (u[:, 3] <= ROULETTE_SURVIVAL)
            aw = np.where(survive, aw / ROULETTE_SURVIVAL, aw)
            dead = low & ~survive
            aw = np.where(dead, 0.0, aw)
            afate[dead] = ROULETTE_KILLED

        # boundary crossings
        if np.any(hit):
            leaving = hit.copy()
            if phantom.fresnel and n_rel != 1.0:
                r, cos_out = _fresnel(n_rel, 1.0, auz)
                bounce = hit & (u[:, 3] <= r)
                auz = np.where(bounce, -auz, auz)
                leaving = hit & ~bounce
                # refract the escaping direction
                scale = np.where(leaving, n_rel, 1.0)
                aux, auy = aux * scale, auy * scale
                auz = np.where(leaving, np.sign(auz) * cos_out, auz)
            front = leaving & (auz < 0)
            rear = leaving & (auz > 0)
            afate[front] = EXIT_FRONT
            if reflection and flat_mask is not None:
                rx = ax + aux * np.where(rear, scene.target_plane / np.where(rear, auz, 1.0), 0.0)
                ry = ay + auy * np.where(rear, scene.target_plane / np.where(rear, auz, 1.0), 0.0)
                out_leg = np.where(rear, scene.target_plane / np.where(rear, auz, 1.0), 0.0)
                pix = det.pixel_index(rx, ry)
                white = rear & (pix >= 0) & flat_mask[np.maximum(pix, 0)]
                black = rear & ~white
                afate[black] = ABSORBED_TARGET
                ax = np.where(rear, rx, ax)
                ay = np.where(rear, ry, ay)
                aair = aair + out_leg
                if np.any(white):
                    # Lambertian return towards the slab
                    cos_r = np.sqrt(u[white, 1])
                    sin_r = np.sqrt(1.0 - cos_r * cos_r)
                    phi = 2.0 * math.pi * u[white, 2]
                    aux[white] = sin_r * np.cos(phi)
                    auy[white] = sin_r * np.sin(phi)
                    auz[white] = -cos_r
                    back = scene.target_plane / np.maximum(cos_r, 1e-12)
                    ax[white] += aux[white] * back
                    ay[white] += auy[white] * back
                    aair[white] += back
                    az[white] = d
            else:
                afate[rear] = EXIT_REAR

        bad = ~(
            np.isfinite(ax) & np.isfinite(ay) & np.isfinite(az) & np.isfinite(aw) & np.isfinite(auz)
        ) & (afate == IN_FLIGHT)
        if np.any(bad):
            afate[bad] = DISCARDED

        x[active], y[active], z[active] = ax, ay, az
        ux[active], uy[active], uz[active] = aux, auy, auz
        w[active], path[active], air[active], nsc[active] = aw, apath, aair, ansc
        fate[active] = afate
        active = active[afate == IN_FLIGHT]

    return PhotonBatch(x, y, z, ux, uy, uz, w, path, air, nsc, fate)


def propagate_photon(phantom: PhantomSpec, scene: SceneSpec, seed: int, photon_id: int = 0,
                     frame: int = 0, mask: np.ndarray | None = None) -> PhotonExit:
    """Propagate a single photon; its random stream is fixed by ``(seed, frame, photon_id)``."""
    b = transport(phantom, scene, mask, np.array([photon_id]), seed, frame)
    total = float(b.path[0] + b.air_path[0])
    tof = (b.path[0] * phantom.refractive_index + b.air_path[0]) / C_MM_PER_US
    return PhotonExit(
        position=(float(b.x[0]), float(b.y[0]), float(b.z[0])),
        direction=(float(b.ux[0]), float(b.uy[0]), float(b.uz[0])),
        weight=float(b.weight[0]),
        path_length=total,
        time_of_flight_us=float(tof),
        n_scatter=int(b.n_scatter[0]),
        fate=FATE_NAMES[int(b.fate[0])],
    )


def _transport_chunk(args):
    return transport(*args)


def run_photons(phantom, scene, mask, n_photons: int, seed: int, frame: int = 0,
                jobs: int = 1, chunk: int = 200_000) -> PhotonBatch:
    """Propagate photons ``0 .. n_photons-1`` in chunks, optionally across processes.

    Chunks are concatenated in photon order, so the result does not depend on ``jobs``.
    """
    if n_photons < 1:
        raise ValueError("need at least one photon")
    bounds = list(range(0, n_photons, chunk)) + [n_photons]
    work = [
        (phantom, scene, mask, np.arange(lo, hi, dtype=np.uint64), seed, frame)
        for lo, hi in zip(bounds[:-1], bounds[1:])
    ]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_transport_chunk, work))
    else:
        parts = [_transport_chunk(a) for a in work]
    return PhotonBatch.concatenate(parts)


def detector_image(batch: PhotonBatch, scene: SceneSpec) -> np.ndarray:
    """Sum exit weights into detector pixels (rear face for transmission, front for reflection)."""
    face = EXIT_REAR if scene.geometry == "transmission" else EXIT_FRONT
    h, w = scene.detector.shape
    sel = batch.fate == face
    pix = scene.detector.pixel_index(batch.x[sel], batch.y[sel])
    keep = pix >= 0
    # bincount accumulates in photon order: identical sums for any chunking
    img = np.bincount(pix[keep], weights=batch.weight[sel][keep], minlength=h * w)
    return img.reshape(h, w)


def simulate_state(phantom, scene, mask, n_photons, seed, frame=0, jobs=1):
    batch = run_photons(phantom, scene, mask, n_photons, seed, frame, jobs)
    counts = batch.fate_counts()
    if counts["discarded"]:
        log.warning("state %d: %d photons discarded", frame, counts["discarded"])
    return detector_image(batch, scene), counts


def frame_schedule(scene: SceneSpec) -> list[tuple[int, int]]:
    """``(time_us, state)`` pairs; state 0 is target-off, state j is target j-1 shown.

    Each flash ramps up over ``rise_us`` after onset, holds, and ramps down so
    that it is fully off at ``onset + duration``.
    """
    sched = [(0, 0)]
    for j, tf in enumerate(scene.target_frames, start=1):
        on, off = tf.onset_us, tf.onset_us + tf.duration_us
        for t, state in ((on, 0), (on + scene.rise_us, j), (off - scene.rise_us, j), (off, 0)):
            if t < sched[-1][0]:
                raise ValueError("target frames overlap or are not time-sorted")
            if (t, state) != sched[-1]:
                sched.append((t, state))
    return sched


def scene_triggers(scene: SceneSpec) -> list[tuple[int, str]]:
    trig = []
    for tf in scene.target_frames:
        trig.append((tf.onset_us, "rise"))
        trig.append((tf.onset_us + tf.duration_us, "fall"))
    return trig


def simulate_frames(phantom: PhantomSpec, scene: SceneSpec, n_photons: int, seed: int,
                    jobs: int = 1) -> list[IntensityFrame]:
    """Detector frames following the target on/off schedule.

    One Monte Carlo run per distinct state (off, and each target shown); the
    off state uses an all-black target.
    """
    blank = np.zeros(scene.detector.shape, dtype=bool)
    masks = [blank] + [tf.image for tf in scene.target_frames]
    images: dict[int, np.ndarray] = {}
    frames = []
    for t, state in frame_schedule(scene):
        if state not in images:
            images[state], _ = simulate_state(phantom, scene, masks[state], n_photons, seed, state, jobs)
        frames.append(IntensityFrame(images[state], int(t)))
    return frames


# ----------------------------------------------------------------- export

FRAME_MAGIC = b"IFR1"


def write_frames(frames: Sequence[IntensityFrame], path) -> None:
    h, w = frames[0].pixels.shape if frames else (0, 0)
    with open(path, "wb") as fh:
        fh.write(FRAME_MAGIC + struct.pack("<HHI", h, w, len(frames)))
        for fr in frames:
            fh.write(struct.pack("<Q", fr.t))
            fh.write(np.asarray(fr.pixels, dtype="<f4").tobytes())


def read_frames(path) -> list[IntensityFrame]:
    buf = Path(path).read_bytes()
    if buf[:4] != FRAME_MAGIC:
        raise ValueError("not an IFR1 frame stack")
    h, w, n = struct.unpack_from("<HHI", buf, 4)
    off, out = 12, []
    for _ in range(n):
        (t,) = struct.unpack_from("<Q", buf, off)
        off += 8
        px = np.frombuffer(buf, dtype="<f4", count=h * w, offset=off).reshape(h, w)
        off += 4 * h * w
        out.append(IntensityFrame(px.astype(np.float64), t))
    return out
