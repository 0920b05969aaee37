"""Desk-scale world simulator.

Renders deterministic camera streams with a rare target appearing in
scheduled sighting episodes among distractor episodes, over procedurally
textured backgrounds whose statistics can drift mid-run (a weather-shift
analog). Targets are parameterized shapes with a distinctive intensity
signature; sizes scale inversely with range; thermal frames render as
intensity signatures on a cool background. Ground truth is attached to
every frame.

Everything derives from (config, seed): schedules from a master stream,
per-frame pixel noise from (seed, camera, frame index), so streams are
reproducible and regenerable frame by frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .boxes import BBox, clip_box
from .edge import FrameRecord, GroundTruthObject
from .images import RasterImage
from .labelaug import stable_seed
from .metrics import RANGE_FAR, RANGE_NEAR, SightingCase
from .scenario import ScenarioConfig, WorldSpec

# appearance constants (gray intensities; RGB gets fixed channel offsets)
FIELD_BODY = 40.0
FIELD_BODY_TEXTURE = 5.0
FIELD_CREST = 205.0
WEB_BODY = 22.0
WEB_BODY_TEXTURE = 3.0
WEB_CREST = 228.0
WEB_BACKGROUND = 182.0
TARGET_ASPECT = 0.45
HERON_BODY = 62.0
HERON_ASPECT = 0.32
VEHICLE_BODY = 185.0
VEGETATION_BODY = 76.0
SPECKLE_BODY = 48.0
THERMAL_TARGET = 215.0
THERMAL_HERON = 203.0
THERMAL_VEHICLE = 188.0
RGB_CHANNEL_OFFSETS = (-3.0, 2.0, -1.0)


@dataclass(frozen=True)
class Episode:
    episode_id: str
    kind: str  # class label
    start_s: float
    duration_s: float
    range_m: Optional[float]
    x_path: Tuple[float, float]  # fractional start/end of the crossing
    y_frac: float

    @property
    def end_s(self) -> float:
        return self.start_s + self.duration_s

    def active_at(self, t: float) -> bool:
        return self.start_s <= t < self.end_s

    def position(self, t: float) -> Tuple[float, float]:
        u = 0.0 if self.duration_s == 0 else (t - self.start_s) / self.duration_s
        x = self.x_path[0] + (self.x_path[1] - self.x_path[0]) * u
        return x, self.y_frac


@dataclass
class WorldSchedule:
    cases: List[Episode]
    distractors: List[Episode]
    drift_start_s: Optional[float]

    def target_spans(self) -> List[Tuple[float, float]]:
        return [(c.start_s, c.end_s) for c in self.cases]


def build_schedule(world: WorldSpec, total_days: float, seed: int, target: str) -> WorldSchedule:
    """Poisson episode schedule for targets and distractors."""
    rng = np.random.default_rng(stable_seed(seed, "schedule"))
    total_s = total_days * world.day_seconds
    n_cases = int(rng.poisson(world.sightings_per_week * total_days / 7.0))
    cases = []
    for i in range(n_cases):
        duration = float(rng.uniform(*world.case_duration_s))
        start = float(rng.uniform(0.0, max(total_s - duration, 1.0)))
        near = bool(rng.random() < world.near_fraction)
        band = world.range_near_m if near else world.range_far_m
        cases.append(
            Episode(
                episode_id=f"case-{i:04d}",
                kind=target,
                start_s=start,
                duration_s=duration,
                range_m=float(rng.uniform(*band)),
                x_path=_crossing(rng),
                y_frac=float(rng.uniform(0.4, 0.75)),
            )
        )
    cases.sort(key=lambda e: e.start_s)
    distractors = []
    for kind in sorted(world.distractor_rates_per_day):
        rate = world.distractor_rates_per_day[kind]
        n = int(rng.poisson(rate * total_days))
        for i in range(n):
            duration = float(rng.uniform(*world.distractor_duration_s))
            start = float(rng.uniform(0.0, max(total_s - duration, 1.0)))
            distractors.append(
                Episode(
                    episode_id=f"{kind}-{i:04d}",
                    kind=kind,
                    start_s=start,
                    duration_s=duration,
                    range_m=float(rng.uniform(40.0, 170.0)),
                    x_path=_crossing(rng),
                    y_frac=float(rng.uniform(0.3, 0.85)),
                )
            )
    distractors.sort(key=lambda e: (e.start_s, e.episode_id))
    drift_start = None
    if world.drift_day is not None:
        drift_start = world.drift_day * world.day_seconds
    return WorldSchedule(cases=cases, distractors=distractors, drift_start_s=drift_start)


def _crossing(rng: np.random.Generator) -> Tuple[float, float]:
    a = float(rng.uniform(0.1, 0.45))
    b = float(rng.uniform(0.55, 0.9))
    return (a, b) if rng.random() < 0.5 else (b, a)


# --- rendering ---------------------------------------------------------------


def _value_noise(h: int, w: int, lo: float, hi: float, rng: np.random.Generator) -> np.ndarray:
    """Coarse random grid bilinearly upsampled: a cheap smooth texture."""
    gh, gw = 7, 9
    grid = rng.uniform(lo, hi, size=(gh, gw))
    ys = np.linspace(0, gh - 1, h)
    xs = np.linspace(0, gw - 1, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = grid[y0][:, x0] * (1 - fx) + grid[y0][:, x1] * fx
    bot = grid[y1][:, x0] * (1 - fx) + grid[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def _ellipse_mask(h: int, w: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    return ((ys - cy) / max(ry, 0.5)) ** 2 + ((xs - cx) / max(rx, 0.5)) ** 2 <= 1.0


def _stamp_target(canvas, cx, cy, height, style: str, modality: str, rng) -> Optional[BBox]:
    """Body ellipse with a small bright crest on top; returns the GT box."""
    h, w = canvas.shape
    ry = height / 2.0
    rx = max(1.0, TARGET_ASPECT * height / 2.0)
    if modality == "thermal":
        body, crest, texture = THERMAL_TARGET, THERMAL_TARGET + 12.0, 4.0
    elif style == "web":
        body, crest, texture = WEB_BODY, WEB_CREST, WEB_BODY_TEXTURE
    else:
        body, crest, texture = FIELD_BODY, FIELD_CREST, FIELD_BODY_TEXTURE
    mask = _ellipse_mask(h, w, cy, cx, ry, rx)
    canvas[mask] = body + rng.uniform(-texture, texture, size=int(mask.sum()))
    crest_r = max(1.0, 0.14 * height)
    crest_mask = _ellipse_mask(h, w, cy - ry, cx, crest_r, crest_r)
    canvas[crest_mask] = crest
    box = clip_box(
        BBox(cx - max(rx, crest_r) - 1, cy - ry - crest_r - 1, cx + max(rx, crest_r) + 1, cy + ry + 1),
        _dims_of(canvas),
    )
    return box


def _stamp_heron(canvas, cx, cy, height, modality: str, rng) -> Optional[BBox]:
    h, w = canvas.shape
    ry = height / 2.0
    rx = max(1.0, HERON_ASPECT * height / 2.0)
    body = THERMAL_HERON if modality == "thermal" else HERON_BODY
    mask = _ellipse_mask(h, w, cy, cx, ry, rx)
    canvas[mask] = body + rng.uniform(-5.0, 5.0, size=int(mask.sum()))
    return clip_box(BBox(cx - rx - 1, cy - ry - 1, cx + rx + 1, cy + ry + 1), _dims_of(canvas))


def _stamp_vehicle(canvas, cx, cy, height, modality: str, rng) -> Optional[BBox]:
    h, w = canvas.shape
    hh = height / 2.0
    hw = 1.2 * height
    body = THERMAL_VEHICLE if modality == "thermal" else VEHICLE_BODY
    y0, y1 = int(max(0, cy - hh)), int(min(h, cy + hh))
    x0, x1 = int(max(0, cx - hw)), int(min(w, cx + hw))
    if y0 >= y1 or x0 >= x1:
        return None
    canvas[y0:y1, x0:x1] = body + rng.uniform(-6.0, 6.0, size=(y1 - y0, x1 - x0))
    band = max(1, (y1 - y0) // 4)
    canvas[y1 - band : y1, x0:x1] = 55.0
    return clip_box(BBox(x0, y0, x1, y1), _dims_of(canvas))


def _stamp_vegetation(canvas, cx, cy, height, rng) -> Optional[BBox]:
    h, w = canvas.shape
    ry = height / 2.0
    rx = max(1.0, 0.55 * height)
    mask = _ellipse_mask(h, w, cy, cx, ry, rx)
    canvas[mask] = VEGETATION_BODY + rng.uniform(-14.0, 14.0, size=int(mask.sum()))
    return clip_box(BBox(cx - rx - 1, cy - ry - 1, cx + rx + 1, cy + ry + 1), _dims_of(canvas))


def _stamp_shadow(canvas, cx, cy, height, rng) -> Optional[BBox]:
    h, w = canvas.shape
    ry = height / 2.0
    rx = max(1.0, 0.8 * height)
    mask = _ellipse_mask(h, w, cy, cx, ry, rx)
    canvas[mask] = 0.55 * canvas[mask] + 0.45 * (canvas[mask] - 28.0)
    return clip_box(BBox(cx - rx - 1, cy - ry - 1, cx + rx + 1, cy + ry + 1), _dims_of(canvas))


def _dims_of(canvas):
    from .boxes import ImageDims

    return ImageDims(width=canvas.shape[1], height=canvas.shape[0])


class WorldSim:
    """Frame generator for one scenario; every frame derives from the seed."""

    def __init__(self, config: ScenarioConfig, total_days: Optional[float] = None):
        self.config = config
        self.world = config.world
        self.total_days = config.total_days if total_days is None else total_days
        self.schedule = build_schedule(
            self.world, self.total_days, config.seed, config.target_class
        )

    def _background(self, modality: str, drifted: bool, rng) -> np.ndarray:
        w, h = self.world.frame_width, self.world.frame_height
        if modality == "thermal":
            base = _value_noise(h, w, 36.0, 60.0, rng)
            return base + rng.normal(0.0, 3.0, size=(h, w))
        lo, hi = 100.0, 126.0
        if drifted:
            lo += self.world.drift_level_shift
            hi += self.world.drift_level_shift
        base = _value_noise(h, w, lo, hi, rng)
        noise = rng.normal(0.0, 4.0, size=(h, w))
        canvas = base + noise
        if drifted:
            n_speckle = rng.poisson(self.world.drift_speckle_per_frame)
            for _ in range(n_speckle):
                cy = rng.uniform(4, h - 4)
                cx = rng.uniform(4, w - 4)
                r = rng.uniform(1.5, 2.6)
                mask = _ellipse_mask(h, w, cy, cx, r, r * rng.uniform(1.0, 1.8))
                canvas[mask] = SPECKLE_BODY + rng.uniform(-4.0, 4.0)
        return canvas

    def _stamp_episode(self, canvas, episode: Episode, t: float, modality: str, rng):
        if modality == "thermal" and episode.kind in ("vegetation", "shadow"):
            return None
        xf, yf = episode.position(t)
        h, w = canvas.shape
        cx, cy = xf * w, yf * h
        height = _apparent_height(self.world, episode.range_m, h)
        if episode.kind == self.config.target_class:
            return _stamp_target(canvas, cx, cy, height, "field", modality, rng)
        if episode.kind == "heron":
            return _stamp_heron(canvas, cx, cy, height, modality, rng)
        if episode.kind == "vehicle":
            return _stamp_vehicle(canvas, cx, cy, height, modality, rng)
        if episode.kind == "vegetation":
            return _stamp_vegetation(canvas, cx, cy, height, rng)
        if episode.kind == "shadow":
            return _stamp_shadow(canvas, cx, cy, height, rng)
        return _stamp_heron(canvas, cx, cy, height, modality, rng)

    def render_frame(self, camera_index: int, frame_index: int) -> FrameRecord:
        camera = self.world.cameras[camera_index]
        t = frame_index * self.world.frame_interval_s
        rng = np.random.default_rng(
            stable_seed(self.config.seed, "frame", camera.camera_id, frame_index)
        )
        drifted = (
            self.schedule.drift_start_s is not None and t >= self.schedule.drift_start_s
        )
        canvas = self._background(camera.modality, drifted, rng)
        truth: List[GroundTruthObject] = []
        for episode in self.schedule.cases + self.schedule.distractors:
            if not episode.active_at(t):
                continue
            box = self._stamp_episode(canvas, episode, t, camera.modality, rng)
            if box is not None:
                is_target = episode.kind == self.config.target_class
                truth.append(
                    GroundTruthObject(
                        box=box,
                        label=episode.kind,
                        range_m=episode.range_m if is_target else None,
                    )
                )
        return FrameRecord(
            frame_id=f"{camera.camera_id}-{frame_index:06d}",
            camera_id=camera.camera_id,
            modality=camera.modality,
            timestamp=t,
            image=_to_image(canvas, camera.modality),
            ground_truth=tuple(truth),
        )

    def frames(self, start_day: float, end_day: float) -> Iterator[FrameRecord]:
        """Frames of all cameras interleaved by timestamp."""
        first = int(round(start_day * self.world.frames_per_day))
        last = int(round(end_day * self.world.frames_per_day))
        for frame_index in range(first, last):
            for camera_index in range(len(self.world.cameras)):
                yield self.render_frame(camera_index, frame_index)


def _apparent_height(world: WorldSpec, range_m: Optional[float], frame_h: int) -> float:
    r = range_m if range_m is not None else 90.0
    return float(np.clip(world.focal_px_m / r, 5.0, 0.45 * frame_h))


def _to_image(canvas: np.ndarray, modality: str) -> RasterImage:
    if modality == "thermal":
        px = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)[:, :, None]
        return RasterImage(px)
    channels = [
        np.clip(np.rint(canvas + off), 0, 255).astype(np.uint8)
        for off in RGB_CHANNEL_OFFSETS
    ]
    return RasterImage(np.stack(channels, axis=2))


def simulate_world(config: ScenarioConfig) -> Iterator[FrameRecord]:
    """The full scenario stream (all iterations' windows back to back)."""
    sim = WorldSim(config)
    return sim.frames(0.0, config.total_days)


# --- object-centric "web-sourced" analog images ------------------------------


@dataclass(frozen=True)
class WebImage:
    image_id: str
    image: RasterImage
    objects: Tuple[Tuple[BBox, str], ...]


def make_web_images(config: ScenarioConfig, modality: str, count: int) -> List[WebImage]:
    """Object-centric target images in the "web" style: one large, clean
    instance on a plain background. These feed stage-1 labelling and
    instance extraction."""
    out = []
    size = 64
    for k in range(count):
        rng = np.random.default_rng(stable_seed(config.seed, "web", modality, k))
        if modality == "thermal":
            canvas = np.full((size, size), 28.0) + rng.normal(0.0, 2.0, size=(size, size))
        else:
            canvas = np.full((size, size), WEB_BACKGROUND) + rng.normal(0.0, 2.5, size=(size, size))
        height = float(rng.uniform(34.0, 50.0))
        cx = size / 2.0 + float(rng.uniform(-6.0, 6.0))
        cy = size / 2.0 + float(rng.uniform(-4.0, 4.0))
        box = _stamp_target(canvas, cx, cy, height, "web", modality, rng)
        assert box is not None
        out.append(
            WebImage(
                image_id=f"web-{modality}-{k:03d}",
                image=_to_image(canvas, modality),
                objects=((box, config.target_class),),
            )
        )
    return out


def render_background_frames(
    config: ScenarioConfig, modality: str, count: int, tag: str = "bg", drifted: bool = False,
    distractor_classes: Sequence[str] = (),
) -> List[FrameRecord]:
    """Standalone frames outside the scheduled stream: clean backgrounds, or
    negative frames carrying distractor objects."""
    sim = WorldSim(config)
    frames = []
    for k in range(count):
        rng = np.random.default_rng(stable_seed(config.seed, tag, modality, k, drifted))
        canvas = sim._background(modality, drifted, rng)
        truth: List[GroundTruthObject] = []
        for kind in distractor_classes:
            if rng.random() < 0.55:
                h_px = float(rng.uniform(8.0, 30.0))
                cx = float(rng.uniform(10, config.world.frame_width - 10))
                cy = float(rng.uniform(10, config.world.frame_height - 10))
                episode_rng = rng
                if kind == "heron":
                    box = _stamp_heron(canvas, cx, cy, h_px, modality, episode_rng)
                elif kind == "vehicle":
                    box = _stamp_vehicle(canvas, cx, cy, h_px, modality, episode_rng)
                elif kind == "vegetation" and modality != "thermal":
                    box = _stamp_vegetation(canvas, cx, cy, h_px, episode_rng)
                elif kind == "shadow" and modality != "thermal":
                    box = _stamp_shadow(canvas, cx, cy, h_px, episode_rng)
                else:
                    box = None
                if box is not None:
                    truth.append(GroundTruthObject(box=box, label=kind, range_m=None))
        frames.append(
            FrameRecord(
                frame_id=f"{tag}-{modality}-{k:04d}",
                camera_id=f"{tag}-cam",
                modality=modality,
                timestamp=float(k),
                image=_to_image(canvas, modality),
                ground_truth=tuple(truth),
            )
        )
    return frames


# --- fixed held-out evaluation set -------------------------------------------


@dataclass
class HoldoutSet:
    """Fixed evaluation data reused for every model version."""

    frames: Dict[str, FrameRecord]
    cases: List[SightingCase]
    negatives_rgb: List[str]
    negatives_thermal: List[str]

    def positive_frames(self, modality: str) -> List[str]:
        return [f for c in self.cases if c.modality == modality for f in c.frame_ids]


def build_holdout(config: ScenarioConfig) -> HoldoutSet:
    """Deterministic held-out stream with fixed case counts per range group,
    rendered with pre-drift statistics."""
    sim = WorldSim(config)
    spec = config.holdout
    frames: Dict[str, FrameRecord] = {}
    cases: List[SightingCase] = []

    def make_case(case_id: str, modality: str, range_band: Tuple[float, float], group: str,
                  case_index: int) -> None:
        rng = np.random.default_rng(stable_seed(config.seed, "holdout", case_id))
        range_m = float(rng.uniform(*range_band))
        xf0, xf1 = _crossing(rng)
        yf = float(rng.uniform(0.4, 0.75))
        ids = []
        for k in range(spec.frames_per_case):
            frame_rng = np.random.default_rng(stable_seed(config.seed, "holdout", case_id, k))
            canvas = sim._background(modality, False, frame_rng)
            h, w = canvas.shape
            u = k / max(spec.frames_per_case - 1, 1)
            cx = (xf0 + (xf1 - xf0) * u) * w
            cy = yf * h
            height = _apparent_height(config.world, range_m, h)
            box = _stamp_target(canvas, cx, cy, height, "field", modality, frame_rng)
            if box is None:
                continue
            fid = f"ho-{case_id}-{k:02d}"
            frames[fid] = FrameRecord(
                frame_id=fid,
                camera_id=f"ho-{modality}",
                modality=modality,
                timestamp=float(len(frames)),
                image=_to_image(canvas, modality),
                ground_truth=(
                    GroundTruthObject(box=box, label=config.target_class, range_m=range_m),
                ),
            )
            ids.append(fid)
        if ids:
            cases.append(
                SightingCase(
                    case_id=case_id,
                    frame_ids=tuple(ids),
                    range_group=group,
                    modality=modality,
                )
            )

    for i in range(spec.cases_near):
        make_case(f"near-{i:02d}", "rgb", config.world.range_near_m, RANGE_NEAR, i)
    for i in range(spec.cases_far):
        make_case(f"far-{i:02d}", "rgb", config.world.range_far_m, RANGE_FAR, i)
    for i in range(spec.cases_thermal):
        make_case(f"thermal-{i:02d}", "thermal", config.world.range_near_m, RANGE_NEAR, i)

    negatives_rgb = render_background_frames(
        config, "rgb", spec.negatives_rgb, tag="honeg",
        distractor_classes=("heron", "vehicle", "vegetation", "shadow"),
    )
    negatives_thermal = render_background_frames(
        config, "thermal", spec.negatives_thermal, tag="honeg",
        distractor_classes=("heron", "vehicle"),
    )
    for fr in negatives_rgb + negatives_thermal:
        frames[fr.frame_id] = fr
    return HoldoutSet(
        frames=frames,
        cases=cases,
        negatives_rgb=[f.frame_id for f in negatives_rgb],
        negatives_thermal=[f.frame_id for f in negatives_thermal],
    )
