"""Synthetic infrared small-target scenes and robustness perturbations.

Scenes are a background (flat, linear gradient, or blurred-noise clutter)
plus Gaussian intensity blobs with sub-pixel centres, additive pixel noise,
and clipping to [0, 1].  Each sample draws from its own Philox stream keyed
by ``(root seed, sample index)``, so generation is reproducible and
order-independent.
"""
from __future__ import annotations

import math
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .evaluation import SMALL_AREA, Box
from .formats import FORMAT_VERSION, FormatError, read_image, read_json, threads, write_image, write_json

PRNG = "numpy Philox4x64-10 keyed by SeedSequence([seed, index])"


class SpecError(ValueError):
    pass


def _range(value, name) -> tuple[float, float]:
    if isinstance(value, (int, float)):
        lo = hi = float(value)
    else:
        try:
            lo, hi = (float(v) for v in value)
        except (TypeError, ValueError):
            raise SpecError(f"{name} must be a number or a [low, high] pair, got {value!r}") from None
    if lo > hi:
        raise SpecError(f"{name}: low {lo} exceeds high {hi}")
    return lo, hi


@dataclass(frozen=True)
class Background:
    """One background family.  Numeric fields are ``(low, high)`` ranges sampled per image.

    ``flat``: ``level``.  ``gradient``: ramps from ``low`` to ``high`` along a
    random direction.  ``clutter``: ``level`` plus white noise blurred with
    ``blur_sigma`` px, rescaled to span ``amplitude``.
    """

    kind: str = "flat"
    level: tuple[float, float] = (0.1, 0.3)
    low: tuple[float, float] = (0.05, 0.2)
    high: tuple[float, float] = (0.25, 0.45)
    blur_sigma: tuple[float, float] = (2.0, 6.0)
    amplitude: tuple[float, float] = (0.05, 0.2)

    _KEYS = ("kind", "level", "low", "high", "blur_sigma", "amplitude")

    @classmethod
    def from_dict(cls, d: dict) -> "Background":
        unknown = set(d) - set(cls._KEYS)
        if unknown:
            raise SpecError(f"unknown background keys: {sorted(unknown)}")
        kind = d.get("kind", "flat")
        if kind not in ("flat", "gradient", "clutter"):
            raise SpecError(f"unknown background kind {kind!r}")
        kw = {k: _range(v, k) for k, v in d.items() if k != "kind"}
        bg = cls(kind=kind, **kw)
        if bg.blur_sigma[0] <= 0:
            raise SpecError("blur_sigma must be positive")
        return bg

    def to_dict(self) -> dict:
        keys = {"flat": ("level",), "gradient": ("low", "high"),
                "clutter": ("level", "blur_sigma", "amplitude")}[self.kind]
        return {"kind": self.kind, **{k: list(getattr(self, k)) for k in keys}}

    def render(self, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
        if self.kind == "flat":
            return np.full((h, w), rng.uniform(*self.level))
        if self.kind == "gradient":
            lo, hi = rng.uniform(*self.low), rng.uniform(*self.high)
            angle = rng.uniform(0, 2 * np.pi)
            yy, xx = np.mgrid[0:h, 0:w]
            t = np.cos(angle) * xx + np.sin(angle) * yy
            t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
            return lo + (hi - lo) * t
        noise = gaussian_filter(rng.standard_normal((h, w)), rng.uniform(*self.blur_sigma), mode="reflect")
        noise = (noise - noise.min()) / max(noise.max() - noise.min(), 1e-12)
        return rng.uniform(*self.level) + rng.uniform(*self.amplitude) * noise


DEFAULT_BACKGROUNDS = (
    Background("flat", level=(0.1, 0.4)),
    Background("gradient", low=(0.05, 0.2), high=(0.25, 0.45)),
    Background("clutter", level=(0.1, 0.3), blur_sigma=(2.0, 6.0), amplitude=(0.05, 0.2)),
)


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    backgrounds: tuple[Background, ...] = DEFAULT_BACKGROUNDS
    pixel_noise_sigma: float = 0.02
    targets_per_image: tuple[int, int] = (0, 4)
    empty_fraction: float = 0.1
    target_size_px: tuple[float, float] = (2.0, 12.0)
    target_amplitude: tuple[float, float] = (0.15, 0.5)
    min_small_fraction: float = 0.3
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise SpecError(f"image must be at least 8x8, got {self.height}x{self.width}")
        lo, hi = self.targets_per_image
        if not (0 <= lo <= hi) or int(lo) != lo or int(hi) != hi:
            raise SpecError(f"targets_per_image must be an integer range with 0 <= low <= high, got {self.targets_per_image}")
        smin, smax = self.target_size_px
        if not 0 < smin <= smax or smax > min(self.height, self.width):
            raise SpecError(f"target_size_px must satisfy 0 < low <= high <= image side, got {self.target_size_px}")
        if not 0 <= self.empty_fraction <= 1:
            raise SpecError("empty_fraction must lie in [0, 1]")
        if self.pixel_noise_sigma < 0:
            raise SpecError("pixel_noise_sigma must be >= 0")
        if not self.backgrounds:
            raise SpecError("at least one background is required")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown scene spec keys: {sorted(unknown)}")
        kw = dict(d)
        if "backgrounds" in kw:
            kw["backgrounds"] = tuple(Background.from_dict(b) for b in kw["backgrounds"])
        for key in ("target_size_px", "target_amplitude"):
            if key in kw:
                kw[key] = _range(kw[key], key)
        if "targets_per_image" in kw:
            lo, hi = _range(kw["targets_per_image"], "targets_per_image")
            kw["targets_per_image"] = (lo, hi)
        spec = cls(**kw)
        return spec

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backgrounds"] = [b.to_dict() for b in self.backgrounds]
        d["targets_per_image"] = [int(v) for v in self.targets_per_image]
        for key in ("target_size_px", "target_amplitude"):
            d[key] = list(d[key])
        return d


def clutter_heavy_spec(**overrides) -> SceneSpec:
    """Scenes dominated by strong blurred clutter."""
    kw = dict(
        backgrounds=(Background("clutter", level=(0.05, 0.2), blur_sigma=(2.0, 4.0), amplitude=(0.2, 0.3)),),
    )
    kw.update(overrides)
    return SceneSpec(**kw)


@dataclass
class Sample:
    image: np.ndarray
    boxes: list[Box] = field(default_factory=list)


@dataclass(frozen=True)
class Target:
    cx: float
    cy: float
    size: float
    amplitude: float

    @property
    def box(self) -> Box:
        return Box(self.cx - self.size / 2, self.cy - self.size / 2, self.size, self.size)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


def _disjoint(a: Box, b: Box) -> bool:
    return a.x + a.w <= b.x or b.x + b.w <= a.x or a.y + a.h <= b.y or b.y + b.h <= a.y


def draw_targets(spec: SceneSpec, rng: np.random.Generator) -> list[Target]:
    lo, hi = (int(v) for v in spec.targets_per_image)
    if hi == 0 or rng.random() < spec.empty_fraction:
        n = 0
    else:
        n = int(rng.integers(max(lo, 1), hi + 1))
    targets: list[Target] = []
    smin, smax = spec.target_size_px
    for _ in range(n):
        for _attempt in range(100):
            # log-uniform sizes keep a large share of targets below 5x5 px
            size = float(np.exp(rng.uniform(np.log(smin), np.log(smax))))
            cx = float(rng.uniform(size / 2, spec.width - size / 2))
            cy = float(rng.uniform(size / 2, spec.height - size / 2))
            amp = float(rng.uniform(*spec.target_amplitude))
            t = Target(cx, cy, size, amp)
            if all(_disjoint(t.box, other.box) for other in targets):
                targets.append(t)
                break
    return targets


def render_targets(background: np.ndarray, targets: Sequence[Target]) -> np.ndarray:
    """Add Gaussian blobs (sigma = size / 4); pixel (i, j) has its centre at (j + .5, i + .5)."""
    h, w = background.shape
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    img = np.array(background, dtype=np.float64)
    for t in targets:
        sigma = t.size / 4
        img += t.amplitude * np.exp(-((xx - t.cx) ** 2 + (yy - t.cy) ** 2) / (2 * sigma * sigma))
    return img


def render_sample(spec: SceneSpec, seed: int, index: int) -> Sample:
    rng = sample_rng(seed, index)
    bg_family = spec.backgrounds[int(rng.integers(len(spec.backgrounds)))]
    background = bg_family.render(rng, spec.height, spec.width)
    targets = draw_targets(spec, rng)
    img = render_targets(background, targets)
    if spec.pixel_noise_sigma > 0:
        img = img + rng.normal(0.0, spec.pixel_noise_sigma, img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Sample(img, [t.box for t in targets])


def _check_small_fraction(spec: SceneSpec, samples: Sequence[Sample]):
    areas = [b.area for s in samples for b in s.boxes]
    if len(areas) >= 50:
        frac = float(np.mean(np.array(areas) < SMALL_AREA))
        if frac < spec.min_small_fraction:
            raise SpecError(
                f"only {frac:.1%} of generated targets are smaller than {SMALL_AREA:g} px^2 "
                f"(min_small_fraction {spec.min_small_fraction})"
            )


def generate_samples(spec: SceneSpec, count: int, seed: int, start: int = 0) -> list[Sample]:
    if count < 1:
        raise SpecError(f"count must be >= 1, got {count}")
    indices = range(start, start + count)
    with ThreadPoolExecutor(max_workers=threads()) as pool:
        samples = list(pool.map(lambda i: render_sample(spec, seed, i), indices))
    _check_small_fraction(spec, samples)
    return samples


# ----------------------------------------------------------------------------
# Dataset directories
# ----------------------------------------------------------------------------


def _sample_paths(index: int) -> dict:
    return {"image": f"images/{index:06d}.f32", "boxes": f"boxes/{index:06d}.json"}


def _write_sample(out: Path, paths: dict, sample: Sample):
    write_image(out / paths["image"], sample.image)
    write_json(out / paths["boxes"], {"boxes": [b.as_list() for b in sample.boxes]})


def generate_dataset(spec: SceneSpec, count: int, seed: int, out_dir) -> dict:
    """Render ``count`` samples into ``out_dir`` and return the manifest."""
    out = Path(out_dir)
    samples = generate_samples(spec, count, seed)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise FormatError(f"cannot create dataset directory {out}: {exc}") from exc
    entries = [_sample_paths(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=threads()) as pool:
        list(pool.map(lambda pair: _write_sample(out, *pair), zip(entries, samples)))
    manifest = {
        "format_version": FORMAT_VERSION,
        "count": count,
        "height": spec.height,
        "width": spec.width,
        "spec": spec.to_dict(),
        "seed": int(seed),
        "prng": PRNG,
        "samples": entries,
        "source_indices": list(range(count)),
    }
    write_json(out / "manifest.json", manifest)
    return manifest


def read_manifest(dataset_dir) -> dict:
    path = Path(dataset_dir) / "manifest.json"
    if not path.exists():
        raise FormatError(f"no manifest.json in {dataset_dir}")
    manifest = read_json(path)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {manifest.get('format_version')!r}")
    if manifest["count"] != len(manifest["samples"]):
        raise FormatError(f"{path}: count {manifest['count']} but {len(manifest['samples'])} samples listed")
    return manifest


def read_boxes(path) -> list[Box]:
    return [Box(*map(float, b)) for b in read_json(path)["boxes"]]


def load_dataset(dataset_dir) -> list[Sample]:
    root = Path(dataset_dir)
    manifest = read_manifest(root)
    h, w = manifest["height"], manifest["width"]
    samples = []
    for entry in manifest["samples"]:
        for key in ("image", "boxes"):
            if not (root / entry[key]).exists():
                raise FormatError(f"missing sample file {root / entry[key]}")
        img = read_image(root / entry["image"])
        if img.shape != (h, w):
            raise FormatError(f"{entry['image']}: shape {img.shape}, manifest says {(h, w)}")
        samples.append(Sample(img, read_boxes(root / entry["boxes"])))
    return samples


def add_gaussian_noise(dataset_dir, sigma: float, seed: int, out_dir) -> dict:
    """Copy a dataset adding N(0, sigma^2) to every pixel, then clipping to [0, 1]."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    src, out = Path(dataset_dir), Path(out_dir)
    manifest = read_manifest(src)

    def work(i_entry):
        i, entry = i_entry
        for key in ("image", "boxes"):
            if not (src / entry[key]).exists():
                raise FormatError(f"missing sample file {src / entry[key]}")
        if sigma == 0:
            img = read_image(src / entry["image"])
        else:
            img = read_image(src / entry["image"]).astype(np.float64)
            img = np.clip(img + sample_rng(seed, i).normal(0.0, sigma, img.shape), 0.0, 1.0)
        write_image(out / entry["image"], img)
        (out / entry["boxes"]).parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(src / entry["boxes"], out / entry["boxes"])

    with ThreadPoolExecutor(max_workers=threads()) as pool:
        list(pool.map(work, enumerate(manifest["samples"])))
    new = dict(manifest)
    new["perturbations"] = list(manifest.get("perturbations", [])) + [
        {"op": "gaussian_noise", "sigma": sigma, "seed": int(seed), "prng": PRNG}
    ]
    write_json(out / "manifest.json", new)
    return new


def subset(dataset_dir, fraction: float, seed: int, out_dir, exclude: Sequence = ()) -> dict:
    """Uniformly sample ``ceil(fraction * count)`` samples without replacement.

    ``exclude`` lists other subset directories whose samples are not
    eligible, which makes repeated calls with different seeds disjoint.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    src, out = Path(dataset_dir), Path(out_dir)
    manifest = read_manifest(src)
    source_ids = manifest.get("source_indices", list(range(manifest["count"])))
    k = math.ceil(fraction * manifest["count"])
    taken = set()
    for other in exclude:
        taken.update(read_manifest(other).get("source_indices", []))
    eligible = [pos for pos, sid in enumerate(source_ids) if sid not in taken]
    if k == 0:
        raise ValueError("fraction selects no samples")
    if len(eligible) < k:
        raise ValueError(f"need {k} samples but only {len(eligible)} remain after exclusions")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    picked = sorted(rng.choice(eligible, size=k, replace=False).tolist())
    entries = []
    for pos in picked:
        entry = manifest["samples"][pos]
        for key in ("image", "boxes"):
            (out / entry[key]).parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(src / entry[key], out / entry[key])
        shutil.copyfile(src / f"{entry['image']}.json", out / f"{entry['image']}.json")
        entries.append(entry)
    new = dict(manifest)
    new.update(count=k, samples=entries, source_indices=[source_ids[p] for p in picked])
    new["perturbations"] = list(manifest.get("perturbations", [])) + [
        {"op": "subset", "fraction": fraction, "seed": int(seed), "excluded": len(taken)}
    ]
    write_json(out / "manifest.json", new)
    return new


def disjoint_subsets(dataset_dir, fraction: float, seeds: Sequence[int], out_root) -> list[Path]:
    """One subset per seed, each excluding the samples of the previous ones."""
    out_root = Path(out_root)
    dirs: list[Path] = []
    for s in seeds:
        d = out_root / f"subset_seed{s}"
        subset(dataset_dir, fraction, s, d, exclude=dirs)
        dirs.append(d)
    return dirs
