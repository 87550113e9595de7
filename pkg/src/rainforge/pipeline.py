"""End-to-end rainy-image generation, datasets and factor sweeps.

Images on disk are 8-bit RGB PNG; all arithmetic is float64 in [0, 1] and
quantization uses round-half-to-even.  Every random quantity of image i is
drawn from streams derived from ``(seed, i)``, so any image can be
re-rendered alone from its sidecar.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .conv import RotResNetWeights, init_rot_resnet, load_weights
from .factors import (
    STREAM_NOISE,
    FactorConfig,
    RainFactorSample,
    alpha_digest,
    image_rng,
    sample_factors,
)
from .recovery import RecoveryProblem
from .rain_kernel import KernelDictionary, load_dictionary, streak_init_dictionary
from .rot_tv import orientation_scan, rot_tv_loss
from .scene import MAP_GAIN, RainContext, compose_rain_layer, merge_additive, merge_rotconv, sparsity

__all__ = [
    "ConfigError",
    "GenerationConfig",
    "Generator",
    "RenderRecord",
    "RenderResult",
    "load_config",
    "load_image",
    "save_image",
    "quantize",
    "render_rainy",
    "render_index",
    "generate_dataset",
    "sweep_factor",
    "synthetic_problem",
    "measure_streak_width",
    "measure_orientation",
    "worker_count",
]

logger = logging.getLogger(__name__)

STREAM_CROP = 2
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
SWEEPABLE = ("theta", "s_l", "s_w", "tau")
SCAN_GRID = np.arange(-89.0, 91.0, 1.0)


class ConfigError(ValueError):
    """Invalid generation configuration."""


# -- configuration -------------------------------------------------------------


@dataclass
class KernelSettings:
    p: int = 11
    M: int = 30
    K: int = 6
    cascade_depth: int = 3
    dict_path: str | None = None
    dict_seed: int = 0
    per_atom_theta: bool = False


@dataclass
class MapSettings:
    blocks: int = 2
    hidden: int = 16
    weights_path: str | None = None
    weights_seed: int = 0
    gain: float = MAP_GAIN


@dataclass
class MergeSettings:
    mode: str = "additive"
    blocks: int = 4
    hidden: int = 16
    weights_path: str | None = None
    weights_seed: int = 0


@dataclass
class EmitSettings:
    rain_layer: bool = True
    rain_map: bool = False
    montage: bool = False
    alpha_dump: bool = False


def _section(cls, data, name):
    data = dict(data or {})
    known = set(cls.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")
    return cls(**data)


@dataclass
class GenerationConfig:
    output_dir: Path
    backgrounds_dir: Path | None = None
    count: int = 1
    seed: int = 0
    kernel: KernelSettings = field(default_factory=KernelSettings)
    factors: FactorConfig = field(default_factory=FactorConfig)
    map: MapSettings = field(default_factory=MapSettings)
    merge: MergeSettings = field(default_factory=MergeSettings)
    emit: EmitSettings = field(default_factory=EmitSettings)
    crop: int | None = None

    @classmethod
    def from_dict(cls, data: dict, base_dir: Path | None = None) -> "GenerationConfig":
        data = dict(data or {})
        allowed = {"backgrounds_dir", "output_dir", "count", "seed", "kernel", "factors", "map", "merge", "emit", "crop"}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "output_dir" not in data:
            raise ConfigError("config needs output_dir")

        def path(v):
            if v is None:
                return None
            v = Path(v)
            return v if v.is_absolute() or base_dir is None else base_dir / v

        kernel = _section(KernelSettings, data.get("kernel"), "kernel")
        mp = _section(MapSettings, data.get("map"), "map")
        merge = _section(MergeSettings, data.get("merge"), "merge")
        for s in (kernel, mp, merge):
            if getattr(s, "dict_path", None):
                s.dict_path = str(path(s.dict_path))
            if getattr(s, "weights_path", None):
                s.weights_path = str(path(s.weights_path))
        try:
            factors = FactorConfig.from_dict(data.get("factors"))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"factors: {exc}") from exc
        cfg = cls(
            output_dir=path(data["output_dir"]),
            backgrounds_dir=path(data.get("backgrounds_dir")),
            count=data.get("count", 1),
            seed=data.get("seed", 0),
            kernel=kernel,
            factors=factors,
            map=mp,
            merge=merge,
            emit=_section(EmitSettings, data.get("emit"), "emit"),
            crop=data.get("crop"),
        )
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        out = {
            "backgrounds_dir": None if self.backgrounds_dir is None else str(self.backgrounds_dir),
            "output_dir": str(self.output_dir),
            "count": self.count,
            "seed": self.seed,
            "kernel": asdict(self.kernel),
            "factors": self.factors.to_dict(),
            "map": asdict(self.map),
            "merge": asdict(self.merge),
            "emit": asdict(self.emit),
            "crop": self.crop,
        }
        return out

    def validate(self, check_files: bool = True) -> None:
        k = self.kernel
        if not isinstance(self.count, int) or self.count < 0:
            raise ConfigError(f"count must be a non-negative integer, got {self.count!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        if k.p < 1 or k.p % 2 == 0:
            raise ConfigError(f"kernel.p must be odd, got {k.p}")
        if k.M < 1 or k.K < 1 or k.cascade_depth < 1:
            raise ConfigError("kernel.M, kernel.K and kernel.cascade_depth must be positive")
        if self.map.blocks < 1 or self.merge.blocks < 1 or self.map.hidden < 1 or self.merge.hidden < 1:
            raise ConfigError("block counts and hidden widths must be positive")
        if self.merge.mode not in ("additive", "rotconv"):
            raise ConfigError(f"merge.mode must be 'additive' or 'rotconv', got {self.merge.mode!r}")
        if self.crop is not None and (not isinstance(self.crop, int) or self.crop < 1):
            raise ConfigError("crop must be a positive integer or null")
        if self.backgrounds_dir is not None and Path(self.backgrounds_dir).resolve() == Path(self.output_dir).resolve():
            raise ConfigError("backgrounds_dir and output_dir must differ")
        if check_files:
            for p in (k.dict_path, self.map.weights_path, self.merge.weights_path):
                if p is not None and not Path(p).is_file():
                    raise ConfigError(f"referenced file does not exist: {p}")
            if self.backgrounds_dir is not None and not Path(self.backgrounds_dir).is_dir():
                raise ConfigError(f"backgrounds_dir is not a directory: {self.backgrounds_dir}")


def load_config(path) -> GenerationConfig:
    """Parse a YAML (or JSON) config file; relative paths resolve against it."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    return GenerationConfig.from_dict(data, base_dir=path.parent)


def worker_count(requested: int | None = None) -> int:
    """Worker cap from the argument or RAINFORGE_THREADS (0 = all CPUs)."""
    n = requested
    if n is None:
        try:
            n = int(os.environ.get("RAINFORGE_THREADS", "0"))
        except ValueError:
            raise ConfigError("RAINFORGE_THREADS must be an integer") from None
    if n < 0:
        raise ConfigError("worker count must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


# -- images --------------------------------------------------------------------


def quantize(img) -> np.ndarray:
    """float [0, 1] -> uint8, round half to even."""
    return np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path, img) -> None:
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = quantize(arr)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def load_image(path) -> np.ndarray:
    """PNG/JPEG -> float64 RGB in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def list_backgrounds(directory) -> list[Path]:
    if directory is None:
        return []
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


# -- generator -----------------------------------------------------------------


@dataclass
class Generator:
    """Everything fixed across images: rain context and merge settings."""

    context: RainContext
    merge_mode: str = "additive"
    merge_weights: RotResNetWeights | None = None

    def __post_init__(self):
        if self.merge_mode not in ("additive", "rotconv"):
            raise ValueError(f"unknown merge mode {self.merge_mode!r}")
        if self.merge_mode == "rotconv" and self.merge_weights is None:
            raise ValueError("rotconv merge needs weights")

    @classmethod
    def from_config(cls, cfg: GenerationConfig) -> "Generator":
        k = cfg.kernel
        if k.dict_path:
            dictionary = load_dictionary(k.dict_path, per_atom_theta=k.per_atom_theta)
            if dictionary.M != k.M or dictionary.p != k.p:
                raise ConfigError(f"dictionary file has p={dictionary.p}, M={dictionary.M}; config says p={k.p}, M={k.M}")
        else:
            dictionary = KernelDictionary(streak_init_dictionary(k.p, k.M, k.dict_seed).coeffs, k.per_atom_theta)
        if cfg.map.weights_path:
            map_weights = load_weights(cfg.map.weights_path)
        else:
            map_weights = init_rot_resnet(k.K, k.K, cfg.map.hidden, cfg.map.blocks, seed=cfg.map.weights_seed, out_gain=cfg.map.gain)
        if map_weights.in_channels != k.K or map_weights.out_channels != k.K:
            raise ConfigError(f"rain-map weights must map {k.K} -> {k.K} channels")
        context = RainContext.seeded(cascade_depth=k.cascade_depth, seed=k.dict_seed,
                                     dictionary=dictionary, map_weights=map_weights,
                                     per_atom_theta=k.per_atom_theta)
        merge_weights = None
        if cfg.merge.mode == "rotconv":
            if cfg.merge.weights_path:
                merge_weights = load_weights(cfg.merge.weights_path)
            else:
                merge_weights = init_rot_resnet(6, 3, cfg.merge.hidden, cfg.merge.blocks, seed=cfg.merge.weights_seed)
        return cls(context, cfg.merge.mode, merge_weights)

    def noise(self, shape, master_seed: int, index: int) -> np.ndarray:
        rng = image_rng(master_seed, index, STREAM_NOISE)
        return rng.standard_normal(tuple(shape[:2]) + (self.context.K,))


@dataclass
class RenderRecord:
    index: int
    seed: int
    theta_deg: float | list
    s_l: float
    s_w: float
    tau: float
    alpha_digest: str
    sparsity: float
    rot_tv: float
    files: dict = field(default_factory=dict)
    alpha: list | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["alpha"] is None:
            d.pop("alpha")
        if not d["extra"]:
            d.pop("extra")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RenderRecord":
        return cls(**d)

    def factors(self, M: int | None = None) -> RainFactorSample:
        """Factor sample stored in this record (needs the full alpha dump)."""
        if self.alpha is None:
            raise ValueError("record has no alpha dump; resample from (seed, index) instead")
        theta = np.asarray(self.theta_deg, dtype=np.float64) if isinstance(self.theta_deg, list) else self.theta_deg
        return RainFactorSample(theta, self.s_l, self.s_w, np.asarray(self.alpha), self.tau, self.seed, self.index)


@dataclass
class RenderResult:
    rainy: np.ndarray
    rain_layer: np.ndarray
    rain_map: np.ndarray
    record: RenderRecord


def render_rainy(background, factors: RainFactorSample, generator: Generator, Z=None) -> RenderResult:
    """Compose kernels, rain map, rain layer and merge for one background.

    ``Z`` defaults to the noise stream of ``factors``' seed lineage.
    """
    background = np.asarray(background, dtype=np.float64)
    if background.ndim != 3 or background.shape[2] != 3:
        raise ValueError(f"background must be (H, W, 3), got {background.shape}")
    if background.min() < 0 or background.max() > 1:
        raise ValueError("background must lie in [0, 1]")
    ctx = generator.context
    if Z is None:
        if factors.master_seed is None or factors.stream_id is None:
            raise ValueError("factors carry no seed lineage; pass Z explicitly")
        Z = generator.noise(background.shape, factors.master_seed, factors.stream_id)
    theta = np.radians(factors.theta_scalar_deg)
    rain_map = ctx.rain_map(Z, factors)
    rain_layer = compose_rain_layer(rain_map, ctx.kernels(factors))
    if generator.merge_mode == "additive":
        rainy = merge_additive(rain_layer, background)
    else:
        rainy = merge_rotconv(rain_layer, background, theta, generator.merge_weights)
    theta_out = factors.theta.tolist() if isinstance(factors.theta, np.ndarray) else float(factors.theta)
    record = RenderRecord(
        index=-1 if factors.stream_id is None else int(factors.stream_id),
        seed=-1 if factors.master_seed is None else int(factors.master_seed),
        theta_deg=theta_out,
        s_l=float(factors.s_l),
        s_w=float(factors.s_w),
        tau=float(factors.tau),
        alpha_digest=alpha_digest(factors.alpha),
        sparsity=sparsity(rain_map),
        rot_tv=rot_tv_loss(rain_layer, theta),
    )
    return RenderResult(rainy, rain_layer, rain_map, record)


def _crop(img: np.ndarray, size: int | None, seed: int, index: int) -> np.ndarray:
    if size is None:
        return img
    H, W = img.shape[:2]
    if size > H or size > W:
        raise ValueError(f"crop {size} larger than background {H}x{W}")
    rng = image_rng(seed, index, STREAM_CROP)
    top = int(rng.integers(0, H - size + 1))
    left = int(rng.integers(0, W - size + 1))
    return img[top : top + size, left : left + size]


def render_index(cfg: GenerationConfig, generator: Generator, background: np.ndarray, index: int,
                 factors: RainFactorSample | None = None) -> RenderResult:
    """Render image ``index`` exactly as the dataset run would."""
    k = cfg.kernel
    if factors is None:
        factors = sample_factors(cfg.factors, k.M, k.K, master_seed=cfg.seed, stream_id=index,
                                 per_atom_theta=k.per_atom_theta)
    clean = _crop(background, cfg.crop, cfg.seed, index)
    result = render_rainy(clean, factors, generator)
    if cfg.emit.alpha_dump:
        result.record.alpha = factors.alpha.tolist()
    return result


# -- dataset -------------------------------------------------------------------


def _file_names(index: int, emit: EmitSettings) -> dict:
    stem = f"{index:05d}"
    files = {"rainy": f"rainy/{stem}.png", "clean": f"clean/{stem}.png", "meta": f"meta/{stem}.json"}
    if emit.rain_layer:
        files["rain_layer"] = f"rain_layer/{stem}.png"
    if emit.rain_map:
        files["rain_map"] = f"rain_map/{stem}.png"
    return files


def _job(args):
    *_, bg_name, _, index = args
    try:
        return _render_job(*args)
    except OSError as exc:
        raise OSError(f"image {index} (background {bg_name}): {exc}") from exc
    except ValueError as exc:
        raise ValueError(f"image {index} (background {bg_name}): {exc}") from exc


def _render_job(cfg, generator, bg_name, background, index):
    clean = _crop(background, cfg.crop, cfg.seed, index)
    result = render_index(cfg, generator, background, index)
    out = Path(cfg.output_dir)
    files = _file_names(index, cfg.emit)
    result.record.files = dict(files, background=bg_name)
    save_image(out / files["rainy"], result.rainy)
    save_image(out / files["clean"], clean)
    if "rain_layer" in files:
        save_image(out / files["rain_layer"], result.rain_layer)
    if "rain_map" in files:
        save_image(out / files["rain_map"], result.rain_map.max(axis=2))
    meta = out / files["meta"]
    meta.parent.mkdir(parents=True, exist_ok=True)
    meta.write_text(json.dumps(result.record.to_dict(), indent=2, sort_keys=True) + "\n")
    return result.record, (result.rainy if cfg.emit.montage else None)


def _load_backgrounds(cfg: GenerationConfig):
    paths = list_backgrounds(cfg.backgrounds_dir)
    loaded, skipped = [], []
    for p in paths:
        try:
            loaded.append((p.name, load_image(p)))
        except (OSError, ValueError) as exc:
            logger.warning("skipping unreadable background %s: %s", p, exc)
            skipped.append(p.name)
    return loaded, skipped


def montage(images, gap: int = 4, fill: float = 1.0) -> np.ndarray:
    """Tile equally sized images left to right."""
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if not images:
        raise ValueError("montage needs at least one image")
    H = max(im.shape[0] for im in images)
    W = sum(im.shape[1] for im in images) + gap * (len(images) - 1)
    out = np.full((H, W, 3), fill)
    x = 0
    for im in images:
        out[: im.shape[0], x : x + im.shape[1]] = im
        x += im.shape[1] + gap
    return out


def generate_dataset(cfg: GenerationConfig, workers: int | None = None) -> dict:
    """Render ``cfg.count`` rainy/clean pairs with one JSON sidecar each.

    Backgrounds are used round-robin in file-name order.  The output is
    byte-identical for any worker count.
    """
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    backgrounds, skipped = _load_backgrounds(cfg) if cfg.count else ([], [])
    if cfg.count and not backgrounds:
        raise ConfigError("no readable backgrounds found")
    generator = Generator.from_config(cfg)
    jobs = [(cfg, generator, *backgrounds[i % len(backgrounds)], i) for i in range(cfg.count)]
    n = min(worker_count(workers), max(1, len(jobs)))
    if n > 1:
        with ProcessPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    records = [r for r, _ in results]
    if cfg.emit.montage and results:
        save_image(out / "montage.png", montage([im for _, im in results]))

    def hist(values, lo, hi):
        counts, edges = np.histogram(np.asarray(values, dtype=np.float64).ravel(), bins=10, range=(lo, hi))
        return {"edges": edges.tolist(), "counts": counts.tolist()}

    summary = {
        "count": len(records),
        "skipped_backgrounds": skipped,
        "backgrounds_used": sorted({r.files["background"] for r in records}),
        "mean_sparsity": float(np.mean([r.sparsity for r in records])) if records else 0.0,
        "histograms": {
            "theta_deg": hist([r.theta_deg for r in records], -90, 90),
            "s_l": hist([r.s_l for r in records], 0, 2),
            "s_w": hist([r.s_w for r in records], 0, 2),
            "tau": hist([r.tau for r in records], -1, 3),
        },
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


# -- measurements and sweeps ------------------------------------------------------


def measure_orientation(rain_layer, grid=SCAN_GRID) -> float:
    """Streak angle (degrees) minimizing the rotatable TV score."""
    return orientation_scan(rain_layer, grid)[0]


def measure_streak_width(rain_layer, theta_deg: float, radius: int = 6) -> float:
    """RMS cross-section width of streaks, in pixels.

    Uses the second moment, perpendicular to the streak direction, of the
    positive part of the rain layer's autocorrelation near zero lag.
    """
    g = np.asarray(rain_layer, dtype=np.float64)
    if g.ndim == 3:
        g = g.mean(axis=2)
    g = g - g.mean()
    H, W = g.shape
    F = np.fft.rfft2(g, s=(2 * H, 2 * W))
    ac = np.fft.irfft2(F * np.conj(F), s=(2 * H, 2 * W))
    ac = np.fft.fftshift(ac)[H - radius : H + radius + 1, W - radius : W + radius + 1]
    ac = np.maximum(ac / ac[radius, radius], 0.0)
    di, dj = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    t = np.radians(theta_deg)
    # perpendicular to the streak direction (sin t, cos t) in (right, up) coordinates
    across = dj * np.cos(t) + di * np.sin(t)
    return float(np.sqrt(np.sum(ac * across**2) / np.sum(ac)))


def synthetic_problem(cfg: GenerationConfig, generator: Generator, index: int, size: int, **problem_kwargs):
    """Recovery problem whose target is image ``index``'s own rain layer.

    Returns ``(problem, generating_factors)``; the generating factors are
    also stored as ``problem.reference``.
    """
    k = cfg.kernel
    ref = sample_factors(cfg.factors, k.M, k.K, master_seed=cfg.seed, stream_id=index)
    Z = generator.noise((size, size), cfg.seed, index)
    _, target = generator.context.rain_layer(Z, ref)
    return RecoveryProblem(target, generator.context, Z, reference=ref, **problem_kwargs), ref


def sweep_factor(cfg: GenerationConfig, factor: str, values, background=None, index: int = 0,
                 measure: bool = True):
    """Render one image per value of ``factor`` with everything else fixed.

    Other factors come from image ``index``'s draw; the noise is shared.
    Returns ``(montage, records)``.
    """
    if factor not in SWEEPABLE:
        raise ValueError(f"factor must be one of {SWEEPABLE}, got {factor!r}")
    values = [float(v) for v in values]
    if not values:
        raise ValueError("sweep needs at least one value")
    generator = Generator.from_config(cfg)
    k = cfg.kernel
    if background is None:
        backgrounds, _ = _load_backgrounds(cfg)
        if not backgrounds:
            raise ConfigError("sweep needs a background (none readable in backgrounds_dir)")
        background = backgrounds[0][1]
    clean = _crop(np.asarray(background, dtype=np.float64), cfg.crop, cfg.seed, index)
    base = sample_factors(cfg.factors, k.M, k.K, master_seed=cfg.seed, stream_id=index, per_atom_theta=k.per_atom_theta)
    Z = generator.noise(clean.shape, cfg.seed, index)
    images, records = [], []
    for v in values:
        if factor == "theta" and k.per_atom_theta:
            f = base.replace(theta=np.full(k.M, v))
        else:
            f = base.replace(**{factor: v})
        res = render_rainy(clean, f, generator, Z=Z)
        res.record.extra["swept"] = {"factor": factor, "value": v}
        if measure:
            angle = measure_orientation(res.rain_layer)
            res.record.extra["measured_theta_deg"] = angle
            res.record.extra["measured_width_px"] = measure_streak_width(res.rain_layer, f.theta_scalar_deg)
        images.append(res.rainy)
        records.append(res.record)
    return montage(images), records
