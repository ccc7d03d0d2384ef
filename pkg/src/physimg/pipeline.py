"""Config-driven batch pipeline with a content-hashed output manifest.

A pipeline reads a series of images (plus optional references), applies the
declared correction blocks to every image and then runs the declared
analysis blocks. Everything it writes is listed in ``manifest.json`` with a
SHA-256 hash; identical configs and inputs give identical manifests.
"""

from __future__ import annotations

import copy
import glob
import hashlib
import json
import logging
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib
import tomli_w

from . import align as al
from . import corrections as cr
from . import quantify as qf
from . import segment as sg
from .imgcore import ColorSpace, PhysicalImage, load, new_image, read_raster, save, sidecar_path, to_colorspace
from .regularize import RegularizationConfig, tv_denoise

logger = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "PipelineConfig",
    "parse_config",
    "load_config",
    "dump_config",
    "load_image",
    "run",
    "sha256_file",
    "CORRECTION_BLOCKS",
    "ANALYSIS_BLOCKS",
]

CORRECTION_BLOCKS = ("color", "geometry", "drift", "deformation")
ANALYSIS_BLOCKS = ("denoise", "facies", "binary", "concentration", "compare", "fingers")


class ConfigError(ValueError):
    """Invalid pipeline configuration (raised before any output is written)."""


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ConfigError(f"{where}: missing key {key!r}")
    return d[key]


def _strip_none(obj):
    if isinstance(obj, dict):
        return {k: _strip_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_strip_none(v) for v in obj]
    return obj


@dataclass
class PipelineConfig:
    """Parsed pipeline configuration.

    Paths are kept as written; they are resolved against ``base_dir`` (the
    directory of the config file) when the pipeline runs.
    """

    images: list[str]
    output_dir: str
    timestamps: Optional[list[float]] = None
    width: Optional[float] = None
    height: Optional[float] = None
    references: list[str] = field(default_factory=list)
    corrections: list[dict] = field(default_factory=list)
    analyses: list[dict] = field(default_factory=list)
    base_dir: Path = field(default=Path("."), compare=False)

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "PipelineConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a table")
        known = {"input", "references", "output", "corrections", "analyses"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        inp = _require(d, "input", "config")
        images = inp.get("images")
        pattern = inp.get("glob")
        if (images is None) == (pattern is None):
            raise ConfigError("input: give exactly one of 'images' or 'glob'")
        if pattern is not None:
            images = sorted(str(Path(p).resolve()) for p in glob.glob(str(Path(base_dir) / pattern)))
            if not images:
                raise ConfigError(f"input: glob {pattern!r} matches no files")
        if not isinstance(images, list) or not images:
            raise ConfigError("input: 'images' must be a nonempty list")
        ts = inp.get("timestamps")
        if ts is not None and len(ts) != len(images):
            raise ConfigError("input: one timestamp per image required")
        refs = d.get("references", {}).get("images", [])
        out = _require(d, "output", "config")
        cfg = cls(
            images=[str(p) for p in images],
            output_dir=str(_require(out, "dir", "output")),
            timestamps=None if ts is None else [float(t) for t in ts],
            width=inp.get("width"),
            height=inp.get("height"),
            references=[str(p) for p in refs],
            corrections=[dict(b) for b in d.get("corrections", [])],
            analyses=[dict(b) for b in d.get("analyses", [])],
            base_dir=Path(base_dir),
        )
        cfg.validate_structure()
        return cfg

    def to_dict(self) -> dict:
        inp: dict[str, Any] = {"images": list(self.images)}
        if self.timestamps is not None:
            inp["timestamps"] = list(self.timestamps)
        if self.width is not None:
            inp["width"] = self.width
        if self.height is not None:
            inp["height"] = self.height
        out: dict[str, Any] = {"input": inp}
        if self.references:
            out["references"] = {"images": list(self.references)}
        out["output"] = {"dir": self.output_dir}
        if self.corrections:
            out["corrections"] = copy.deepcopy(self.corrections)
        if self.analyses:
            out["analyses"] = copy.deepcopy(self.analyses)
        return _strip_none(out)

    # -- validation -------------------------------------------------------

    def validate_structure(self) -> None:
        """Block types, required parameters and inter-block dependencies."""
        seen = set()
        for b in self.corrections:
            kind = _require(b, "type", "correction block")
            if kind not in CORRECTION_BLOCKS:
                raise ConfigError(f"unknown correction block {kind!r}")
            if kind in seen:
                raise ConfigError(f"correction block {kind!r} declared twice")
            seen.add(kind)
            if kind == "color":
                _require(b, "swatch_roi", "color")
            elif kind == "geometry":
                for k in ("corners", "width", "height"):
                    _require(b, k, "geometry")
                if len(b["corners"]) != 4:
                    raise ConfigError("geometry: four corners required")
            elif kind == "drift":
                _require(b, "roi", "drift")
            elif kind == "deformation":
                levels = _require(b, "levels", "deformation")
                if not levels or any(len(lv) != 2 or min(lv) < 1 for lv in levels):
                    raise ConfigError("deformation: levels must be [num_v, num_h] pairs")
                if not self.references:
                    raise ConfigError("deformation needs a reference image")
        produced = set()
        for b in self.analyses:
            kind = _require(b, "type", "analysis block")
            if kind not in ANALYSIS_BLOCKS:
                raise ConfigError(f"unknown analysis block {kind!r}")
            if kind == "facies" and not self.references:
                raise ConfigError("facies needs a reference image")
            if kind == "binary":
                if not self.references:
                    raise ConfigError("binary needs reference images")
                _require(b, "threshold", "binary")
                if b.get("labels") == "facies" and "facies" not in produced:
                    raise ConfigError("binary uses facies labels, declare a facies block first")
            if kind == "concentration":
                if not self.references:
                    raise ConfigError("concentration needs reference images")
                if "alpha" not in b and "calibrate" not in b:
                    raise ConfigError("concentration: give 'alpha' or a 'calibrate' table")
                if "calibrate" in b:
                    _require(b["calibrate"], "rate", "concentration.calibrate")
                    if self.timestamps is None:
                        raise ConfigError("calibration needs input timestamps")
            if kind in ("compare", "fingers") and "masks" not in b and "binary" not in produced:
                raise ConfigError(f"{kind} needs a binary block before it or explicit 'masks'")
            if kind == "fingers" and b.get("axis", "down") not in ("down", "up", "left", "right"):
                raise ConfigError("fingers: axis must be down, up, left or right")
            produced.add(kind)

    def resolve(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else self.base_dir / q

    def validate_inputs(self) -> None:
        for p in self.images + self.references:
            path = self.resolve(p)
            if not path.exists():
                raise ConfigError(f"input file not found: {p}")
            if not sidecar_path(path).exists() and (self.width is None or self.height is None):
                raise ConfigError(f"{p}: no sidecar; set input.width and input.height")
        for b in self.analyses:
            for p in b.get("masks", []):
                if not self.resolve(p).exists():
                    raise ConfigError(f"mask file not found: {p}")


def parse_config(text: str, fmt: str = "toml", base_dir=".") -> PipelineConfig:
    try:
        data = json.loads(text) if fmt == "json" else tomllib.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    return PipelineConfig.from_dict(data, base_dir)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    fmt = "json" if path.suffix.lower() == ".json" else "toml"
    return parse_config(path.read_text(), fmt, path.parent)


def dump_config(config: PipelineConfig, fmt: str = "toml") -> str:
    """Canonical text form (sorted keys)."""
    d = config.to_dict()
    if fmt == "json":
        return json.dumps(d, indent=2, sort_keys=True)
    return tomli_w.dumps(_sorted(d))


def _sorted(obj):
    if isinstance(obj, dict):
        return {k: _sorted(obj[k]) for k in sorted(obj)}
    if isinstance(obj, list):
        return [_sorted(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# Execution helpers


def load_image(path, width: Optional[float] = None, height: Optional[float] = None,
               timestamp: Optional[float] = None) -> PhysicalImage:
    """Load an image with its sidecar, or a bare raster with explicit size."""
    path = Path(path)
    if sidecar_path(path).exists():
        return load(path, timestamp)
    if width is None or height is None:
        raise ConfigError(f"{path}: no sidecar; physical width and height required")
    return new_image(read_raster(path), width, height, timestamp=timestamp)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@contextmanager
def _timed(block: str):
    t0 = time.perf_counter()
    yield
    logger.info(json.dumps({"block": block, "seconds": round(time.perf_counter() - t0, 4)}))


def _reg(b: dict, key: str = "mu", default: float = 0.0) -> RegularizationConfig:
    return RegularizationConfig(mu=float(b.get(key, default)), omega=float(b.get("omega", 1.0)),
                                bregman_penalty=float(b.get("bregman_penalty", 1.0)),
                                max_iter=int(b.get("max_iter", 200)), tol=float(b.get("tol", 1e-4)),
                                pore_length=b.get("pore_length"))


def _box(v) -> tuple:
    return (tuple(map(float, v[0])), tuple(map(float, v[1])))


class _Outputs:
    def __init__(self, root: Path):
        self.root = root
        self.paths: list[Path] = []

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def image(self, rel: str, image: PhysicalImage) -> Path:
        p = self.path(rel)
        save(image, p)
        self.paths += [p, sidecar_path(p)]
        return p

    def text(self, rel: str, text: str) -> Path:
        p = self.path(rel)
        p.write_text(text)
        self.paths.append(p)
        return p

    def register(self, *paths: Path) -> None:
        self.paths += list(paths)


def _stem(i: int, name: str) -> str:
    return f"{i:03d}_{Path(name).stem}"


def _raster(image: PhysicalImage) -> str:
    return ".png" if image.colorspace is ColorSpace.BINARY else ".tif"


def run(config: PipelineConfig) -> dict:
    """Execute a pipeline and write its manifest.

    Returns the manifest dict. Raises :class:`ConfigError` before writing
    anything if the config or inputs are invalid. Failures on single images
    are recorded in the manifest and the series continues.
    """
    config.validate_structure()
    config.validate_inputs()
    out = _Outputs(config.resolve(config.output_dir))
    out.root.mkdir(parents=True, exist_ok=True)
    failures: list[dict] = []

    ts = config.timestamps or [None] * len(config.images)
    images = [load_image(config.resolve(p), config.width, config.height, t) for p, t in zip(config.images, ts)]
    if config.timestamps is not None:
        # config wins over file metadata
        from dataclasses import replace

        images = [replace(im, timestamp=t) for im, t in zip(images, config.timestamps)]
    refs = [load_image(config.resolve(p), config.width, config.height) for p in config.references]

    # corrections: fit on the base reference (or the first image), apply to all
    corr = {b["type"]: b for b in config.corrections}
    anchor = refs[0] if refs else images[0]
    color = geometry = None
    if "color" in corr:
        with _timed("color"):
            b = corr["color"]
            color = cr.fit_color_correction(anchor, _box(b["swatch_roi"]))
            out.text("corrections/color.json", json.dumps(color.to_dict(), indent=2, sort_keys=True))
    if "geometry" in corr:
        b = corr["geometry"]
        geometry = cr.build_geometric_correction(
            np.asarray(b["corners"], dtype=float), float(b["width"]), float(b["height"]),
            bulge=tuple(b.get("bulge", (0.0, 0.0))), stretch=tuple(b.get("stretch", (0.0, 0.0, 0.0, 0.0))),
            shape=tuple(b["shape"]) if "shape" in b else None,
        )
        out.text("corrections/geometry.json", json.dumps(geometry.to_dict(), indent=2, sort_keys=True))

    def correct(img: PhysicalImage, drift_ref: Optional[PhysicalImage]) -> PhysicalImage:
        for b in config.corrections:
            kind = b["type"]
            if kind == "color":
                img = cr.apply_color_correction(color, img)
            elif kind == "geometry":
                img = cr.apply_geometric_correction(geometry, img)
            elif kind == "drift" and drift_ref is not None:
                dc = cr.DriftCorrection(drift_ref, _box(b["roi"]), int(b.get("max_shift", 20)))
                img = cr.apply_drift_correction(dc, img)
        return img

    with _timed("corrections"):
        base = correct(refs[0], None) if refs else None
        refs_c = [base] + [correct(r, base) for r in refs[1:]] if refs else []
        corrected: list[Optional[PhysicalImage]] = []
        for i, (name, img) in enumerate(zip(config.images, images)):
            try:
                c = correct(img, base if base is not None else (corrected[0] if corrected else None))
                if "deformation" in corr:
                    b = corr["deformation"]
                    hier = al.PatchHierarchy([tuple(lv) for lv in b["levels"]], float(b.get("overlap", 0.0)))
                    fld = al.align(to_colorspace(base, "GRAY") if base.channels > 1 else base,
                                   to_colorspace(c, "GRAY") if c.channels > 1 else c, hier)
                    c = al.warp(c, fld, "forward")
                    out.text(f"fields/{_stem(i, name)}.json", fld.to_json())
                corrected.append(c)
                if config.corrections:
                    out.image(f"corrected/{_stem(i, name)}{_raster(c)}", c)
            except Exception as exc:  # noqa: BLE001 - recorded, series continues
                logger.warning("image %s failed in corrections: %s", name, exc)
                failures.append({"image": name, "block": "corrections", "error": f"{type(exc).__name__}: {exc}"})
                corrected.append(None)

    stack = sg.ReferenceStack(refs_c) if refs_c else None
    products: dict[str, Any] = {}
    for b in config.analyses:
        kind = b["type"]
        with _timed(kind):
            _ANALYSES[kind](b, config, corrected, stack, products, out, failures)

    manifest = {
        "config_sha256": hashlib.sha256(dump_config(config).encode()).hexdigest(),
        "artifacts": sorted(
            ({"path": p.relative_to(out.root).as_posix(), "sha256": sha256_file(p)} for p in set(out.paths)),
            key=lambda a: a["path"],
        ),
        "failures": failures,
    }
    (out.root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


# ---------------------------------------------------------------------------
# Analysis blocks


def _each(config, corrected, failures, kind):
    for i, (name, img) in enumerate(zip(config.images, corrected)):
        if img is None:
            continue
        yield i, name, img


def _denoise(b, config, corrected, stack, products, out, failures):
    cfg = _reg(b)
    for i, name, img in _each(config, corrected, failures, "denoise"):
        try:
            g = to_colorspace(img, "GRAY") if img.channels > 1 else img
            out.image(f"denoise/{_stem(i, name)}.tif", tv_denoise(g, cfg))
        except Exception as exc:  # noqa: BLE001
            failures.append({"image": name, "block": "denoise", "error": f"{type(exc).__name__}: {exc}"})


def _facies(b, config, corrected, stack, products, out, failures):
    base = stack.base_image
    g = to_colorspace(base, "GRAY") if base.channels > 1 else base
    labels = sg.watershed_labels(g, float(b.get("mu", 2e-4)), float(b.get("quantile", 0.2)),
                                 b.get("merge_tol", 0.05))
    p = out.path("facies/labels.png")
    sg.save_labels(labels, p)
    out.register(p, p.with_suffix(".json"))
    products["facies"] = labels


def _threshold_model(b) -> sg.ThresholdModel:
    th = b["threshold"]
    if isinstance(th, dict):
        iv = {(-1 if k == "*" else int(k)): (float(v[0]), float(v[1]) if len(v) > 1 else np.inf)
              for k, v in th.items()}
    else:
        iv = {-1: (float(th), float(b.get("upper", np.inf)))}
    return sg.ThresholdModel(iv, b.get("mode", "static"), float(b.get("drift_band", 0.0)))


def _binary(b, config, corrected, stack, products, out, failures):
    model = _threshold_model(b)
    labels = products.get("facies") if b.get("labels") == "facies" else None
    cfg = _reg(b)
    masks = {}
    for i, name, img in _each(config, corrected, failures, "binary"):
        try:
            m = sg.binary_concentration(img, stack, labels, model, cfg, b.get("channel", "negkey"),
                                        bool(b.get("use_floor", True)), b.get("min_area"))
            out.image(f"binary/{_stem(i, name)}.png", m)
            masks[i] = m
        except Exception as exc:  # noqa: BLE001
            failures.append({"image": name, "block": "binary", "error": f"{type(exc).__name__}: {exc}"})
    products["binary"] = masks


def _concentration(b, config, corrected, stack, products, out, failures):
    cfg = _reg(b)
    channel = b.get("channel", "negkey")
    use_floor = bool(b.get("use_floor", False))
    first = next(img for img in corrected if img is not None)
    geom = qf.Geometry.for_image(first, float(b.get("porosity", 1.0)), float(b.get("depth", 1.0)))
    valid = [(i, img) for i, img in enumerate(corrected) if img is not None]
    if "calibrate" in b:
        cal = b["calibrate"]
        count = int(cal.get("count", len(valid)))
        series = valid[:count]
        model = qf.calibrate([img for _, img in series], [config.timestamps[i] for i, _ in series],
                             float(cal["rate"]), geom, stack, cfg, channel, use_floor)
    else:
        model = qf.LinearConcentrationModel(float(b["alpha"]), float(b.get("beta", 0.0)))
    out.text("concentration/model.json", json.dumps(model.to_dict(), indent=2, sort_keys=True))
    rows = []
    for i, img in valid:
        name = config.images[i]
        try:
            c = qf.concentration(img, stack, model, cfg, channel, use_floor)
            out.image(f"concentration/{_stem(i, name)}.tif", c)
            t = img.timestamp if img.timestamp is not None else float(i)
            rows.append([name, t, qf.total_volume(c, geom)])
        except Exception as exc:  # noqa: BLE001
            failures.append({"image": name, "block": "concentration", "error": f"{type(exc).__name__}: {exc}"})
    out.text("concentration/volumes.csv", qf.write_csv(["image", "time", "volume_m3"], rows))


def _mask_inputs(b, config, products):
    if "masks" in b:
        return [load_image(config.resolve(p), config.width, config.height) for p in b["masks"]]
    masks = products.get("binary", {})
    return [masks[i] for i in sorted(masks)]


def _compare(b, config, corrected, stack, products, out, failures):
    masks = _mask_inputs(b, config, products)
    if len(masks) < 2:
        failures.append({"image": "*", "block": "compare", "error": "fewer than two masks"})
        return
    img, fr = qf.compare_segmentations(masks)
    out.image("compare/comparison.png", img)
    out.text("compare/fractions.csv", qf.write_csv(["category", "fraction"], [[k, v] for k, v in fr.items()]))
    out.text("compare/legend.json", json.dumps(qf.comparison_legend(len(masks)), indent=2, sort_keys=True))


def _fingers(b, config, corrected, stack, products, out, failures):
    masks = _mask_inputs(b, config, products)
    if len(masks) < 2:
        failures.append({"image": "*", "block": "fingers", "error": "fewer than two masks"})
        return
    roi = _box(b["roi"]) if "roi" in b else None
    axis = b.get("axis", "down")
    tips = [qf.detect_finger_tips(m, roi, axis, float(b.get("min_spacing_px", 10.0)),
                                  float(b.get("min_prominence_px", 3.0))) for m in masks]
    times = [m.timestamp if m.timestamp is not None else float(k) for k, m in enumerate(masks)]
    if len(set(times)) != len(times):
        times = list(range(len(masks)))
    pitch = masks[0].pitch[0]
    tracks = qf.track_fingers(tips, times, float(b.get("hop_radius_px", 10.0)) * pitch, roi)
    out.text("fingers/trajectories.csv", qf.write_csv(["trajectory", "time", "x", "y"], qf.trajectories_table(tracks)))
    out.text("fingers/lengths.csv", qf.write_csv(["trajectory", "length_m", "weight"],
                                                 [[k, t.length, t.weight] for k, t in enumerate(tracks)]))


_ANALYSES = {
    "denoise": _denoise,
    "facies": _facies,
    "binary": _binary,
    "concentration": _concentration,
    "compare": _compare,
    "fingers": _fingers,
}
