"""Command line interface.

Every subcommand wraps one library operation with file-based I/O. Options can
also come from a TOML/JSON file given with ``--config``; the table named after
the subcommand supplies defaults and explicit flags override them.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3

logger = logging.getLogger("physimg")


class UsageError(Exception):
    pass


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _read_table(path: Optional[str], section: str) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config file not found: {path}")
    text = p.read_text()
    try:
        if p.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            from .pipeline import tomllib

            data = tomllib.loads(text)
    except Exception as exc:  # noqa: BLE001
        raise ValidationError(f"cannot parse {path}: {exc}") from exc
    return dict(data.get(section, {}))


def _merged(args: argparse.Namespace, defaults: dict) -> dict:
    """Config-file table overridden by flags given on the command line."""
    table = _read_table(getattr(args, "config", None), args.command)
    out = dict(defaults)
    out.update({k.replace("-", "_"): v for k, v in table.items()})
    for k, v in vars(args).items():
        if k in ("command", "config", "func", "verbose") or v is None:
            continue
        out[k] = v
    return out


def _need(opts: dict, *keys: str) -> None:
    missing = [k for k in keys if opts.get(k) in (None, [], "")]
    if missing:
        raise ValidationError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _load(path, opts):
    from .pipeline import ConfigError, load_image

    if not Path(path).exists():
        raise ValidationError(f"file not found: {path}")
    try:
        return load_image(path, opts.get("width"), opts.get("height"))
    except ConfigError as exc:
        raise ValidationError(str(exc)) from exc


def _box(values) -> tuple:
    if values is None:
        return None
    v = [float(x) for x in np.ravel(values)]
    if len(v) != 4:
        raise ValidationError("boxes are given as x0 y0 x1 y1")
    return ((v[0], v[1]), (v[2], v[3]))


def _reg(opts: dict, key: str = "mu"):
    from .regularize import RegularizationConfig

    try:
        return RegularizationConfig(mu=float(opts.get(key) or 0.0), omega=float(opts.get("omega", 1.0)),
                                    bregman_penalty=float(opts.get("penalty", 1.0)),
                                    max_iter=int(opts.get("max_iter", 200)), tol=float(opts.get("tol", 1e-4)),
                                    pore_length=opts.get("pore_length"))
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Subcommands


def cmd_correct(args) -> int:
    from . import corrections as cr
    from .imgcore import save

    o = _merged(args, {"max_shift": 20})
    _need(o, "input", "output")
    img = _load(o["input"], o)
    if o.get("color_roi") is not None:
        img = cr.apply_color_correction(cr.fit_color_correction(img, _box(o["color_roi"])), img)
    if o.get("corners") is not None:
        corners = np.asarray(o["corners"], dtype=float).reshape(4, 2)
        _need(o, "target_width", "target_height")
        g = cr.build_geometric_correction(corners, float(o["target_width"]), float(o["target_height"]),
                                          tuple(o.get("bulge") or (0.0, 0.0)))
        img = cr.apply_geometric_correction(g, img)
    if o.get("drift_reference") is not None:
        _need(o, "drift_roi")
        ref = _load(o["drift_reference"], o)
        img = cr.apply_drift_correction(cr.DriftCorrection(ref, _box(o["drift_roi"]), int(o["max_shift"])), img)
    save(img, o["output"])
    return EXIT_OK


def cmd_denoise(args) -> int:
    from .imgcore import ColorSpace, save
    from .regularize import tv_denoise

    o = _merged(args, {})
    _need(o, "input", "output")
    img = _load(o["input"], o)
    cfg = _reg(o)
    if img.channels > 1:
        # channelwise, so the colorspace of the input is kept
        planes = [tv_denoise(img.with_data(img.data[..., k], ColorSpace.GRAY), cfg).plane
                  for k in range(img.channels)]
        out = img.with_data(np.stack(planes, axis=-1))
    else:
        out = tv_denoise(img, cfg)
    save(out, o["output"])
    return EXIT_OK


def _levels(spec) -> list[tuple[int, int]]:
    if isinstance(spec, str):
        try:
            return [tuple(int(v) for v in part.lower().split("x")) for part in spec.split(",")]
        except ValueError as exc:
            raise ValidationError(f"levels look like '8x4,32x16', got {spec!r}") from exc
    return [tuple(int(v) for v in lv) for lv in spec]


def cmd_align(args) -> int:
    from . import align as al
    from .imgcore import save, to_colorspace

    o = _merged(args, {"levels": "4x4", "stride": 1, "overlap": 0.0})
    _need(o, "reference", "secondary")
    ref, sec = _load(o["reference"], o), _load(o["secondary"], o)
    gray = [to_colorspace(i, "GRAY") if i.channels > 1 else i for i in (ref, sec)]
    try:
        hier = al.PatchHierarchy([(nv, nh) for nh, nv in _levels(o["levels"])], float(o["overlap"]))
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    try:
        field = al.align(gray[0], gray[1], hier)
    except al.AlignmentError as exc:
        logger.error("%s; rejected fraction %.2f", exc, exc.rejected_fraction)
        return EXIT_RUNTIME
    if o.get("field"):
        Path(o["field"]).write_text(field.to_json())
    if o.get("field_csv"):
        al.write_glyph_csv(al.glyph_export(field, int(o["stride"])), o["field_csv"])
    if o.get("fidelity"):
        save(al.fidelity_raster(field), o["fidelity"])
    if o.get("warped"):
        save(al.warp(sec, field, "forward"), o["warped"])
    return EXIT_OK


def cmd_segment(args) -> int:
    from . import segment as sg
    from .imgcore import to_colorspace

    o = _merged(args, {"mu": 2e-4, "quantile": 0.2, "merge_tol": 0.05})
    _need(o, "input", "output")
    img = _load(o["input"], o)
    if img.channels > 1:
        img = to_colorspace(img, "GRAY")
    labels = sg.watershed_labels(img, float(o["mu"]), float(o["quantile"]), o["merge_tol"])
    sg.save_labels(labels, o["output"])
    return EXIT_OK


def cmd_phases(args) -> int:
    from . import segment as sg
    from .imgcore import save

    o = _merged(args, {"mode": "static", "drift_band": 0.0, "channel": "negkey", "mu": 0.0, "use_floor": True})
    _need(o, "input", "references", "threshold", "output")
    img = _load(o["input"], o)
    refs = [_load(p, o) for p in o["references"]]
    labels = sg.load_labels(o["labels"]) if o.get("labels") else None
    upper = float(o["upper"]) if o.get("upper") is not None else np.inf
    try:
        model = sg.ThresholdModel({-1: (float(o["threshold"]), upper)}, o["mode"], float(o["drift_band"]))
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    mask = sg.binary_concentration(img, refs, labels, model, _reg(o), o["channel"], bool(o["use_floor"]),
                                   o.get("min_area"))
    save(mask, o["output"])
    return EXIT_OK


def cmd_concentration(args) -> int:
    from . import quantify as qf
    from .imgcore import save

    o = _merged(args, {"channel": "negkey", "mu": 0.0, "porosity": 1.0, "depth": 1.0, "beta": 0.0})
    _need(o, "inputs", "references", "output_dir")
    if o.get("alpha") is None and o.get("rate") is None:
        raise ValidationError("give --alpha or --rate (calibration)")
    images = [_load(p, o) for p in o["inputs"]]
    times = o.get("times")
    if times is None:
        times = [im.timestamp for im in images]
    if any(t is None for t in times) or len(times) != len(images):
        raise ValidationError("one time per input image is required (--times or sidecar timestamps)")
    refs = [_load(p, o) for p in o["references"]]
    geom = qf.Geometry.for_image(images[0], float(o["porosity"]), float(o["depth"]))
    cfg = _reg(o)
    if o.get("alpha") is not None:
        model = qf.LinearConcentrationModel(float(o["alpha"]), float(o["beta"]))
    else:
        n = int(o.get("calibration_count") or len(images))
        model = qf.calibrate(images[:n], times[:n], float(o["rate"]), geom, refs, cfg, o["channel"])
    out = Path(o["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "model.json").write_text(json.dumps(model.to_dict(), indent=2, sort_keys=True))
    rows = []
    for k, (p, im, t) in enumerate(zip(o["inputs"], images, times)):
        c = qf.concentration(im, refs, model, cfg, o["channel"])
        save(c, out / f"{k:03d}_{Path(p).stem}.tif")
        rows.append([Path(p).name, float(t), qf.total_volume(c, geom)])
    qf.write_csv(["image", "time", "volume_m3"], rows, out / "volumes.csv")
    return EXIT_OK


def cmd_compare(args) -> int:
    from . import quantify as qf
    from .imgcore import save

    o = _merged(args, {})
    _need(o, "masks", "output", "fractions")
    if len(o["masks"]) < 2:
        raise ValidationError("compare needs at least two masks")
    masks = [_load(p, o) for p in o["masks"]]
    img, fr = qf.compare_segmentations(masks)
    save(img, o["output"])
    Path(o["output"]).with_suffix(".legend.json").write_text(
        json.dumps(qf.comparison_legend(len(masks)), indent=2, sort_keys=True))
    qf.write_csv(["category", "fraction"], [[k, v] for k, v in fr.items()], o["fractions"])
    return EXIT_OK


def cmd_fingers(args) -> int:
    from . import quantify as qf

    o = _merged(args, {"axis": "down", "min_spacing_px": 10.0, "min_prominence_px": 3.0, "hop_radius_px": 10.0})
    _need(o, "masks", "output")
    masks = [_load(p, o) for p in o["masks"]]
    if len(masks) < 2:
        raise ValidationError("tracking needs at least two masks")
    times = o.get("times") or [m.timestamp if m.timestamp is not None else float(k) for k, m in enumerate(masks)]
    roi = _box(o.get("roi"))
    tips = [qf.detect_finger_tips(m, roi, o["axis"], float(o["min_spacing_px"]), float(o["min_prominence_px"]))
            for m in masks]
    tracks = qf.track_fingers(tips, times, float(o["hop_radius_px"]) * masks[0].pitch[0], roi)
    qf.write_csv(["trajectory", "time", "x", "y"], qf.trajectories_table(tracks), o["output"])
    return EXIT_OK


def cmd_synth(args) -> int:
    from . import synthlab as sl

    o = _merged(args, {})
    _need(o, "kind", "output_dir")
    spec_dict = {}
    if o.get("spec"):
        p = Path(o["spec"])
        if not p.exists():
            raise ValidationError(f"spec file not found: {p}")
        from .pipeline import tomllib

        spec_dict = json.loads(p.read_text()) if p.suffix == ".json" else tomllib.loads(p.read_text())
    for key in ("seed", "rows", "cols", "width", "height", "noise"):
        if o.get(key) is not None:
            spec_dict[key] = o[key]
    for item in o.get("set") or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            spec_dict[k] = json.loads(v)
        except json.JSONDecodeError:
            spec_dict[k] = v
    try:
        spec = sl.SynthSpec.from_dict(spec_dict)
    except TypeError as exc:
        raise ValidationError(f"bad spec: {exc}") from exc
    write_synthetic(o["kind"], spec, Path(o["output_dir"]))
    return EXIT_OK


def write_synthetic(kind: str, spec, out: Path) -> list[Path]:
    """Write a generator's images plus truth files to ``out``."""
    from . import synthlab as sl
    from .imgcore import ColorSpace, new_image, save
    from .segment import LabelMap, save_labels

    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    truth: dict = {"kind": kind, "spec": spec.to_dict()}

    def img(name, image):
        written.append(save(image, out / name))

    if kind == "grain":
        g = sl.gen_grain_pack(spec)
        img("image.tif", g.image)
        img("indicator.png", g.indicator)
        truth.update(porosity=g.porosity)
    elif kind == "warp":
        w = sl.gen_warp_pair(spec)
        img("reference.tif", w.reference)
        img("secondary.tif", w.secondary)
        np.savez(out / "field_truth.npz", d_col=w.field_px[0], d_row=w.field_px[1])
        written.append(out / "field_truth.npz")
    elif kind == "plume":
        p = sl.gen_plume_sequence(spec)
        for k, r in enumerate(p.references):
            img(f"reference_{k:02d}.tif", r)
        for k, (f, m) in enumerate(zip(p.frames, p.masks)):
            img(f"frame_{k:03d}.tif", f)
            img(f"mask_{k:03d}.png", new_image(m.astype(float), spec.width, spec.height,
                                               timestamp=float(p.times[k]), colorspace=ColorSpace.BINARY))
        truth.update(times=p.times.tolist(), volumes=p.volumes.tolist(), alpha=p.alpha, beta=p.beta)
    elif kind == "laser":
        lg = sl.gen_laser_grid(spec)
        img("grid.tif", lg.image)
        truth.update(homography=np.asarray(lg.homography).tolist(), bulge=list(lg.bulge),
                     corners=np.asarray(lg.corners).tolist(), target_shape=list(lg.target_shape),
                     target_size=list(lg.target_size))
    elif kind == "facies":
        f = sl.gen_facies(spec)
        img("image.tif", f.image)
        written.append(save_labels(LabelMap(f.labels.astype(np.int32), spec.width, spec.height),
                                   out / "labels.png"))
    elif kind == "checker":
        c = sl.gen_color_checker(spec)
        img("checker.tif", c.image)
        truth.update(swatch_roi=[list(c.swatch_roi[0]), list(c.swatch_roi[1])], targets=c.targets.tolist())
    else:
        raise ValidationError(f"unknown generator {kind!r}")
    (out / "truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True))
    written.append(out / "truth.json")
    return written


def cmd_run(args) -> int:
    from .pipeline import ConfigError, load_config, run

    if not Path(args.pipeline).exists():
        raise ValidationError(f"config file not found: {args.pipeline}")
    try:
        cfg = load_config(args.pipeline)
        manifest = run(cfg)
    except ConfigError as exc:
        raise ValidationError(str(exc)) from exc
    print(json.dumps({"artifacts": len(manifest["artifacts"]), "failures": len(manifest["failures"])}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="physimg", description="Physical image analysis for porous media experiments.")
    p.add_argument("--version", action="version", version=f"physimg {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="TOML/JSON file; the [%s] table supplies defaults" % name)
        sp.add_argument("--width", type=float, help="physical width (m) for rasters without sidecar")
        sp.add_argument("--height", type=float, help="physical height (m) for rasters without sidecar")
        sp.set_defaults(func=func)
        return sp

    s = add("correct", cmd_correct, "color, geometric and drift correction of one image")
    s.add_argument("--input")
    s.add_argument("--output")
    s.add_argument("--color-roi", dest="color_roi", type=float, nargs=4, metavar=("X0", "Y0", "X1", "Y1"))
    s.add_argument("--corners", type=float, nargs=8, help="source pixel corners TL TR BR BL as x y pairs")
    s.add_argument("--target-width", dest="target_width", type=float)
    s.add_argument("--target-height", dest="target_height", type=float)
    s.add_argument("--bulge", type=float, nargs=2)
    s.add_argument("--drift-reference", dest="drift_reference")
    s.add_argument("--drift-roi", dest="drift_roi", type=float, nargs=4, metavar=("X0", "Y0", "X1", "Y1"))
    s.add_argument("--max-shift", dest="max_shift", type=int)

    s = add("denoise", cmd_denoise, "TV regularization")
    s.add_argument("--input")
    s.add_argument("--output")
    s.add_argument("--mu", type=float, help="regularization length (m)")
    s.add_argument("--omega", type=float)
    s.add_argument("--penalty", type=float)
    s.add_argument("--max-iter", dest="max_iter", type=int)
    s.add_argument("--tol", type=float)

    s = add("align", cmd_align, "multilevel pore-space alignment")
    s.add_argument("--reference")
    s.add_argument("--secondary")
    s.add_argument("--levels", help="patch grids (cols x rows) coarse to fine, e.g. 8x4,32x16")
    s.add_argument("--overlap", type=float)
    s.add_argument("--field", help="field JSON output")
    s.add_argument("--field-csv", dest="field_csv", help="glyph table CSV output")
    s.add_argument("--stride", type=int)
    s.add_argument("--fidelity", help="fidelity raster output (.png)")
    s.add_argument("--warped", help="warped secondary output")

    s = add("segment", cmd_segment, "watershed facies labels")
    s.add_argument("--input")
    s.add_argument("--output", help="16-bit label raster (.png/.tif)")
    s.add_argument("--mu", type=float)
    s.add_argument("--quantile", type=float)
    s.add_argument("--merge-tol", dest="merge_tol", type=float)

    s = add("phases", cmd_phases, "binary phase extraction")
    s.add_argument("--input")
    s.add_argument("--references", nargs="+")
    s.add_argument("--labels")
    s.add_argument("--threshold", type=float)
    s.add_argument("--upper", type=float)
    s.add_argument("--mode", choices=("static", "dynamic"))
    s.add_argument("--drift-band", dest="drift_band", type=float)
    s.add_argument("--channel")
    s.add_argument("--mu", type=float)
    s.add_argument("--min-area", dest="min_area", type=float)
    s.add_argument("--no-floor", dest="use_floor", action="store_const", const=False)
    s.add_argument("--output")

    s = add("concentration", cmd_concentration, "continuous concentration and volumes")
    s.add_argument("--inputs", nargs="+")
    s.add_argument("--times", type=float, nargs="+")
    s.add_argument("--references", nargs="+")
    s.add_argument("--alpha", type=float)
    s.add_argument("--beta", type=float)
    s.add_argument("--rate", type=float, help="injection rate (m^3/s) for calibration")
    s.add_argument("--calibration-count", dest="calibration_count", type=int)
    s.add_argument("--porosity", type=float)
    s.add_argument("--depth", type=float)
    s.add_argument("--channel")
    s.add_argument("--mu", type=float)
    s.add_argument("--output-dir", dest="output_dir")

    s = add("compare", cmd_compare, "compare binary segmentations")
    s.add_argument("--masks", nargs="+")
    s.add_argument("--output")
    s.add_argument("--fractions")

    s = add("fingers", cmd_fingers, "finger tip detection and tracking")
    s.add_argument("--masks", nargs="+")
    s.add_argument("--times", type=float, nargs="+")
    s.add_argument("--roi", type=float, nargs=4, metavar=("X0", "Y0", "X1", "Y1"))
    s.add_argument("--axis", choices=("down", "up", "left", "right"))
    s.add_argument("--min-spacing-px", dest="min_spacing_px", type=float)
    s.add_argument("--min-prominence-px", dest="min_prominence_px", type=float)
    s.add_argument("--hop-radius-px", dest="hop_radius_px", type=float)
    s.add_argument("--output")

    s = add("synth", cmd_synth, "write synthetic ground truth")
    s.add_argument("--kind", choices=("grain", "warp", "plume", "laser", "facies", "checker"))
    s.add_argument("--spec", help="TOML/JSON file with generator parameters")
    s.add_argument("--seed", type=int)
    s.add_argument("--rows", type=int)
    s.add_argument("--cols", type=int)
    s.add_argument("--noise", type=float)
    s.add_argument("--set", action="append", help="extra spec field as key=value (value parsed as JSON)")
    s.add_argument("--output-dir", dest="output_dir")

    s = sub.add_parser("run", help="execute a pipeline config")
    s.add_argument("pipeline", help="pipeline config (.toml or .json)")
    s.set_defaults(func=cmd_run)
    return p


def reference_markdown() -> str:
    """Markdown reference of all subcommands and flags, generated from the parser."""
    parser = build_parser()
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    lines = ["# physimg command reference", "",
             "Generated by `python -m physimg.cli --reference`. Each subcommand also reads",
             "defaults from the table of the same name in a `--config` TOML/JSON file.", "",
             "Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime error.", ""]
    for name, sp in sub.choices.items():
        lines += [f"## {name}", "", "```", sp.format_help().rstrip(), "```", ""]
    return "\n".join(lines)


def main(argv: Optional[Sequence[str]] = None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    if list(argv) == ["--reference"]:
        print(reference_markdown())
        return EXIT_OK
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"physimg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s %(message)s")
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"physimg: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        logger.debug("failure", exc_info=True)
        print(f"physimg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
