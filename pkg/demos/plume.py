"""Tracer plume: phase masks, calibration, volumes and finger tips.

The synthetic injection runs at 500 ml/h, then 1000 ml/h, then stops. Masks come
from differences to a fused stack of reference photographs, and the
concentration model is calibrated on the first stage only. The mask threshold
0.33 is the signal of concentration 0.5 under the generator's model.

    python demos/plume.py [output_dir]
"""
import sys
from pathlib import Path

from physimg.imgcore import save
from physimg.quantify import (
    Geometry,
    calibrate,
    compare_segmentations,
    concentration,
    detect_finger_tips,
    total_volume,
)
from physimg.regularize import RegularizationConfig
from physimg.segment import ThresholdModel, binary_concentration
from physimg.synthlab import ML_PER_HOUR, SynthSpec, gen_plume_sequence


def main(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    stages = ((3600.0, 500 * ML_PER_HOUR), (3600.0, 1000 * ML_PER_HOUR), (3600.0, 0.0))
    ps = gen_plume_sequence(SynthSpec(seed=1, rows=256, cols=256, width=1.0, height=1.0, noise=0.005,
                                      ripple=0.02, stages=stages, frames_per_stage=3, n_references=5))

    model = ThresholdModel.uniform(0.33)
    masks = []
    for k, (frame, truth) in enumerate(zip(ps.frames, ps.masks)):
        m = binary_concentration(frame, ps.references, None, model, min_area=1e-4)
        masks.append(m)
        iou = (truth & (m.plane > 0.5)).sum() / max((truth | (m.plane > 0.5)).sum(), 1)
        save(m, out / f"mask_{k:02d}.png")
        print(f"frame {k:2d} t={ps.times[k]:6.0f} s  mask IoU {iou:.3f}")

    geo = Geometry(ps.porosity, ps.depth, (1.0 / 256) ** 2)
    cfg = RegularizationConfig(mu=0.001)
    fit = calibrate(ps.frames[:3], ps.times[:3], 500 * ML_PER_HOUR, geo, [ps.reference], cfg)
    print(f"calibrated alpha {fit.alpha:.4f} (true {ps.alpha:.4f})")
    for f, t, v in zip(ps.frames, ps.times, ps.volumes):
        est = total_volume(concentration(f, [ps.reference], fit, cfg), geo)
        print(f"t={t:6.0f} s  volume {est * 1e6:7.1f} ml  injected {v * 1e6:7.1f} ml")

    _, fr = compare_segmentations([masks[2], masks[5], masks[8]])
    print("mask overlap at the end of each stage:", {k: round(v, 3) for k, v in fr.items()})
    tips = detect_finger_tips(masks[-1])
    print(f"{len(tips)} finger tips in the last frame")


if __name__ == "__main__":
    main(Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/plume"))
