"""Show how encoder input crops are built from a sagittal and an axial slice.

Run with ``python3 demos/clahe_and_crops.py [output.png]``.  The figure compares
the raw crop with the CLAHE-enhanced crop that the encoders see.
"""
import sys
import tempfile

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from mscan.pipeline import PipelineConfig  # noqa: E402
from mscan.studyio import load_pixels  # noqa: E402
from mscan.synth import SynthParams, generate_study  # noqa: E402
from mscan.preprocess import prepare_crop  # noqa: E402


def main(out="crops.png"):
    cfg = PipelineConfig()
    with tempfile.TemporaryDirectory() as tmp:
        study, truth = generate_study(SynthParams(seed=4), 0, tmp)
        level = 2  # L3/L4
        sag = load_pixels(study.sagittal_slices[truth["best_slices"][level]])
        ax_index = truth["assignments"][level][1]
        ax = load_pixels(study.axial_slices[ax_index])

        rows = []
        for name, img, centre, size in [
            ("sagittal", sag, truth["keypoints"][level], cfg.sagittal_crop),
            ("axial", ax, truth["canal_centers"][ax_index], cfg.axial_crop),
        ]:
            raw = prepare_crop(img, centre, size, cfg.encoder_input, clahe_params=None)
            enhanced = prepare_crop(img, centre, size, cfg.encoder_input, cfg.clahe(name))
            print(f"{name:8s} crop {raw.shape}, raw range [{raw.min():.2f}, {raw.max():.2f}], "
                  f"enhanced range [{enhanced.min():.2f}, {enhanced.max():.2f}]")
            rows.append((name, img, raw, enhanced))

    fig, axes = plt.subplots(2, 3, figsize=(9, 6))
    for r, (name, img, raw, enhanced) in enumerate(rows):
        for c, (title, im) in enumerate([("full slice", img), ("crop", raw), ("crop + CLAHE", enhanced)]):
            axes[r, c].imshow(im, cmap="gray")
            axes[r, c].set_title(f"{name}: {title}")
            axes[r, c].axis("off")
    fig.tight_layout()
    fig.savefig(out, dpi=100)
    print("wrote", out)


if __name__ == "__main__":
    main(*sys.argv[1:])
