"""Walk through slice geometry and level matching on one synthetic study.

Run with ``python3 demos/geometry_and_matching.py``.  Nothing is trained here:
the ground-truth keypoints written by the generator stand in for the U-Net.
"""
import tempfile

import numpy as np

from mscan.geometry import match_levels, project_to_3d, slice_plane_z
from mscan.studyio import LEVELS, load_study
from mscan.synth import SynthParams, generate_study


def main():
    with tempfile.TemporaryDirectory() as tmp:
        # A single noiseless study keeps the printout easy to check by eye.
        study, truth = generate_study(SynthParams(noise=0.0, seed=3), 0, tmp)
        study = load_study(study.root)
        print(f"{study.study_id}: {len(study.sagittal_slices)} sagittal slices, "
              f"{len(study.axial_slices)} axial slices")

        # Each level keypoint lives in pixel space on its best sagittal slice.
        # The slice affine lifts it into patient millimetres.
        print("\nlevel   keypoint (row, col)   best slice   patient z (mm)")
        for level, kp, best in zip(LEVELS, truth["keypoints"], truth["best_slices"]):
            p = project_to_3d(study.sagittal_slices[best].geometry, kp)
            print(f"{level:6s}  ({kp[0]:5.1f}, {kp[1]:5.1f})        {best:3d}          {p.z:8.2f}")

        # Axial slices are keyed by the z of their centre pixel.
        zs = [slice_plane_z(s.geometry, s.rows, s.cols) for s in study.axial_slices]
        print(f"\naxial z range: {min(zs):.1f} to {max(zs):.1f} mm")

        # Each level takes the three axial slices closest in z.
        table = match_levels(study, truth["keypoints"], truth["best_slices"])
        print("\nlevel   matched axial slices   generator truth")
        for level, got, want in zip(LEVELS, table.tolist(), truth["assignments"]):
            print(f"{level:6s}  {str(got):20s}   {want}")
        print("\nall levels match:", np.array_equal(table, np.array(truth["assignments"])))


if __name__ == "__main__":
    main()
