"""Convert the public Indian Pines / Salinas MATLAB releases to HSC/HSL.

    python scripts/convert_mat.py indian_pines RAW_DIR OUT_DIR
    python scripts/convert_mat.py salinas RAW_DIR OUT_DIR

RAW_DIR holds the uncorrected cubes (Indian_pines.mat, Salinas.mat, all
sensor bands) and the ground truth files (Indian_pines_gt.mat,
Salinas_gt.mat). The water-absorption bands are recorded in the cube's
EXCLUDE line and dropped on load. OUT_DIR is what LUMVIT_HSI_DIR should
point at for the HSI acceptance checks.
"""

import argparse
import os
import sys

from lumvit.data import INDIAN_PINES_EXCLUDE, SALINAS_EXCLUDE, convert_mat, convert_mat_labels, load_cube

DATASETS = {
    "indian_pines": ("Indian_pines.mat", "indian_pines", "Indian_pines_gt.mat", "indian_pines_gt",
                     INDIAN_PINES_EXCLUDE),
    "salinas": ("Salinas.mat", "salinas", "Salinas_gt.mat", "salinas_gt", SALINAS_EXCLUDE),
}


def main(argv=None):
    p = argparse.ArgumentParser(description="MATLAB hyperspectral release -> HSC/HSL")
    p.add_argument("dataset", choices=sorted(DATASETS))
    p.add_argument("raw_dir")
    p.add_argument("out_dir")
    args = p.parse_args(argv)
    cube_file, cube_key, gt_file, gt_key, exclude = DATASETS[args.dataset]
    os.makedirs(args.out_dir, exist_ok=True)
    cube_out = os.path.join(args.out_dir, f"{args.dataset}.hsc")
    gt_out = os.path.join(args.out_dir, f"{args.dataset}_gt.hsl")
    convert_mat(os.path.join(args.raw_dir, cube_file), cube_key, cube_out, exclude=exclude)
    convert_mat_labels(os.path.join(args.raw_dir, gt_file), gt_key, gt_out)
    cube = load_cube(cube_out)
    print(f"{cube_out}: {cube.height}x{cube.width}, {cube.channels} of {cube.bands} bands kept")
    print(f"{gt_out}: written")
    return 0


if __name__ == "__main__":
    sys.exit(main())
