"""Materialize the desk-scale assets: the synthetic test set in
directory-of-arrays form and the trained CNN checkpoint.

The checkpoint ships with the repository; this script only retrains it when
the file is missing (dataset generation is bit-deterministic, training is
deterministic on a fixed platform). Run from the repository root:

    python scripts/prepare_assets.py
"""

from pathlib import Path

from fret.desk import ensure_desk_assets, ensure_desk_dataset

ASSET_DIR = Path(__file__).resolve().parent.parent / "assets"


def main() -> None:
    checkpoint, _ = ensure_desk_assets(ASSET_DIR)
    dataset_dir = ensure_desk_dataset(ASSET_DIR / "desk10")
    print(f"checkpoint: {checkpoint}")
    print(f"dataset:    {dataset_dir}")


if __name__ == "__main__":
    main()
