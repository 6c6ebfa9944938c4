import numpy as np
import pytest
from PIL import Image


@pytest.fixture
def make_images(tmp_path):
    """Factory: write n seeded RGB PNGs, return (manifest_csv_path, paths)."""

    def _make(n, size=96, seed=0, subdir="imgs"):
        rng = np.random.default_rng(seed)
        root = tmp_path / subdir
        root.mkdir(parents=True, exist_ok=True)
        paths = []
        for i in range(n):
            arr = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
            p = root / f"img_{i:03d}.png"
            Image.fromarray(arr, mode="RGB").save(p)
            paths.append(p)
        manifest = tmp_path / f"{subdir}.csv"
        lines = ["path,label"] + [f"{p},0" for p in paths]
        manifest.write_text("\n".join(lines) + "\n")
        return manifest, paths

    return _make
