"""Regenerate the shipped 256x3-byte colormap table.

The packaged asset is committed so the library never needs matplotlib at
runtime; run this only when changing the ramp.
"""

from pathlib import Path

import numpy as np
from matplotlib import colormaps


def main() -> None:
    ramp = colormaps["inferno"](np.linspace(0.0, 1.0, 256))[:, :3]
    table = np.rint(ramp * 255.0).astype(np.uint8)
    out = Path(__file__).resolve().parents[1] / "src" / "cfp" / "assets" / "inferno.cmap"
    out.write_bytes(table.tobytes())
    print(f"wrote {out} ({out.stat().st_size} bytes)")


if __name__ == "__main__":
    main()
