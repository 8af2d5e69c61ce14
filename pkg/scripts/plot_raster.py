"""Overlay input and output spike rasters written by ``turbidspike evaluate``.

    python scripts/plot_raster.py out/eval/raster.csv raster.png
"""

import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from turbidspike.metrics import read_raster  # noqa: E402

STYLE = {"input": dict(color="0.6", s=4, marker="|"), "output": dict(color="tab:red", s=6, marker=".")}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("raster", help="CSV with columns set_name, neuron, step")
    ap.add_argument("out", help="image file to write")
    args = ap.parse_args(argv)

    sets = read_raster(args.raster)
    fig, ax = plt.subplots(figsize=(8, 5))
    for name, pairs in sets.items():
        if len(pairs):
            ax.scatter(pairs[:, 1], pairs[:, 0], label=f"{name} ({len(pairs)})", **STYLE.get(name, {"s": 4}))
    ax.set_xlabel("time step")
    ax.set_ylabel("neuron (y * W + x)")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)


if __name__ == "__main__":
    main()
