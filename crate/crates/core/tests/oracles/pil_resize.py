"""Reference resampling values from Pillow's float ("F") resize, per channel."""
import json
import sys

from PIL import Image


def pattern(w, h):
    # same formula as the Rust test: r = (37x + 11y) % 256, g = (5x * y + 3) % 256, b = 255 - r
    return [[((37 * x + 11 * y) % 256, (5 * x * y + 3) % 256, 255 - (37 * x + 11 * y) % 256)
             for x in range(w)] for y in range(h)]


def resize(w, h, ow, oh, method):
    px = pattern(w, h)
    planes = []
    for c in range(3):
        im = Image.new("F", (w, h))
        im.putdata([float(px[y][x][c]) for y in range(h) for x in range(w)])
        out = im.resize((ow, oh), method)
        planes.append([float(v) for v in out.getdata()])
    return planes


cases = []
for (w, h, ow, oh, name, method) in [
    (3, 5, 2, 2, "bilinear", Image.BILINEAR),
    (7, 5, 3, 4, "bicubic", Image.BICUBIC),
    (4, 3, 9, 7, "bilinear", Image.BILINEAR),
    (40, 30, 13, 11, "bicubic", Image.BICUBIC),
]:
    cases.append({"width": w, "height": h, "out_width": ow, "out_height": oh,
                  "filter": name, "planes": resize(w, h, ow, oh, method)})

json.dump({"source": "Pillow " + Image.__version__ if hasattr(Image, "__version__") else "Pillow",
           "cases": cases}, sys.stdout, indent=1)
sys.stdout.write("\n")
