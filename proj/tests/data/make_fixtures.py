# Regenerates the codec fixtures with Pillow, an encoder independent of the
# decoders under test. The pixel patterns are recomputed in test_data_io.cpp.
import gzip
import io
import os

from PIL import Image

HERE = os.path.dirname(os.path.abspath(__file__))


def pattern(x, y):
    return ((x * 7 + y * 13) ^ (x * y)) % 5


PALETTE = [0, 0, 0, 255, 255, 255, 200, 30, 10, 10, 180, 60, 90, 90, 250]


def indexed(w, h):
    im = Image.new("P", (w, h))
    im.putpalette(PALETTE + [0] * (768 - len(PALETTE)))
    im.putdata([pattern(x, y) for y in range(h) for x in range(w)])
    return im


def disk_mask(w, h):
    cx, cy, r = (w - 1) / 2, (h - 1) / 2, 0.45 * min(w, h)
    im = Image.new("L", (w, h))
    im.putdata([255 if (x - cx) ** 2 + (y - cy) ** 2 <= r * r else 0 for y in range(h) for x in range(w)])
    return im


def rgb(w, h):
    im = Image.new("RGB", (w, h))
    im.putdata([((x * 3) % 256, (y * 5 + x) % 256, (x + y * 2) % 256) for y in range(h) for x in range(w)])
    return im


indexed(7, 5).save(os.path.join(HERE, "small.gif"))
indexed(97, 61).save(os.path.join(HERE, "pattern.gif"))
indexed(33, 29).save(os.path.join(HERE, "interlaced.gif"), interlace=True)
disk_mask(565, 584).convert("P").save(os.path.join(HERE, "drive_mask.gif"))
rgb(13, 11).save(os.path.join(HERE, "rgb.tif"))
rgb(13, 11).save(os.path.join(HERE, "rgb.png"))
gray = Image.new("L", (13, 11))
gray.putdata([(x * 11 + y * 17) % 256 for y in range(11) for x in range(13)])
gray.save(os.path.join(HERE, "gray.png"))

buf = io.BytesIO()
rgb(13, 11).save(buf, format="PPM")
with gzip.GzipFile(os.path.join(HERE, "rgb.ppm.gz"), "wb", mtime=0) as f:
    f.write(buf.getvalue())
