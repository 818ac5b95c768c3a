"""Toy external codec for the subprocess contract: JPEG via Pillow.

encode: PPM on stdin -> JPEG bytes on stdout (``encode QUALITY``)
decode: JPEG bytes on stdin -> PPM on stdout (``decode``)
"""
import io
import sys

from PIL import Image


def main():
    mode = sys.argv[1]
    data = sys.stdin.buffer.read()
    img = Image.open(io.BytesIO(data)).convert("RGB")
    out = io.BytesIO()
    if mode == "encode":
        img.save(out, format="JPEG", quality=int(sys.argv[2]))
    else:
        img.save(out, format="PPM")
    sys.stdout.buffer.write(out.getvalue())


if __name__ == "__main__":
    main()
