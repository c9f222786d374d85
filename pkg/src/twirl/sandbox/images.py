"""Validity checks for intermediate images produced by executed code."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

REASONS = ("ok", "blank", "solid_color", "too_small", "unreadable")


@dataclass(frozen=True)
class ImageThresholds:
    stddev_min: float = 2.0  # per-channel max stddev on the 0-255 scale
    min_side: int = 28
    blank_luminance_high: float = 250.0
    blank_luminance_low: float = 5.0


@dataclass(frozen=True)
class ImageVerdict:
    valid: bool
    reason: str
    pixel_stddev: float = 0.0
    width: int = 0
    height: int = 0

    @property
    def stats(self) -> dict:
        return {"pixel_stddev": self.pixel_stddev, "width": self.width, "height": self.height}

    def to_dict(self) -> dict:
        return {"valid": self.valid, "reason": self.reason, "stats": self.stats}

    @classmethod
    def from_dict(cls, d: dict) -> "ImageVerdict":
        s = d.get("stats", {})
        return cls(d["valid"], d["reason"], float(s.get("pixel_stddev", 0.0)), int(s.get("width", 0)), int(s.get("height", 0)))


def _load_rgb(path) -> Image.Image:
    with Image.open(path) as im:
        im.load()
        if im.mode in ("RGBA", "LA", "PA") or (im.mode == "P" and "transparency" in im.info):
            rgba = im.convert("RGBA")
            canvas = Image.new("RGBA", rgba.size, (255, 255, 255, 255))
            return Image.alpha_composite(canvas, rgba).convert("RGB")
        return im.convert("RGB")


def validate_image(path, thresholds: ImageThresholds = ImageThresholds()) -> ImageVerdict:
    try:
        rgb = _load_rgb(path)
    except Exception:
        return ImageVerdict(False, "unreadable")
    w, h = rgb.size
    if min(w, h) < thresholds.min_side:
        return ImageVerdict(False, "too_small", 0.0, w, h)
    px = np.asarray(rgb, dtype=np.float64).reshape(-1, 3)
    stddev = float(px.std(axis=0).max())
    if stddev < thresholds.stddev_min:
        # ITU-R 601 luma, same weights as PIL's "L" conversion
        lum = float((px @ np.array([0.299, 0.587, 0.114])).mean())
        blank = lum > thresholds.blank_luminance_high or lum < thresholds.blank_luminance_low
        return ImageVerdict(False, "blank" if blank else "solid_color", stddev, w, h)
    return ImageVerdict(True, "ok", stddev, w, h)
