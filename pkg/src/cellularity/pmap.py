"""Multi-channel probability maps and the PMAP container format.

A PMAP file is one JSON header line followed by the raw payload::

    {"magic":"PMAP1","width":W,"height":H,"channels":[...],"dtype":"f32le"}\\n
    <channel-major, row-major little-endian float32 values>
"""
from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

MAGIC = "PMAP1"
DTYPE = "f32le"
_PAYLOAD_DTYPE = np.dtype("<f4")


class Channel(str, enum.Enum):
    NORMAL = "Normal"
    LYMPHOCYTE = "Lymphocyte"
    MALIGNANT = "Malignant"
    BACKGROUND = "Background"

    def __str__(self) -> str:
        return self.value


CANONICAL_CHANNELS = tuple(c.value for c in Channel)
NUCLEUS_CHANNELS = (Channel.NORMAL.value, Channel.LYMPHOCYTE.value, Channel.MALIGNANT.value)


class PmapError(ValueError):
    """Raised for malformed maps or PMAP files."""


def _channel_name(name) -> str:
    try:
        return Channel(str(name)).value
    except ValueError:
        raise PmapError(f"unknown channel name {name!r}") from None


@dataclass(frozen=True, eq=False)
class PixelMap:
    """Immutable named-channel raster with values in [0, 1].

    ``data`` has shape ``(n_channels, height, width)`` and dtype float32, the
    same element type the container stores, so saving never loses bits.
    """

    channels: tuple
    data: np.ndarray

    def __post_init__(self):
        channels = tuple(_channel_name(c) for c in self.channels)
        if len(set(channels)) != len(channels):
            raise PmapError(f"duplicate channel names in {channels}")
        data = np.asarray(self.data)
        if data.ndim == 2 and len(channels) == 1:
            data = data[None]
        if data.ndim != 3 or data.shape[0] != len(channels):
            raise PmapError(
                f"data shape {data.shape} does not match {len(channels)} channel(s)")
        data = np.array(data, dtype=np.float32, order="C", copy=True)
        _check_range(data, channels)
        data.setflags(write=False)
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_dict(cls, planes: dict) -> "PixelMap":
        """Build a map from ``{channel name: 2-D array}`` in insertion order."""
        names = list(planes)
        return cls(tuple(names), np.stack([np.asarray(planes[n]) for n in names]))

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple:
        return self.height, self.width

    def __contains__(self, name) -> bool:
        return str(name) in self.channels

    def channel(self, name) -> np.ndarray:
        """Return the (read-only) plane for ``name``; channels are looked up by name only."""
        key = _channel_name(name)
        try:
            return self.data[self.channels.index(key)]
        except ValueError:
            raise KeyError(f"map has no {key} channel (has {list(self.channels)})") from None

    def select(self, names: Iterable) -> "PixelMap":
        names = [_channel_name(n) for n in names]
        return PixelMap(tuple(names), np.stack([self.channel(n) for n in names]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, PixelMap):
            return NotImplemented
        return (self.channels == other.channels
                and self.data.shape == other.data.shape
                and np.array_equal(self.data.view(np.uint32), other.data.view(np.uint32)))

    __hash__ = None

    def __repr__(self) -> str:
        return f"PixelMap({self.width}x{self.height}, channels={list(self.channels)})"


def _check_range(data: np.ndarray, channels: Sequence[str]) -> None:
    flat = data.reshape(len(channels), data.shape[1] * data.shape[2])
    bad = ~((flat >= 0.0) & (flat <= 1.0))  # catches NaN too
    if bad.any():
        c, idx = np.argwhere(bad)[0]
        value = float(flat[c, idx])
        raise PmapError(
            f"value {value!r} outside [0,1] in channel {channels[c]} at index {idx}")


def save_pmap(pmap: PixelMap, path) -> None:
    if not pmap.channels:
        raise PmapError("refusing to save a map with no channels")
    header = {"magic": MAGIC, "width": pmap.width, "height": pmap.height,
              "channels": list(pmap.channels), "dtype": DTYPE}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n")
        fh.write(pmap.data.astype(_PAYLOAD_DTYPE, copy=False).tobytes(order="C"))


def load_pmap(path) -> PixelMap:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise PmapError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise PmapError(f"{path}: malformed header: {exc}") from None
    if not isinstance(header, dict) or header.get("magic") != MAGIC:
        raise PmapError(f"{path}: not a PMAP1 file")
    if header.get("dtype") != DTYPE:
        raise PmapError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    width, height, channels = header.get("width"), header.get("height"), header.get("channels")
    if (not isinstance(width, int) or not isinstance(height, int) or width < 1 or height < 1
            or not isinstance(channels, list) or not channels):
        raise PmapError(f"{path}: malformed header fields")
    payload = raw[nl + 1:]
    expected = width * height * len(channels) * _PAYLOAD_DTYPE.itemsize
    if len(payload) != expected:
        raise PmapError(f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype=_PAYLOAD_DTYPE).reshape(len(channels), height, width)
    return PixelMap(tuple(channels), data)


def pmap_file_size(width: int, height: int, channels: Sequence[str]) -> int:
    """Size in bytes that :func:`save_pmap` produces for the given geometry."""
    header = {"magic": MAGIC, "width": width, "height": height,
              "channels": [_channel_name(c) for c in channels], "dtype": DTYPE}
    return (len(json.dumps(header, separators=(",", ":")).encode("utf-8")) + 1
            + width * height * len(channels) * _PAYLOAD_DTYPE.itemsize)


def downscale2(pmap: PixelMap) -> PixelMap:
    """Halve both dimensions by averaging each 2x2 block, per channel."""
    if pmap.height % 2 or pmap.width % 2:
        raise PmapError(f"downscale2 needs even dimensions, got {pmap.width}x{pmap.height}")
    d = pmap.data.astype(np.float64)
    c, h, w = d.shape
    blocks = d.reshape(c, h // 2, 2, w // 2, 2)
    out = (blocks[:, :, 0, :, 0] + blocks[:, :, 0, :, 1]
           + blocks[:, :, 1, :, 0] + blocks[:, :, 1, :, 1]) / 4.0
    return PixelMap(pmap.channels, out)


def list_pmaps(directory) -> list:
    """Sorted ``(patch_id, path)`` pairs for every ``*.pmap`` file in ``directory``."""
    names = sorted(n for n in os.listdir(directory) if n.endswith(".pmap"))
    return [(n[:-len(".pmap")], os.path.join(directory, n)) for n in names]
