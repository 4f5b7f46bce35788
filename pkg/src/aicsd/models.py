"""Small encoder-decoder segmentation networks and their checkpoint format.

Checkpoint layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"AICSDNET"
    8       4     uint32 format version (currently 1)
    12      8     uint64 header length N
    20      N     UTF-8 JSON header:
                    {"config": {ToyNetConfig fields},
                     "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...],
                     "meta": {...free-form...}}
    20+N    D     concatenated raw tensor bytes (C order); offsets are relative
                  to the start of this block
    20+N+D  4     uint32 CRC32 of every preceding byte

Any truncation or bit flip is caught by the CRC check before tensors are read.
"""

import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from aicsd.errors import CheckpointError, ConfigurationError

MAGIC = b"AICSDNET"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_CRC = struct.Struct("<I")


@dataclass(frozen=True)
class ToyNetConfig:
    width: int = 16
    depth: int = 2
    num_classes: int = 4
    seed: int = 0
    in_channels: int = 3

    def __post_init__(self):
        if self.width < 4:
            raise ConfigurationError(f"width must be >= 4, got {self.width}")
        if self.depth < 1:
            raise ConfigurationError(f"depth must be >= 1, got {self.depth}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")


def teacher_config(num_classes=4, seed=0):
    return ToyNetConfig(width=64, depth=3, num_classes=num_classes, seed=seed)


def student_config(num_classes=4, seed=0):
    return ToyNetConfig(width=16, depth=2, num_classes=num_classes, seed=seed)


def _conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class ToySegNet(nn.Module):
    """U-shaped encoder-decoder with bilinear upsampling.

    Stage ``k`` of the encoder has ``width * 2**k`` channels.  Inputs whose
    sides are not multiples of ``2**depth`` are padded internally and the
    logits are cropped back, so output ``H, W`` always equal the input's.
    """

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.frozen = False
        w, d = config.width, config.depth
        chans = [w * 2**k for k in range(d + 1)]
        self.stem = _conv_block(config.in_channels, chans[0])
        self.down = nn.ModuleList(_conv_block(chans[k], chans[k + 1]) for k in range(d))
        self.up = nn.ModuleList(_conv_block(chans[k + 1] + chans[k], chans[k]) for k in reversed(range(d)))
        self.head = nn.Conv2d(chans[0], config.num_classes, 1)

    @property
    def num_classes(self):
        return self.config.num_classes

    def train(self, mode=True):
        # a frozen network stays in inference mode
        return super().train(mode and not self.frozen)

    def forward(self, x):
        h, w = x.shape[-2:]
        m = 2**self.config.depth
        ph, pw = (-h) % m, (-w) % m
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        skips = []
        x = self.stem(x)
        for block in self.down:
            skips.append(x)
            x = block(F.max_pool2d(x, 2))
        for block in self.up:
            skip = skips.pop()
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = block(torch.cat([x, skip], dim=1))
        return self.head(x)[..., :h, :w]


def build_toy_segnet(config):
    """Build a network whose initial weights depend only on ``config.seed``."""
    if not isinstance(config, ToyNetConfig):
        raise ConfigurationError("expected a ToyNetConfig")
    saved_state = torch.random.get_rng_state()
    torch.manual_seed(config.seed)
    try:
        net = ToySegNet(config)
    finally:
        torch.random.set_rng_state(saved_state)
    return net


def count_parameters(net):
    return sum(p.numel() for p in net.parameters())


def freeze(net):
    """Mark ``net`` as a fixed teacher: no gradients, permanent eval mode. Idempotent."""
    for p in net.parameters():
        p.requires_grad_(False)
    net.frozen = True
    net.eval()
    return net


def save_checkpoint(net, path, meta=None):
    path = Path(path)
    state = net.state_dict()
    entries, blobs, offset = [], [], 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().contiguous().numpy()
        raw = arr.tobytes()
        entries.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"config": asdict(net.config), "tensors": entries, "meta": meta or {}}, sort_keys=True
    ).encode("utf-8")
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(blobs)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + _CRC.pack(zlib.crc32(body)))
    tmp.replace(path)


def read_checkpoint(path):
    """Parse a checkpoint file into ``(config, state_dict, meta)``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < _PREFIX.size + _CRC.size:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    magic, version, header_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    body, (crc,) = data[: -_CRC.size], _CRC.unpack(data[-_CRC.size :])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch, file is truncated or corrupt")
    start = _PREFIX.size
    try:
        header = json.loads(body[start : start + header_len].decode("utf-8"))
        config = ToyNetConfig(**header["config"])
        blob = body[start + header_len :]
        state = {}
        for e in header["tensors"]:
            chunk = blob[e["offset"] : e["offset"] + e["nbytes"]]
            arr = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
            state[e["name"]] = torch.from_numpy(arr.copy())
    except (KeyError, TypeError, ValueError, ConfigurationError) as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}") from exc
    return config, state, header.get("meta", {})


def load_checkpoint(path, expected_config=None):
    """Rebuild the network stored at ``path``.

    If ``expected_config`` is given, its architecture fields must match the
    stored ones.
    """
    config, state, _ = read_checkpoint(path)
    if expected_config is not None:
        for key in ("width", "depth", "num_classes", "in_channels"):
            if getattr(expected_config, key) != getattr(config, key):
                raise CheckpointError(
                    f"{path}: {key}={getattr(config, key)} in checkpoint, expected {getattr(expected_config, key)}"
                )
    net = build_toy_segnet(config)
    try:
        net.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: state does not fit the stored config: {exc}") from exc
    return net
