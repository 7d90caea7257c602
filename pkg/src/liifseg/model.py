"""Segmentation network: residual convolutional encoder plus an implicit pixel decoder.

The encoder downsamples an RGB image by 4x into a grid of latent codes. The
decoder turns the grid into class logits at any requested output resolution,
either by a four-neighbor locally-ensembled per-query MLP (``ensemble``, the
default) or by bilinear upsampling of the reduced latent volume followed by a
single MLP pass (``bilinear``).
"""

import dataclasses
import json
import math
import struct

import numpy as np

from . import numerics as nx
from .errors import (
    CheckpointCorruptionError,
    CheckpointFormatError,
    ConfigError,
    ParameterError,
    ShapeError,
)

CHECKPOINT_MAGIC = b"FPLF"
CHECKPOINT_VERSION = 1

# queries decoded per slice during no-grad inference, to bound peak memory
_QUERY_CHUNK = 16384


@dataclasses.dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``norm_mean``/``norm_std`` define the fixed input normalization applied to
    [0, 1] RGB inside :func:`encode`; they travel with checkpoints.
    """

    in_channels: int = 3
    base_width: int = 64
    group_sizes: tuple = (2, 6, 16)
    rcmlp_dims: tuple = (256, 64)
    head_width: int = 256
    head_depth: int = 4
    num_classes: int = 12
    decode_mode: str = "ensemble"
    input_resolution: int = 256
    norm_mean: float = 0.5
    norm_std: float = 0.5

    def validate(self):
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.base_width < 1:
            raise ConfigError(f"base_width must be >= 1, got {self.base_width}")
        if len(self.group_sizes) != 3 or any(g < 1 for g in self.group_sizes):
            raise ConfigError(f"group_sizes must be three positive counts, got {self.group_sizes}")
        if len(self.rcmlp_dims) != 2 or any(d < 1 for d in self.rcmlp_dims):
            raise ConfigError(f"rcmlp_dims must be two positive widths, got {self.rcmlp_dims}")
        if self.head_width < 1 or self.head_depth < 1:
            raise ConfigError(
                f"head_width/head_depth must be >= 1, got {self.head_width}/{self.head_depth}"
            )
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.decode_mode not in ("ensemble", "bilinear"):
            raise ConfigError(f"decode_mode must be 'ensemble' or 'bilinear', got {self.decode_mode!r}")
        if self.input_resolution < 4 or self.input_resolution % 4:
            raise ConfigError(
                f"input_resolution must be a positive multiple of 4, got {self.input_resolution}"
            )
        if self.norm_std <= 0:
            raise ConfigError(f"norm_std must be > 0, got {self.norm_std}")

    @property
    def head_in(self):
        # reduced latent channels + pooled global feature + 2 coordinate channels
        return self.rcmlp_dims[1] + self.base_width + 2

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["group_sizes"] = list(self.group_sizes)
        d["rcmlp_dims"] = list(self.rcmlp_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        kwargs = dict(d)
        if "group_sizes" in kwargs:
            kwargs["group_sizes"] = tuple(kwargs["group_sizes"])
        if "rcmlp_dims" in kwargs:
            kwargs["rcmlp_dims"] = tuple(kwargs["rcmlp_dims"])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


@dataclasses.dataclass
class LatentGrid:
    """Encoder output: a spatial grid of latent codes, N x D x h x w."""

    features: nx.Tensor

    @property
    def shape(self):
        return self.features.shape


@dataclasses.dataclass
class QueryGrid:
    """Cell-center query coordinates for an out_h x out_w output raster."""

    out_h: int
    out_w: int
    coords: np.ndarray  # (out_h * out_w, 2) of normalized (y, x)


class Model:
    """A materialized parameter set plus its config.

    Parameters live in an insertion-ordered dict with stable dotted names
    (e.g. ``enc.group0.block1.conv0.weight``); the ordering defines the
    checkpoint payload layout.
    """

    def __init__(self, config, params):
        self.config = config
        self.params = params

    def parameters(self):
        return self.params.values()

    def named_parameters(self):
        return self.params.items()

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def cell_coordinates(n):
    """Normalized centers of ``n`` cells spanning [-1, 1]."""
    if n < 1:
        raise ParameterError(f"cell_coordinates: n must be >= 1, got {n}")
    i = np.arange(n, dtype=np.float64)
    return -1.0 + (2.0 * i + 1.0) / n


def query_grid(out_h, out_w):
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"query_grid: size {out_h}x{out_w} invalid")
    cy = cell_coordinates(out_h)
    cx = cell_coordinates(out_w)
    yy, xx = np.meshgrid(cy, cx, indexing="ij")
    return QueryGrid(out_h, out_w, np.stack([yy.reshape(-1), xx.reshape(-1)], axis=1))


def ensemble_weights(x_q, neighbor_centers):
    """Blend weights for the four latent cells around a query point.

    Each weight is proportional to the area of the axis-aligned rectangle
    between the query and the *diagonally opposite* neighbor center, so the
    weights vary continuously and sum to one. Degenerate zero-area cells fall
    back to uniform 0.25.
    """
    x_q = np.asarray(x_q, dtype=np.float64)
    centers = np.asarray(neighbor_centers, dtype=np.float64)
    if centers.shape != (4, 2):
        raise ShapeError(f"ensemble_weights: need four 2-d centers, got {centers.shape}")
    rel = x_q[None, :] - centers
    areas = np.abs(rel[:, 0] * rel[:, 1])
    opposite = areas[[3, 2, 1, 0]]
    total = opposite.sum()
    if total == 0.0:
        return np.full(4, 0.25)
    return opposite / total


def _kaiming_uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _parameter_specs(config):
    """Yield (name, shape, kind) for every parameter, in checkpoint order.

    kind is 'fan_in' (Kaiming-uniform init), 'zero', or 'one'.
    """

    def conv(name, cout, cin, k):
        yield f"{name}.weight", (cout, cin, k, k), "fan_in"
        yield f"{name}.bias", (cout,), "zero"

    def norm(name, c):
        yield f"{name}.gamma", (c,), "one"
        yield f"{name}.beta", (c,), "zero"

    def dense(name, dout, din):
        yield f"{name}.weight", (dout, din), "fan_in"
        yield f"{name}.bias", (dout,), "zero"

    d = config.base_width
    yield from conv("enc.stem", d, config.in_channels, 3)
    for gi, blocks in enumerate(config.group_sizes):
        for bi in range(blocks):
            prefix = f"enc.group{gi}.block{bi}"
            yield from conv(f"{prefix}.conv0", d, d, 3)
            yield from norm(f"{prefix}.norm0", d)
            yield from conv(f"{prefix}.conv1", d, d, 3)
            yield from norm(f"{prefix}.norm1", d)
        if gi < 2:
            yield from conv(f"enc.down{gi}", d, d, 3)

    r0, r1 = config.rcmlp_dims
    yield from dense("dec.rcmlp.fc0", r0, 9 * d)
    yield from dense("dec.rcmlp.fc1", r1, r0)
    widths = [config.head_in] + [config.head_width] * config.head_depth
    for li in range(config.head_depth):
        yield from dense(f"dec.head.fc{li}", widths[li + 1], widths[li])
    yield from dense("dec.head.out", config.num_classes, config.head_width)


def build_model(config, seed):
    """Materialize and initialize all parameters deterministically from ``seed``."""
    config.validate()
    rng = np.random.default_rng(seed)
    dtype = nx.default_dtype()
    params = {}
    for name, shape, kind in _parameter_specs(config):
        if kind == "fan_in":
            fan_in = int(np.prod(shape[1:]))
            arr = _kaiming_uniform(rng, shape, fan_in, dtype)
        elif kind == "one":
            arr = np.ones(shape, dtype=dtype)
        else:
            arr = np.zeros(shape, dtype=dtype)
        params[name] = nx.tensor(arr, requires_grad=True)
    return Model(config, params)


def count_params(model):
    return sum(p.size for p in model.parameters())


# ---------------------------------------------------------------------------
# forward graph


def _resblock(x, params, prefix, eps=1e-5):
    h = nx.conv2d(x, params[f"{prefix}.conv0.weight"], params[f"{prefix}.conv0.bias"], 1, 1)
    h = nx.instance_norm(h, params[f"{prefix}.norm0.gamma"], params[f"{prefix}.norm0.beta"], eps)
    h = nx.relu(h)
    h = nx.conv2d(h, params[f"{prefix}.conv1.weight"], params[f"{prefix}.conv1.bias"], 1, 1)
    h = nx.instance_norm(h, params[f"{prefix}.norm1.gamma"], params[f"{prefix}.norm1.beta"], eps)
    return nx.add(h, x)


def encode(model, image):
    """Produce the latent grid for a batch of [0, 1] RGB images.

    Input is N x in_channels x H x W with H and W divisible by 4; the output
    grid is N x base_width x H/4 x W/4.
    """
    cfg = model.config
    if image.ndim != 4 or image.shape[1] != cfg.in_channels:
        raise ShapeError(
            f"encode: expected N x {cfg.in_channels} x H x W input, got shape {image.shape}"
        )
    if image.shape[2] % 4 or image.shape[3] % 4:
        raise ShapeError(
            f"encode: spatial extents must be divisible by 4, got {image.shape[2]}x{image.shape[3]}"
        )
    p = model.params
    x = nx.scale(nx.shift(image, -cfg.norm_mean), 1.0 / cfg.norm_std)
    x = nx.conv2d(x, p["enc.stem.weight"], p["enc.stem.bias"], 1, 1)
    for gi, blocks in enumerate(cfg.group_sizes):
        skip = x
        for bi in range(blocks):
            x = _resblock(x, p, f"enc.group{gi}.block{bi}")
        x = nx.add(x, skip)
        if gi < 2:
            x = nx.conv2d(x, p[f"enc.down{gi}.weight"], p[f"enc.down{gi}.bias"], 2, 1)
    return LatentGrid(x)


def _reduce_latent(model, z):
    """unfold 3x3 context then shrink channels with the two-layer reducer MLP."""
    p = model.params
    u = nx.unfold3x3(z)
    w0, b0 = p["dec.rcmlp.fc0.weight"], p["dec.rcmlp.fc0.bias"]
    w1, b1 = p["dec.rcmlp.fc1.weight"], p["dec.rcmlp.fc1.bias"]
    # 1x1 convs reuse the linear weights per spatial location
    h = nx.conv2d(u, nx.reshape(w0, w0.shape + (1, 1)), b0, 1, 0)
    h = nx.relu(h)
    return nx.conv2d(h, nx.reshape(w1, w1.shape + (1, 1)), b1, 1, 0)


def _head_linear(model, feat):
    p = model.params
    h = feat
    for li in range(model.config.head_depth):
        h = nx.relu(nx.linear(h, p[f"dec.head.fc{li}.weight"], p[f"dec.head.fc{li}.bias"]))
    return nx.linear(h, p["dec.head.out.weight"], p["dec.head.out.bias"])


def _head_conv(model, feat):
    p = model.params
    h = feat
    for li in range(model.config.head_depth):
        w, b = p[f"dec.head.fc{li}.weight"], p[f"dec.head.fc{li}.bias"]
        h = nx.relu(nx.conv2d(h, nx.reshape(w, w.shape + (1, 1)), b, 1, 0))
    w, b = p["dec.head.out.weight"], p["dec.head.out.bias"]
    return nx.conv2d(h, nx.reshape(w, w.shape + (1, 1)), b, 1, 0)


def _ensemble_queries(model, zhat, g, coords):
    """Per-query four-neighbor ensemble over the reduced latent grid.

    For each query: sample the four surrounding cells (half-cell shifted
    nearest sampling), run the head on [cell code, global code, query - cell
    center], and blend with opposite-rectangle area weights.
    """
    n, _, h, w = zhat.shape
    m = coords.shape[0]
    cy = cell_coordinates(h)
    cx = cell_coordinates(w)
    ry, rx = 1.0 / h, 1.0 / w

    corner_logits = []
    corner_areas = []
    for dy in (-1.0, 1.0):
        for dx in (-1.0, 1.0):
            shifted = coords + np.array([dy * ry, dx * rx])
            iy = nx.nearest_cell_index(shifted[:, 0], h)
            ix = nx.nearest_cell_index(shifted[:, 1], w)
            centers = np.stack([cy[iy], cx[ix]], axis=1)
            rel = coords - centers
            z_t = nx.grid_sample_nearest(zhat, shifted)
            rel_t = nx.tensor(
                np.broadcast_to(rel.astype(zhat.dtype)[None], (n, m, 2)).copy()
            )
            g_t = nx.repeat_middle(g, m)
            feat = nx.concat((z_t, g_t, rel_t), axis=2)
            corner_logits.append(_head_linear(model, feat))
            corner_areas.append(np.abs(rel[:, 0] * rel[:, 1]))

    areas = np.stack(corner_areas, axis=0)
    # weight of a corner is the area spanned toward the diagonally opposite one
    weights = areas[[3, 2, 1, 0]]
    total = weights.sum(axis=0)
    degenerate = total == 0.0
    total[degenerate] = 1.0
    weights = weights / total
    weights[:, degenerate] = 0.25

    c = model.config.num_classes
    out = None
    for t in range(4):
        w_t = nx.tensor(
            np.broadcast_to(
                weights[t].astype(zhat.dtype)[None, :, None], (n, m, c)
            ).copy()
        )
        term = nx.mul(corner_logits[t], w_t)
        out = term if out is None else nx.add(out, term)
    return out


def decode(model, latent, out_h, out_w, mode=None):
    """Decode a latent grid into class logits at resolution out_h x out_w."""
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"decode: output size {out_h}x{out_w} invalid")
    mode = mode or model.config.decode_mode
    z = latent.features
    n = z.shape[0]
    g = nx.global_avg_pool(z)
    zhat = _reduce_latent(model, z)

    if mode == "bilinear":
        zb = nx.resize_bilinear(zhat, out_h, out_w)
        g_map = nx.repeat_spatial(g, out_h, out_w)
        grid = query_grid(out_h, out_w)
        pos = grid.coords.reshape(out_h, out_w, 2).transpose(2, 0, 1)
        pos_t = nx.tensor(np.broadcast_to(pos.astype(z.dtype)[None], (n, 2, out_h, out_w)).copy())
        feat = nx.concat((zb, g_map, pos_t), axis=1)
        return _head_conv(model, feat)

    if mode != "ensemble":
        raise ParameterError(f"decode: unknown mode {mode!r}")
    coords = query_grid(out_h, out_w).coords
    m = coords.shape[0]
    if nx.is_grad_enabled() and any(p.requires_grad for p in model.parameters()):
        flat = _ensemble_queries(model, zhat, g, coords)
    else:
        chunks = []
        for start in range(0, m, _QUERY_CHUNK):
            chunks.append(_ensemble_queries(model, zhat, g, coords[start : start + _QUERY_CHUNK]))
        flat = chunks[0] if len(chunks) == 1 else nx.concat(chunks, axis=1)
    shaped = nx.reshape(flat, (n, out_h, out_w, model.config.num_classes))
    return nx.transpose(shaped, (0, 3, 1, 2))


def forward(model, image, out_h, out_w):
    """Encode then decode: image batch -> logits N x num_classes x out_h x out_w."""
    return decode(model, encode(model, image), out_h, out_w)


# ---------------------------------------------------------------------------
# checkpoint I/O
#
# layout: magic "FPLF" | u32 version | u64 header length | UTF-8 JSON header
# | raw little-endian float32 payload. The header records the config and the
# ordered tensor table (name, shape, dtype, offset into the payload).


def save_checkpoint(model, path):
    records = []
    offset = 0
    blobs = []
    for name, p in model.named_parameters():
        blob = p.data.astype("<f4").tobytes()
        records.append(
            {"name": name, "shape": list(p.shape), "dtype": "<f4", "offset": offset}
        )
        offset += len(blob)
        blobs.append(blob)
    header = json.dumps(
        {"config": model.config.to_dict(), "tensors": records, "payload_bytes": offset}
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"{path}: unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )
    (header_len,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + header_len:
        raise CheckpointCorruptionError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        records = header["tensors"]
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointCorruptionError(f"{path}: unreadable header ({e})") from None
    payload = raw[16 + header_len :]
    if len(payload) < header.get("payload_bytes", 0):
        raise CheckpointCorruptionError(
            f"{path}: payload truncated ({len(payload)} of {header['payload_bytes']} bytes)"
        )
    dtype = nx.default_dtype()
    params = {}
    for rec in records:
        shape = tuple(rec["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = rec["offset"]
        end = start + 4 * count
        if rec.get("dtype") != "<f4" or end > len(payload):
            raise CheckpointCorruptionError(
                f"{path}: tensor {rec['name']!r} record inconsistent with payload"
            )
        arr = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape)
        params[rec["name"]] = nx.tensor(arr.astype(dtype), requires_grad=True)
    expected = {name: shape for name, shape, _ in _parameter_specs(config)}
    actual = {name: p.shape for name, p in params.items()}
    if actual != expected:
        raise CheckpointCorruptionError(f"{path}: tensor table does not match the config architecture")
    return Model(config, params)
