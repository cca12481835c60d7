"""Binary checkpoints for trained modules.

Layout, all little-endian:

    magic "TFWI" | version u32 | tag (u16 len + utf-8)
    | header (u32 len + utf-8 "key=value" lines)
    | tensor count u32
    | per tensor: name (u16 len + utf-8), ndim u8, dims u32 each,
      payload length u64, float64 bytes

Weights round-trip bit-exactly; any version or magic mismatch is a hard
error rather than a best-effort load.
"""

import struct

import numpy as np

MAGIC = b"TFWI"
FORMAT_VERSION = 1
TAGS = ("tokenizer", "backbone", "diffusion")


class CheckpointError(ValueError):
    """Corrupt, truncated, or incompatible checkpoint file."""


def _pack_str(s, width="H"):
    raw = s.encode("utf-8")
    return struct.pack(f"<{width}", len(raw)) + raw


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(f"<{fmt}", self.take(struct.calcsize(f"<{fmt}")))

    def string(self, width="H"):
        (n,) = self.unpack(width)
        return self.take(n).decode("utf-8")


def _encode_header(header):
    lines = []
    for k in sorted(header):
        v = header[k]
        if "\n" in str(k) or "\n" in str(v) or "=" in str(k):
            raise ValueError(f"header entry not encodable: {k!r}")
        lines.append(f"{k}={v}")
    return "\n".join(lines)


def _decode_header(text):
    out = {}
    for line in text.splitlines():
        if not line:
            continue
        k, _, v = line.partition("=")
        out[k] = v
    return out


def save_checkpoint(path, tag, header, arrays):
    """Persist named float arrays with a module tag and config header."""
    if tag not in TAGS:
        raise ValueError(f"unknown module tag {tag!r}, expected one of {TAGS}")
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), _pack_str(tag)]
    htext = _encode_header(header).encode("utf-8")
    chunks.append(struct.pack("<I", len(htext)))
    chunks.append(htext)
    names = sorted(arrays)
    chunks.append(struct.pack("<I", len(names)))
    for name in names:
        # asarray with order="C", not ascontiguousarray: the latter
        # promotes 0-d arrays to shape (1,)
        arr = np.asarray(arrays[name], dtype="<f8", order="C")
        chunks.append(_pack_str(name))
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        raw = arr.tobytes()
        chunks.append(struct.pack("<Q", len(raw)))
        chunks.append(raw)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path):
    """Returns (tag, header dict, {name: float64 array}); bit-exact."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    (version,) = r.unpack("I")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version}, expected {FORMAT_VERSION}")
    tag = r.string()
    if tag not in TAGS:
        raise CheckpointError(f"{path}: unknown module tag {tag!r}")
    (hlen,) = r.unpack("I")
    header = _decode_header(r.take(hlen).decode("utf-8"))
    (count,) = r.unpack("I")
    arrays = {}
    for _ in range(count):
        name = r.string()
        (ndim,) = r.unpack("B")
        shape = r.unpack(f"{ndim}I") if ndim else ()
        (nbytes,) = r.unpack("Q")
        expect = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        if nbytes != expect:
            raise CheckpointError(
                f"{path}: tensor {name!r} payload {nbytes} bytes, "
                f"expected {expect}")
        arrays[name] = np.frombuffer(r.take(nbytes),
                                     dtype="<f8").reshape(shape).copy()
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return tag, header, arrays


# --- module-aware wrappers ------------------------------------------------

def save_tokenizer(tok, path):
    cfg = tok.cfg
    header = {
        "variant": cfg.variant, "K": cfg.K, "input_size": cfg.input_size,
        "latent_dim": cfg.d, "channels": ",".join(map(str, cfg.channels)),
        "full_scale": int(cfg.full_scale),
    }
    if cfg.variant == "wide":
        header["blocks"] = cfg.blocks
        header["heads"] = cfg.heads
    save_checkpoint(path, "tokenizer", header, tok.state_arrays())


def load_tokenizer(path):
    from .tokenizer import TokenizerConfig, VQTokenizer
    tag, h, arrays = load_checkpoint(path)
    if tag != "tokenizer":
        raise CheckpointError(f"{path}: expected a tokenizer, found {tag}")
    cfg = TokenizerConfig(
        h["variant"], K=int(h["K"]), input_size=int(h["input_size"]),
        full_scale=bool(int(h["full_scale"])), latent_dim=int(h["latent_dim"]),
        channels=tuple(int(c) for c in h["channels"].split(",")),
        blocks=int(h.get("blocks", 2)), heads=int(h.get("heads", 4)))
    tok = VQTokenizer(cfg, np.random.default_rng(0))
    tok.load_state_arrays(arrays)
    return tok


def save_backbone(model, path):
    cfg = model.cfg
    header = {
        "mode": cfg.mode, "layers": cfg.layers, "heads": cfg.heads,
        "width": cfg.width, "ff_mult": cfg.ff_mult,
        "dropout": repr(cfg.dropout), "K": cfg.K,
        "latent_dim": cfg.latent_dim, "token_grid": cfg.token_grid,
        "num_sources": cfg.num_sources, "num_timesteps": cfg.num_timesteps,
        "num_receivers": cfg.num_receivers, "patch_time": cfg.patch_time,
        "families": ",".join(cfg.families),
    }
    save_checkpoint(path, "backbone", header, model.state_arrays())


def load_backbone(path):
    from .backbone import Backbone, BackboneConfig
    tag, h, arrays = load_checkpoint(path)
    if tag != "backbone":
        raise CheckpointError(f"{path}: expected a backbone, found {tag}")
    cfg = BackboneConfig(
        mode=h["mode"], layers=int(h["layers"]), heads=int(h["heads"]),
        width=int(h["width"]), ff_mult=int(h["ff_mult"]),
        dropout=float(h.get("dropout", 0.0)), K=int(h["K"]),
        latent_dim=int(h["latent_dim"]), token_grid=int(h["token_grid"]),
        num_sources=int(h["num_sources"]),
        num_timesteps=int(h["num_timesteps"]),
        num_receivers=int(h["num_receivers"]),
        patch_time=int(h["patch_time"]),
        families=tuple(h["families"].split(",")))
    model = Backbone(cfg, np.random.default_rng(0))
    model.load_state_arrays(arrays)
    return model
