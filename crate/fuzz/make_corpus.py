"""Writes the checked-in seed corpus for each fuzz target."""

import struct
from pathlib import Path

ROOT = Path(__file__).parent / "corpus"


def write(target, name, data):
    d = ROOT / target
    d.mkdir(parents=True, exist_ok=True)
    (d / name).write_bytes(data if isinstance(data, bytes) else data.encode())


def checkpoint(meta, tensors):
    out = b"LCSS" + struct.pack("<II", 1, len(meta)) + meta.encode()
    for name, shape, values in tensors:
        out += struct.pack("<H", len(name)) + name.encode() + bytes([len(shape)])
        out += b"".join(struct.pack("<I", d) for d in shape)
        out += b"".join(struct.pack("<f", v) for v in values)
    return out


def idx(dtype, dims, payload):
    return bytes([0, 0, dtype, len(dims)]) + b"".join(struct.pack(">I", d) for d in dims) + payload


meta = "run.name = seed\nsubspace.kind = linear\ncheckpoint.epochs = 1\n"
write("checkpoint_decode", "empty", checkpoint("", []))
write(
    "checkpoint_decode",
    "line",
    checkpoint(
        meta,
        [
            ("w1/fc1.weight", [2, 3], [0.5, -1.0, 0.0, 2.0, 1e-3, -0.0]),
            ("w2/fc1.weight", [2, 3], [0.25, 1.0, 3.0, -2.0, 7.0, 1.0]),
            ("w/norm1.bias", [2], [0.0, 1.0]),
            ("state/norm1.running_var", [2], [1.0, 0.5]),
        ],
    ),
)
write("checkpoint_decode", "truncated", checkpoint(meta, [("w/x", [4], [1.0, 2.0, 3.0, 4.0])])[:-3])

write("config_parse", "default", "")
write(
    "config_parse",
    "mlp_topk",
    "# MLP with a line of sparsities\nrun.name = mlp\nrun.seed = 3\nmodel.widths = 64,64\n"
    "subspace.kind = linear\ncompression.kind = unstructured\nsampler.mode = auto\n"
    "train.epochs = 4\ntrain.lr = 0.05\neval.grid_points = 9\n",
)
write(
    "config_parse",
    "cnn_structured",
    "model.arch = small_cnn\ndata.source = stripes\ndata.shape = 1,8,8\n"
    "norm.groups = per_channel\ncompression.kind = structured\ncompression.width_min = 0.25\n",
)
write(
    "config_parse",
    "baseline",
    "subspace.kind = point\nbaseline.kind = fixed_bits\nbaseline.bits = 4\n"
    "compression.kind = quantization\nsampler.set = 0.1,0.5\n",
)
write("config_parse", "bad_key", "train.epohcs = 3\n")

labels = idx(0x08, [2], bytes([1, 7]))
write("idx_parse", "images_labels", bytes([len(labels)]) + labels + idx(0x08, [2, 2, 2], bytes(range(8))))
write("idx_parse", "float", bytes([0]) + idx(0x0D, [2], struct.pack(">ff", 0.5, -1.0)))
write("idx_parse", "short", bytes([0]) + idx(0x08, [5], bytes(2)))

record = bytes([3]) + bytes(i % 256 for i in range(3 * 32 * 32))
write("cifar_parse", "one_record", record)
write("cifar_parse", "two_records", record + bytes([9]) + bytes(3 * 32 * 32))
write("cifar_parse", "partial", record[:100])
