# %% [markdown]
# What is inside a bundle file
#
# Header, sorted metadata, a layer table, raw payloads and a CRC-32 trailer.
# Here we build one from an untrained model, walk the table by hand with
# ``struct``, and then break it.

# %%
import struct
import zlib

import numpy as np

from mmscene import bundle as bd
from mmscene import quantizer as qz
from mmscene.config import tiny_config
from mmscene.model import Model

model = Model.init(tiny_config(), 0)
w = model.params["head.fc1.w"]
layers = {"head.fc1.w": qz.quantize_weights(w, np.full(w.shape[0], 0.05))}
data = bd.to_bytes(bd.bundle_from_model(model, layers, {"quant.bits": "4", "quant.alpha": "0.99"}))
print(len(data), "bytes")

# %% header
magic, version, flags, meta_len = struct.unpack_from("<4sHHI", data, 0)
print(magic, "version", version, "flags", bin(flags))
meta = data[12:12 + meta_len].decode()
print(meta.splitlines()[:4], "...")

# %% layer table
pos = 12 + meta_len
(n,) = struct.unpack_from("<I", data, pos)
pos += 4
for _ in range(n):
    (nlen,) = struct.unpack_from("<H", data, pos)
    name = data[pos + 2:pos + 2 + nlen].decode()
    pos += 2 + nlen
    tag, rank = struct.unpack_from("<BB", data, pos)
    dims = struct.unpack_from(f"<{rank}I", data, pos + 2)
    offset, length = struct.unpack_from("<QQ", data, pos + 2 + 4 * rank)
    pos += 2 + 4 * rank + 16
    if tag or name.startswith("head"):
        print(f"{name:<14} tag={tag} shape={dims} offset={offset} length={length}")

# %% the int4 payload: low nibble first, two's complement
q = layers["head.fc1.w"]
print("first codes ", q.codes.ravel()[:6])
print("first bytes ", [hex(b) for b in q.packed[:3]])

# %% trailer
(crc,) = struct.unpack("<I", data[-4:])
print("crc ok:", crc == zlib.crc32(data[:-4]))

broken = bytearray(data)
broken[100] ^= 0x01
try:
    bd.from_bytes(bytes(broken))
except bd.BundleCorruptError as e:
    print("flipped one bit:", e)

print("round trip identical:", bd.to_bytes(bd.from_bytes(data)) == data)
