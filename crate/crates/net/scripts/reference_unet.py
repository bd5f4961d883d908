#!/usr/bin/env python3
"""Independent numpy implementation of the conditional U-Net forward pass.

Writes toy weight files and parity fixtures in the CDPA tensor container:

    python3 reference_unet.py OUT_DIR
"""

import json
import struct
import sys
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"CDPA"
EPS = 1e-5


def write_container(path, descriptor, tensors):
    body = bytearray(MAGIC)
    desc = descriptor.encode("utf-8")
    body += struct.pack("<III", 1, len(tensors), len(desc))
    body += desc
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        body += struct.pack("<I", len(raw)) + raw
        body += struct.pack("<BB", 0, arr.ndim)
        body += b"".join(struct.pack("<Q", d) for d in arr.shape)
        body += arr.tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(body))


def read_container(path):
    b = Path(path).read_bytes()
    assert b[:4] == MAGIC
    assert struct.unpack("<I", b[-4:])[0] == zlib.crc32(b[:-4]) & 0xFFFFFFFF
    _, count, dlen = struct.unpack_from("<III", b, 4)
    pos = 16
    desc = b[pos:pos + dlen].decode("utf-8")
    pos += dlen
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", b, pos)
        pos += 4
        name = b[pos:pos + nlen].decode("utf-8")
        pos += nlen
        dtype, rank = struct.unpack_from("<BB", b, pos)
        pos += 2
        assert dtype == 0
        dims = struct.unpack_from("<" + "Q" * rank, b, pos)
        pos += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(b, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float64)
        pos += 4 * n
    return json.loads(desc), out


def layout(d):
    c = d["channels"]
    levels = len(c)
    td = 4 * c[0]
    e = d["embed_dim"]
    out = []

    def lin(p, o, i):
        out.extend([(p + ".weight", (o, i)), (p + ".bias", (o,))])

    def conv(p, o, i, k=3):
        out.extend([(p + ".weight", (o, i, k, k)), (p + ".bias", (o,))])

    def norm(p, ch):
        out.extend([(p + ".weight", (ch,)), (p + ".bias", (ch,))])

    def res(p, ci, co):
        norm(p + ".norm1", ci)
        conv(p + ".conv1", co, ci)
        lin(p + ".emb", co, td)
        norm(p + ".norm2", co)
        conv(p + ".conv2", co, co)
        if ci != co:
            conv(p + ".skip", co, ci, 1)

    lin("emb.lin1", td, len(d["conditions"]) * e)
    lin("emb.lin2", td, td)
    conv("conv_in", c[0], d["in_channels"])
    for i in range(levels):
        res(f"down.{i}.res", c[0] if i == 0 else c[i - 1], c[i])
        if i + 1 < levels:
            conv(f"down.{i}.down", c[i], c[i])
    cb = c[-1]
    res("mid.res1", cb, cb)
    norm("mid.attn.norm", cb)
    for p in ("q", "k", "v", "out"):
        lin(f"mid.attn.{p}", cb, cb)
    norm("mid.xattn.norm", cb)
    lin("mid.xattn.q", cb, cb)
    lin("mid.xattn.k", cb, e)
    lin("mid.xattn.v", cb, e)
    lin("mid.xattn.out", cb, cb)
    res("mid.res2", cb, cb)
    for i in reversed(range(levels)):
        below = cb if i + 1 == levels else c[i + 1]
        res(f"up.{i}.res", below + c[i], c[i])
        if i > 0:
            conv(f"up.{i}.up", c[i], c[i])
    norm("norm_out", c[0])
    conv("conv_out", d["out_channels"], c[0])
    return out


def sinusoid(v, dim, max_period):
    half = dim // 2
    out = np.zeros(dim)
    for i in range(half):
        f = max_period ** (-i / half)
        out[2 * i] = np.sin(v * f)
        out[2 * i + 1] = np.cos(v * f)
    return out


def silu(x):
    return x / (1.0 + np.exp(-x))


def conv2d(x, w, b, stride=1):
    co, ci, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    h, wd = x.shape[1], x.shape[2]
    ho = (h + 2 * p - k) // stride + 1
    wo = (wd + 2 * p - k) // stride + 1
    out = np.zeros((co, ho, wo))
    for ky in range(k):
        for kx in range(k):
            patch = xp[:, ky:ky + stride * (ho - 1) + 1:stride, kx:kx + stride * (wo - 1) + 1:stride]
            out += np.einsum("oc,chw->ohw", w[:, :, ky, kx], patch)
    return out + b[:, None, None]


def group_norm(x, group_size, g, b):
    c, h, w = x.shape
    xs = x.reshape(c // group_size, -1)
    mean = xs.mean(axis=1, keepdims=True)
    var = xs.var(axis=1, keepdims=True)
    xs = (xs - mean) / np.sqrt(var + EPS)
    return xs.reshape(c, h, w) * g[:, None, None] + b[:, None, None]


def softmax(s):
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


class Net:
    def __init__(self, desc, w):
        self.d = desc
        self.w = w

    def res(self, p, x, emb):
        w, gs = self.w, self.d["group_size"]
        h = conv2d(silu(group_norm(x, gs, w[p + ".norm1.weight"], w[p + ".norm1.bias"])),
                   w[p + ".conv1.weight"], w[p + ".conv1.bias"])
        h = h + (w[p + ".emb.weight"] @ emb + w[p + ".emb.bias"])[:, None, None]
        h = conv2d(silu(group_norm(h, gs, w[p + ".norm2.weight"], w[p + ".norm2.bias"])),
                   w[p + ".conv2.weight"], w[p + ".conv2.bias"])
        skip = conv2d(x, w[p + ".skip.weight"], w[p + ".skip.bias"]) if p + ".skip.weight" in w else x
        return h + skip

    def attn(self, p, x, ctx=None):
        w = self.w
        c, hh, ww = x.shape
        t = group_norm(x, self.d["group_size"], w[p + ".norm.weight"], w[p + ".norm.bias"]).reshape(c, -1).T
        src = t if ctx is None else ctx
        q = t @ w[p + ".q.weight"].T + w[p + ".q.bias"]
        k = src @ w[p + ".k.weight"].T + w[p + ".k.bias"]
        v = src @ w[p + ".v.weight"].T + w[p + ".v.bias"]
        a = softmax(q @ k.T / np.sqrt(c))
        o = (a @ v) @ w[p + ".out.weight"].T + w[p + ".out.bias"]
        return x + o.T.reshape(c, hh, ww)

    def forward(self, x, cond):
        d, w = self.d, self.w
        values = [cond[k] for k in d["conditions"]]
        ctx = np.stack([sinusoid(v, d["embed_dim"], d["max_period"]) for v in values])
        emb = silu(w["emb.lin1.weight"] @ ctx.reshape(-1) + w["emb.lin1.bias"])
        emb = silu(w["emb.lin2.weight"] @ emb + w["emb.lin2.bias"])
        taps = {}
        levels = len(d["channels"])
        h = conv2d(x, w["conv_in.weight"], w["conv_in.bias"])
        taps["conv_in"] = h
        skips = []
        for i in range(levels):
            h = self.res(f"down.{i}.res", h, emb)
            taps[f"down.{i}"] = h
            skips.append(h)
            if i + 1 < levels:
                h = conv2d(h, w[f"down.{i}.down.weight"], w[f"down.{i}.down.bias"], stride=2)
        h = self.res("mid.res1", h, emb)
        h = self.attn("mid.attn", h)
        h = self.attn("mid.xattn", h, ctx)
        h = self.res("mid.res2", h, emb)
        taps["mid"] = h
        for i in reversed(range(levels)):
            h = self.res(f"up.{i}.res", np.concatenate([h, skips[i]]), emb)
            taps[f"up.{i}"] = h
            if i > 0:
                up = h.repeat(2, axis=1).repeat(2, axis=2)
                h = conv2d(up, w[f"up.{i}.up.weight"], w[f"up.{i}.up.bias"])
        h = silu(group_norm(h, d["group_size"], w["norm_out.weight"], w["norm_out.bias"]))
        return conv2d(h, w["conv_out.weight"], w["conv_out.bias"]), taps


def descriptor(mode, channels, group_size, embed_dim, image_size):
    noise = mode == "noise-prediction"
    return {
        "architecture": "cdpa-unet",
        "mode": mode,
        "in_channels": 2 if noise else 1,
        "out_channels": 1,
        "channels": channels,
        "group_size": group_size,
        "embed_dim": embed_dim,
        "max_period": 10000.0,
        "conditions": (["timestep"] if noise else []) + ["slice-index", "num-views"],
        "image_size": image_size,
        "data_scale": 1.0,
    }


def random_weights(desc, rng):
    out = []
    for name, shape in layout(desc):
        if name.endswith((".norm1.weight", ".norm2.weight", ".norm.weight")) or name == "norm_out.weight":
            arr = 1.0 + 0.1 * rng.standard_normal(shape)
        elif name.endswith(".bias"):
            arr = 0.05 * rng.standard_normal(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            arr = rng.standard_normal(shape) / np.sqrt(fan_in)
        out.append((name, arr.astype(np.float32)))
    return out


def cond_key(k):
    return {"timestep": "timestep", "slice-index": "slice_index", "num-views": "num_views"}[k]


def export(out_dir, stem, desc, seed, cases):
    rng = np.random.default_rng(seed)
    tensors = random_weights(desc, rng)
    write_container(out_dir / f"{stem}.cdpa", json.dumps(desc), tensors)
    _, loaded = read_container(out_dir / f"{stem}.cdpa")
    net = Net(desc, loaded)
    size = desc["image_size"]
    for j, cond in enumerate(cases):
        yy, xx = np.mgrid[0:size, 0:size] / size
        x = np.stack([np.sin(6.0 * xx + 2.0 * j) * np.cos(4.0 * yy) + 0.3 * rng.standard_normal((size, size))
                      for _ in range(desc["in_channels"])])
        x = x.astype(np.float32).astype(np.float64)
        values = {k: cond[cond_key(k)] for k in desc["conditions"]}
        y, taps = net.forward(x, values)
        fixture = [("input", x), ("expected_output", y)]
        for k in desc["conditions"]:
            fixture.append((cond_key(k), np.array([float(cond[cond_key(k)])])))
        fixture += [("activation." + name, a) for name, a in taps.items()]
        header = json.dumps({"kind": "unet-parity", "note": f"{stem} case {j}"})
        write_container(out_dir / f"{stem}_parity_{j}.cdpa", header, fixture)


def main():
    out_dir = Path(sys.argv[1] if len(sys.argv) > 1 else "fixtures")
    out_dir.mkdir(parents=True, exist_ok=True)
    export(out_dir, "toy_noise", descriptor("noise-prediction", [8, 16, 32], 4, 8, 16), 20240611, [
        {"timestep": 980, "slice_index": 0, "num_views": 20},
        {"timestep": 400, "slice_index": 17, "num_views": 60},
        {"timestep": 20, "slice_index": 63, "num_views": 200},
    ])
    export(out_dir, "toy_denoise", descriptor("denoise", [8, 16, 32], 4, 8, 16), 7, [
        {"slice_index": 5, "num_views": 20},
    ])


if __name__ == "__main__":
    main()
