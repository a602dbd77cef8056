"""Hand-written architecture description -> parameter and MAC counts.

Writes tests/data/architecture_audit.json, which test_evaluation.cpp
compares against the analytic accounting in the library.
"""
import json
import math
import sys


def conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def conv(cin, cout, k, s, p, bias, h, w):
    oh, ow = conv_out(h, k, s, p), conv_out(w, k, s, p)
    params = cin * cout * k * k + (cout if bias else 0)
    return params, oh * ow * cin * cout * k * k, oh, ow


def linear(cin, cout, bias, rows):
    return cin * cout + (cout if bias else 0), rows * cin * cout


def audit(h, w, channels=6, depth=4):
    p = {}
    m = {}
    ext = [8, 16, 24]
    enc = [8, 12, 16, 16, 16]
    dec = [16, 16, 16, 12, 8]
    dims = [16, 32, 64, 128]

    # extractor, applied to both frames
    cin, hh, ww, pp, mm = 3, h, w, 0, 0
    for c in ext:
        a, b, hh, ww = conv(cin, c, 3, 2, 1, False, hh, ww)
        pp, mm, cin = pp + a, mm + b, c
    p["extractor"], m["extractor"] = pp, 2 * mm

    # distortion encoder and its conditioning
    cin, hh, ww, pp, mm, pm, mmod = 6, h, w, 0, 0, 0, 0
    for i, c in enumerate(enc):
        a, b, hh, ww = conv(cin, c, 3, 2, 1, True, hh, ww)
        pp, mm, cin = pp + a, mm + b, c
        if i < 3:
            for _ in range(2):  # alpha and beta
                a, b, _, _ = conv(2 * ext[i], c, 1, 1, 0, True, hh, ww)
                pm, mmod = pm + a, mmod + b
    a, b, hh, ww = conv(cin, channels, 1, 1, 0, True, hh, ww)
    p["dist_enc"], m["dist_enc"] = pp + a, mm + b
    p["modulation"], m["modulation"] = pm, mmod

    # CNN distortion decoder from the latent grid
    lh, lw = math.ceil(h / 32), math.ceil(w / 32)
    cin, hh, ww, pp, mm = channels, lh, lw, 0, 0
    for c in dec:
        hh, ww = 2 * hh, 2 * ww
        a, b, _, _ = conv(cin, c, 3, 1, 1, True, hh, ww)
        pp, mm, cin = pp + a, mm + b, c
    p["dist_dec"], m["dist_dec"] = pp, mm

    # transforms and embeddings
    cin, hh, ww = 8, h, w
    pt = mt = pe = me = 0
    for s in range(depth):
        a, b, hh, ww = conv(cin, dims[s], 3, 4 if s == 0 else 2, 1, False, hh, ww)
        pt, mt, cin = pt + a, mt + b, dims[s]
        c = dims[s]
        hid = max(c // 4, 4)
        a, b, _, _ = conv(2, 1, 7, 1, 3, True, hh, ww)
        pe, me = pe + a, me + b
        for cin_, cout_ in ((c, hid), (hid, c)):
            a, b = linear(cin_, cout_, True, 1)
            pe, me = pe + a, me + b
        a, b, _, _ = conv(c, c, 1, 1, 0, True, hh, ww)
        pe, me = pe + a, me + b
    p["transform"], m["transform"] = pt, mt
    p["embed"], m["embed"] = pe, me

    # backbone + head (parameters only)
    pb = 3 * 16 * 9 + 16
    cin = 16
    for d in dims:
        pb += cin * d * 9 + d + d * d * 9 + d
        cin = d
    p["backbone"] = pb
    p["head"] = dims[-1] * 10 + 10

    return {
        "height": h,
        "width": w,
        "latent_channels": channels,
        "depth": depth,
        "params": p,
        "macs_per_pixel": {k: v / (h * w) for k, v in m.items()},
        "side_bpp": channels * math.ceil(h / 32) * math.ceil(w / 32) / (h * w),
    }


if __name__ == "__main__":
    out = [audit(720, 1280), audit(64, 64), audit(100, 150, channels=3, depth=2)]
    json.dump(out, sys.stdout, indent=2)
    sys.stdout.write("\n")
