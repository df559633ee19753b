"""Regenerates the golden DGFM files used by tests/golden.rs.

The oracle is PyWavelets plus plain numpy, independent of the Rust code.
PyWavelets' Haar detail filters have the opposite sign of ours, so
lh = -cV (width high-pass), hl = -cH (height high-pass), hh = cD.
Odd sizes use mode="reflect" (whole-sample reflection, index n-2).

Run from this directory: python3 generate.py
"""

import struct

import numpy as np
import pywt

EPS = 1e-5


def write(path, arr):
    arr = np.asarray(arr)
    tag = {np.dtype("float32"): 4, np.dtype("float64"): 8}[arr.dtype]
    n, c, h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"DGFM" + struct.pack("<IIIIIB", 1, n, c, h, w, tag))
        f.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def dwt2(x):
    bands = {k: np.zeros((x.shape[0], x.shape[1], (x.shape[2] + 1) // 2, (x.shape[3] + 1) // 2)) for k in ("ll", "lh", "hl", "hh")}
    for n in range(x.shape[0]):
        for c in range(x.shape[1]):
            ca, (ch, cv, cd) = pywt.dwt2(x[n, c], "haar", mode="reflect")
            bands["ll"][n, c], bands["lh"][n, c], bands["hl"][n, c], bands["hh"][n, c] = ca, -cv, -ch, cd
    return bands


def idwt2(b):
    out = []
    for n in range(b["ll"].shape[0]):
        out.append([
            pywt.idwt2((b["ll"][n, c], (-b["hl"][n, c], -b["lh"][n, c], b["hh"][n, c])), "haar")
            for c in range(b["ll"].shape[1])
        ])
    return np.array(out)


def perturb(x, alpha, beta):
    mu = x.mean(axis=(2, 3), keepdims=True)
    sigma = x.std(axis=(2, 3), keepdims=True)
    return alpha * sigma * (x - mu) / (sigma + EPS) + beta * mu


def main():
    rng = np.random.RandomState(20240611)

    for name, shape in [("haar_even", (2, 3, 4, 6)), ("haar_odd", (1, 2, 5, 3))]:
        x = rng.uniform(-2, 2, size=shape)
        write(f"{name}.in", x)
        for k, v in dwt2(x).items():
            write(f"{name}.{k}", v)

    x = rng.uniform(-1, 1, size=(1, 2, 4, 4)).astype(np.float32)
    write("haar_f32.in", x)
    for k, v in dwt2(x.astype(np.float64)).items():
        write(f"haar_f32.{k}", v.astype(np.float32))

    x = rng.uniform(-1, 1, size=(2, 3, 8, 8)) + np.arange(3).reshape(1, 3, 1, 1)
    alpha = rng.normal(1.0, 0.5, size=(2, 3, 1, 1))
    beta = rng.normal(1.0, 0.5, size=(2, 3, 1, 1))
    write("wavenp.in", x)
    write("wavenp.alpha", alpha)
    write("wavenp.beta", beta)
    b = dwt2(x)
    write("np.out", perturb(b["ll"], alpha, beta))
    b["ll"] = perturb(b["ll"], alpha, beta)
    write("wavenp.out", idwt2(b))


if __name__ == "__main__":
    main()
