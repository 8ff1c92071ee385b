"""Slow, obviously-correct reference implementations used only by tests."""
import math

import numpy as np


def conv1d_loops(x, w, bias, stride=1):
    """out[b,o,i] = bias[o] + sum_{c,j} w[o,c,j] * x_pad[b,c,i*stride+j]."""
    b, c_in, length = x.shape
    c_out, _, k = w.shape
    pad = (k - 1) // 2
    x_pad = np.zeros((b, c_in, length + 2 * pad))
    x_pad[:, :, pad:pad + length] = x
    out_len = math.ceil(length / stride)
    out = np.zeros((b, c_out, out_len))
    for n in range(b):
        for o in range(c_out):
            for i in range(out_len):
                acc = float(bias[o])
                for c in range(c_in):
                    for j in range(k):
                        acc += float(w[o, c, j]) * float(x_pad[n, c, i * stride + j])
                out[n, o, i] = acc
    return out


def sos_impulse_response(sections, n):
    """Run a unit impulse through each biquad with its difference equation."""
    y = np.zeros(n)
    y[0] = 1.0
    for b0, b1, b2, a0, a1, a2 in np.asarray(sections, dtype=float):
        x, y = y, np.zeros(n)
        for t in range(n):
            acc = b0 * x[t]
            if t >= 1:
                acc += b1 * x[t - 1] - a1 * y[t - 1]
            if t >= 2:
                acc += b2 * x[t - 2] - a2 * y[t - 2]
            y[t] = acc / a0
    return y


def magnitude_db(h, fs, freq):
    """|H(freq)| in dB from the DFT of an impulse response h."""
    spectrum = np.fft.rfft(h)
    bins = np.fft.rfftfreq(h.size, 1.0 / fs)
    return 20 * np.log10(abs(spectrum[np.argmin(np.abs(bins - freq))]))


def enumerate_windows(n, w, s):
    starts, start = [], 0
    while start + w <= n:
        starts.append(start)
        start += s
    return starts


def central_difference(f, x, step=1e-6):
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return g


def rel_err(a, b, floor=1e-5):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
