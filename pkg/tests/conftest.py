import numpy as np
import pytest

from shuffleseg.data import synth_dataset


def naive_conv(x, kernels, stride=1, padding=0, dilation=1, groups=1, bias=None):
    """Loop-by-loop cross-correlation used as an independent oracle."""
    n, c, h, w = x.shape
    cout, cin_g, kh, kw = kernels.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, cout, ho, wo), dtype=np.float64)
    per_group = cout // groups
    for o in range(cout):
        g = o // per_group
        for b in range(n):
            for r in range(ho):
                for q in range(wo):
                    acc = 0.0
                    for ci in range(cin_g):
                        for i in range(kh):
                            for j in range(kw):
                                acc += kernels[o, ci, i, j] * xp[b, g * cin_g + ci, r * stride + i * dilation,
                                                                q * stride + j * dilation]
                    out[b, o, r, q] = acc + (0.0 if bias is None else bias[o])
    return out


def naive_tconv(x, kernels, stride, padding, groups=1, bias=None):
    """Scatter form of the transposed convolution; kernels are ``(in, out/g, kh, kw)``."""
    n, cin, h, w = x.shape
    _, cout_g, kh, kw = kernels.shape
    cin_g = cin // groups
    full = np.zeros((n, cout_g * groups, (h - 1) * stride + kh, (w - 1) * stride + kw))
    for b in range(n):
        for ci in range(cin):
            g = ci // cin_g
            for r in range(h):
                for q in range(w):
                    full[b, g * cout_g:(g + 1) * cout_g, r * stride:r * stride + kh, q * stride:q * stride + kw] += (
                        x[b, ci, r, q] * kernels[ci])
    out = full[:, :, padding:full.shape[2] - padding, padding:full.shape[3] - padding]
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out


def numeric_grad(f, arr, step=1e-5, indices=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (mutated in place, then restored)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = {}
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * step)
    return out


def assert_grad_close(analytic, numeric, tol=1e-4, floor=1e-6):
    flat = analytic.reshape(-1)
    for i, n in numeric.items():
        a = flat[i]
        err = abs(a - n) / max(abs(a), abs(n), floor)
        assert err < tol, f"index {i}: analytic {a} numeric {n} rel err {err}"


@pytest.fixture(scope="session")
def desk_corpus(tmp_path_factory):
    """The seeded synthetic corpus: 200 train / 50 val images, 64x128, 5 classes."""
    root = tmp_path_factory.mktemp("desk")
    synth_dataset(root, 0, 200, (64, 128), 5, "train")
    synth_dataset(root, 1, 50, (64, 128), 5, "val")
    return root


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    synth_dataset(root, 3, 16, (32, 64), 4, "train")
    synth_dataset(root, 4, 8, (32, 64), 4, "val")
    return root
