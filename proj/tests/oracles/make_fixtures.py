"""Independent reference values for the test suite.

Run once; outputs are committed under tests/data and data/, and the scalar
values printed at the end are pinned in the C++ tests.
"""
import pathlib

import numpy as np
from skimage import color
from skimage.metrics import peak_signal_noise_ratio, structural_similarity
from PIL import Image

ROOT = pathlib.Path(__file__).resolve().parents[2]
DATA = ROOT / "tests" / "data"


def half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def gamut_cells(grid=10.0, stride=4):
    levels = list(range(0, 256, stride))
    if levels[-1] != 255:
        levels.append(255)
    lv = np.array(levels, dtype=np.float64) / 255.0
    r, g, b = np.meshgrid(lv, lv, lv, indexing="ij")
    rgb = np.stack([r, g, b], axis=-1).reshape(-1, 1, 3)
    lab = color.rgb2lab(rgb).reshape(-1, 3)
    i = half_away(lab[:, 1] / grid).astype(int)
    j = half_away(lab[:, 2] / grid).astype(int)
    return sorted(set(zip(i.tolist(), j.tolist())))


def write_gamut():
    cells = gamut_cells()
    out = ROOT / "data" / "gamut_grid10.txt"
    with open(out, "w") as f:
        f.write(f"grid=10 Q={len(cells)}\n")
        for q, (i, j) in enumerate(cells):
            f.write(f"{q} {i * 10} {j * 10}\n")
    print("gamut Q", len(cells), "corner(110,110)", (11, 11) in cells, "origin", (0, 0) in cells)
    for s in (1, 2, 8):
        print("  stride", s, "Q", len(gamut_cells(stride=s)))


def luma(img):
    img = img.astype(np.float64)
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def natural(rng, h, w):
    y, x = np.mgrid[0:h, 0:w] / np.array([h, w]).reshape(2, 1, 1)
    base = np.zeros((h, w, 3))
    for c in range(3):
        f1, f2, ph = rng.uniform(0.5, 4, 2).tolist() + [rng.uniform(0, 6.28)]
        base[..., c] = 128 + 80 * np.sin(f1 * 6.28 * x + ph) * np.cos(f2 * 6.28 * y)
    cx, cy, rad = rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.1, 0.3)
    disk = (x - cx) ** 2 + (y - cy) ** 2 < rad**2
    base[disk] = rng.uniform(0, 255, 3)
    base += rng.normal(0, 6, base.shape)
    return np.clip(np.rint(base), 0, 255).astype(np.uint8)


def perturb(rng, ref, kind):
    img = ref.astype(np.float64)
    if kind == 0:
        img += rng.normal(0, rng.uniform(2, 30), img.shape)
    elif kind == 1:
        img = img * rng.uniform(0.6, 1.2) + rng.uniform(-20, 20)
    elif kind == 2:
        img = np.roll(img, int(rng.integers(1, 4)), axis=1)
    else:
        img[..., int(rng.integers(0, 3))] = rng.uniform(0, 255)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def write_metrics():
    rng = np.random.default_rng(20240611)
    d = DATA / "metrics"
    rows = []
    for k in range(20):
        h, w = int(rng.integers(24, 48)), int(rng.integers(24, 48))
        ref = natural(rng, h, w)
        pred = perturb(rng, ref, k % 4)
        Image.fromarray(ref).save(d / f"pair{k:02d}_ref.png")
        Image.fromarray(pred).save(d / f"pair{k:02d}_pred.png")
        p = peak_signal_noise_ratio(ref, pred, data_range=255)
        s = structural_similarity(luma(ref), luma(pred), data_range=255, gaussian_weights=True, sigma=1.5,
                                  use_sample_covariance=False, K1=0.01, K2=0.03)
        rows.append((f"pair{k:02d}", p, s))
    with open(d / "oracle.tsv", "w") as f:
        f.write("name\tpsnr\tssim\n")
        for n, p, s in rows:
            f.write(f"{n}\t{p:.17g}\t{s:.17g}\n")
    ref = np.array(Image.open(d / "pair00_ref.png"))
    neg = 255 - ref
    s = structural_similarity(luma(ref), luma(neg), data_range=255, gaussian_weights=True, sigma=1.5,
                              use_sample_covariance=False)
    print("ssim(pair00_ref, negative)", repr(s))


def squash(s):
    n2 = float(s @ s)
    return np.zeros_like(s) if n2 == 0 else (n2 / (1 + n2)) * s / np.sqrt(n2)


def routing_fixture():
    # votes[i][j] = u_hat_{j|i}
    votes = np.array([[[0.5, -0.2, 0.1], [0.3, 0.8, -0.4]],
                      [[-0.6, 0.1, 0.9], [0.2, 0.7, -0.1]]])
    b = np.zeros((2, 2))
    for it in range(3):
        c = np.exp(b) / np.exp(b).sum(axis=1, keepdims=True)
        s = np.einsum("ij,ijd->jd", c, votes)
        v = np.stack([squash(s[j]) for j in range(2)])
        if it < 2:
            b = b + np.einsum("ijd,jd->ij", votes, v)
    print("routing V", [repr(x) for x in v.ravel()])
    print("routing C", [repr(x) for x in c.ravel()])


def colorimetry():
    red = color.rgb2lab(np.array([[[1.0, 0.0, 0.0]]]))[0, 0]
    print("red lab", [repr(float(x)) for x in red])
    clipped = color.lab2rgb(np.array([[[50.0, 200.0, 200.0]]]))[0, 0]
    print("lab(50,200,200) -> rgb", [int(round(float(x) * 255)) for x in clipped])
    ramp = np.repeat(np.linspace(0, 1, 64).reshape(1, 64, 1), 3, axis=2)
    lab = color.rgb2lab(ramp)
    print("gray ramp max |ab|", float(np.abs(lab[..., 1:]).max()))


if __name__ == "__main__":
    write_gamut()
    write_metrics()
    routing_fixture()
    colorimetry()
