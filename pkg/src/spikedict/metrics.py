"""Weight-consistency metrics, PSNR, patch denoising, dictionary atlases and plot data."""

from __future__ import annotations

import csv
import json
import math

import numba
import numpy as np

from .data_io import center_normalize, merge_channels, save_pgm, split_channels
from .model import SpikeDictError
from .oracle import LOOP_MAX_ITER, solve_batch


def consistency(H, F, B):
    """1 - ||H - F B||_F / ||H||_F."""
    H = np.asarray(H, dtype=np.float64)
    nh = np.linalg.norm(H)
    if nh == 0:
        raise SpikeDictError("zero H")
    return 1.0 - float(np.linalg.norm(H - np.asarray(F) @ np.asarray(B))) / float(nh)


def symmetry(F, B):
    """Mean cosine between row i of F and column i of B.

    Pairs where either vector is zero contribute 0 to the mean; the count of
    such pairs is available from :func:`symmetry_detail`.
    """
    return symmetry_detail(F, B)[0]


def symmetry_detail(F, B):
    F = np.asarray(F, dtype=np.float64)
    Bt = np.asarray(B, dtype=np.float64).T
    nf = np.linalg.norm(F, axis=1)
    nb = np.linalg.norm(Bt, axis=1)
    ok = (nf > 0) & (nb > 0)
    cos = np.zeros(F.shape[0])
    cos[ok] = (F[ok] * Bt[ok]).sum(axis=1) / (nf[ok] * nb[ok])
    return float(cos.mean()), int((~ok).sum())


def psnr(clean, test):
    """Peak signal-to-noise ratio in dB with peak 1; ``inf`` for identical images."""
    clean = np.asarray(clean, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if clean.shape != test.shape:
        raise SpikeDictError(f"dimension mismatch {clean.shape} vs {test.shape}")
    mse = float(np.mean((clean - test) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


# --- denoising -----------------------------------------------------------

def _patch_grid(shape, p, stride):
    h, w = shape
    rows = list(range(0, h - p + 1, stride))
    cols = list(range(0, w - p + 1, stride))
    # always cover the bottom/right border
    if rows[-1] != h - p:
        rows.append(h - p)
    if cols[-1] != w - p:
        cols.append(w - p)
    return [(r, c) for r in rows for c in cols]


@numba.njit(cache=True)
def _accumulate(out, weight, patches, corners, p):
    for k in range(corners.shape[0]):
        r = corners[k, 0]
        c = corners[k, 1]
        for i in range(p):
            for j in range(p):
                out[r + i, c + j] += patches[k, i * p + j]
                weight[r + i, c + j] += 1.0


def extract_patches(img, patch_size, stride=1):
    corners = np.array(_patch_grid(img.shape, patch_size, stride), dtype=np.int64)
    P = np.empty((len(corners), patch_size * patch_size))
    for k, (r, c) in enumerate(corners):
        P[k] = img[r:r + patch_size, c:c + patch_size].ravel()
    return P, corners


def reconstruct_patches(D, raw, lambda1, coder=None, tol=1e-8):
    """Code raw patches through the training preprocessing and map back to pixels.

    Each patch is centred, l2-normalised and split; its code ``a`` gives
    ``D a``, which is merged (pos - neg), rescaled by the patch norm and
    shifted back by the patch mean.  Returns ``(recon, codes)``.
    """
    unit, means, norms = center_normalize(raw)
    X = split_channels(unit)
    if coder is None:
        A, _ = solve_batch(D, X.T, lambda1, 1.0, tol, LOOP_MAX_ITER)
    else:
        A = np.column_stack([coder(x) for x in X]) if len(X) else np.zeros((D.shape[1], 0))
    A[:, norms == 0] = 0.0
    recon = merge_channels((D @ A).T) * norms[:, None] + means[:, None]
    return recon, A


def denoise(D, noisy, patch_size=8, lambda1=0.1, stride=1, coder=None, tol=1e-8):
    """Denoise by sparse-coding overlapping patches and averaging them back.

    ``coder`` optionally maps one preprocessed patch to its code (e.g. the
    spiking network); the default is the coordinate-descent oracle.
    Returns ``(image, mean_l0)``.
    """
    noisy = np.asarray(noisy, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    if D.shape[0] != 2 * patch_size * patch_size:
        raise SpikeDictError(f"dictionary rows {D.shape[0]} != 2 * {patch_size}^2")
    raw, corners = extract_patches(noisy, patch_size, stride)
    recon, A = reconstruct_patches(D, raw, lambda1, coder, tol)
    out = np.zeros_like(noisy)
    weight = np.zeros_like(noisy)
    _accumulate(out, weight, recon, corners, patch_size)
    out /= weight
    mean_l0 = float((A > 0).sum(axis=0).mean())
    return np.clip(out, 0.0, 1.0), mean_l0


# --- atlas ---------------------------------------------------------------

def atlas_image(D, tile_shape, grid_cols=None, pad=1):
    """Tile atoms row-major into one image, each rescaled to [0, 1].

    Split-channel atoms (2 x tile area rows) are merged as pos - neg first.
    """
    D = np.asarray(D, dtype=np.float64)
    th, tw = tile_shape
    area = th * tw
    if D.shape[0] == 2 * area:
        D = merge_channels(D.T).T
    elif D.shape[0] != area:
        raise SpikeDictError(f"shape mismatch: atoms have {D.shape[0]} entries, tile is {th}x{tw}")
    n = D.shape[1]
    cols = grid_cols or int(math.ceil(math.sqrt(n)))
    rows = int(math.ceil(n / cols))
    if n == 1:
        pad = 0
    img = np.zeros((rows * th + (rows - 1) * pad, cols * tw + (cols - 1) * pad))
    for k in range(n):
        atom = D[:, k]
        lo, hi = atom.min(), atom.max()
        tile = (atom - lo) / (hi - lo) if hi > lo else np.zeros_like(atom)
        r, c = divmod(k, cols)
        y, x = r * (th + pad), c * (tw + pad)
        img[y:y + th, x:x + tw] = tile.reshape(th, tw)
    return img


def export_atlas(path, D, tile_shape, grid_cols=None):
    img = atlas_image(D, tile_shape, grid_cols)
    save_pgm(path, img)
    return img


# --- plot data -----------------------------------------------------------

METRIC_COLUMNS = ("iteration", "objective", "consistency", "symmetry",
                  "mean_atom_norm", "max_abs_current", "catchup_norm", "max_s")


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_metrics_csv(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for rec in records:
            w.writerow([_fmt(rec[c]) for c in METRIC_COLUMNS])


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "iteration" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def jsonl_line(rec):
    clean = {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in rec.items()}
    return json.dumps(clean, sort_keys=True)


def svg_line_chart(path, series, title="", xlabel="iteration", ylabel="", width=640, height=400):
    """Write a static SVG line chart; ``series`` maps label -> (xs, ys)."""
    colors = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd")
    pts = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys) if math.isfinite(y)]
    if not pts:
        raise ValueError("nothing to plot")
    x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
    y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1
    ml, mr, mt, mb = 60, 20, 30, 40
    sx = lambda x: ml + (x - x0) / (x1 - x0) * (width - ml - mr)
    sy = lambda y: height - mb - (y - y0) / (y1 - y0) * (height - mt - mb)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="14">{title}</text>',
           f'<line x1="{ml}" y1="{height - mb}" x2="{width - mr}" y2="{height - mb}" stroke="black"/>',
           f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{height - mb}" stroke="black"/>',
           f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">{xlabel}</text>',
           f'<text x="14" y="{height / 2}" transform="rotate(-90 14 {height / 2})" '
           f'text-anchor="middle" font-size="12">{ylabel}</text>',
           f'<text x="{ml - 4}" y="{sy(y0):.1f}" text-anchor="end" font-size="10">{y0:.3g}</text>',
           f'<text x="{ml - 4}" y="{sy(y1):.1f}" text-anchor="end" font-size="10">{y1:.3g}</text>',
           f'<text x="{sx(x0):.1f}" y="{height - mb + 14}" text-anchor="middle" font-size="10">{x0:g}</text>',
           f'<text x="{sx(x1):.1f}" y="{height - mb + 14}" text-anchor="middle" font-size="10">{x1:g}</text>']
    for k, (label, (xs, ys)) in enumerate(series.items()):
        color = colors[k % len(colors)]
        poly = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys) if math.isfinite(y))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{poly}"/>')
        out.append(f'<text x="{width - mr - 4}" y="{mt + 14 * (k + 1)}" text-anchor="end" '
                   f'font-size="11" fill="{color}">{label}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
