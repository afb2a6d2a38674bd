import json
import math

import numpy as np
import pytest

from spikedict.data_io import load_pgm, reference_image
from spikedict.metrics import (
    METRIC_COLUMNS,
    atlas_image,
    consistency,
    denoise,
    export_atlas,
    extract_patches,
    jsonl_line,
    psnr,
    read_metrics_csv,
    reconstruct_patches,
    svg_line_chart,
    symmetry,
    symmetry_detail,
    write_metrics_csv,
)
from spikedict.model import SpikeDictError, weights_from_dictionary
from spikedict.oracle import random_unit_dictionary


def test_consistency_examples():
    D = random_unit_dictionary(np.random.default_rng(0), 6, 4)
    w = weights_from_dictionary(D, 0.1)
    assert consistency(w.H, w.F, w.B) == pytest.approx(1.0, abs=1e-15)
    assert consistency(np.eye(3), np.zeros((3, 2)), np.zeros((2, 3))) == 0.0
    E = np.random.default_rng(1).normal(size=w.H.shape)
    Hp = w.H + E
    expect = 1.0 - np.linalg.norm(E) / np.linalg.norm(Hp)
    assert consistency(Hp, w.F, w.B) == pytest.approx(expect, rel=1e-12)


def test_consistency_tenth_error():
    H = np.diag([3.0, 4.0])
    F = np.eye(2)
    B = np.diag([2.7, 3.6])
    assert consistency(H, F, B) == pytest.approx(0.9, rel=1e-12)


def test_consistency_zero_H():
    with pytest.raises(SpikeDictError):
        consistency(np.zeros((2, 2)), np.zeros((2, 1)), np.zeros((1, 2)))


def test_symmetry_examples():
    F = np.array([[1.0, 0.0], [0.0, 2.0]])
    assert symmetry(F, F.T) == pytest.approx(1.0)
    B = np.array([[0.0, 0.0], [1.0, 3.0]])
    # row 0 of F is orthogonal to column 0 of B; row 1 aligned with column 1
    assert symmetry(F, B) == pytest.approx(0.5)


def test_symmetry_zero_pairs():
    F = np.array([[0.0, 0.0], [1.0, 1.0]])
    val, zeros = symmetry_detail(F, F.T)
    assert zeros == 1 and val == pytest.approx(0.5)


def test_symmetry_brute_force():
    rng = np.random.default_rng(4)
    F, B = rng.random((5, 7)), rng.random((7, 5))
    cos = [F[i] @ B[:, i] / (np.linalg.norm(F[i]) * np.linalg.norm(B[:, i])) for i in range(5)]
    assert symmetry(F, B) == pytest.approx(np.mean(cos), rel=1e-14)


def test_psnr_examples():
    img = np.random.default_rng(0).random((5, 5))
    assert psnr(img, img) == math.inf
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0, rel=1e-12)
    with pytest.raises(SpikeDictError, match="dimension mismatch"):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))


def test_denoise_clean_image_with_basis_dictionary():
    img = reference_image()[:32, :32]
    D = np.eye(2 * 16)
    out, l0 = denoise(D, img, patch_size=4, lambda1=1e-6)
    assert psnr(img, out) >= 40.0
    assert l0 <= 16


def test_denoise_non_overlapping_is_direct_stitching():
    rng = np.random.default_rng(2)
    img = rng.random((16, 16))
    D = random_unit_dictionary(rng, 32, 20)
    out, _ = denoise(D, img, patch_size=4, lambda1=0.05, stride=4)
    raw, corners = extract_patches(img, 4, 4)
    recon, _ = reconstruct_patches(D, raw, 0.05)
    direct = np.zeros_like(img)
    for (r, c), patch in zip(corners, recon):
        direct[r:r + 4, c:c + 4] = patch.reshape(4, 4)
    np.testing.assert_allclose(out, np.clip(direct, 0, 1), rtol=0, atol=1e-15)


def test_patch_grid_covers_border():
    _, corners = extract_patches(np.zeros((10, 10)), 4, 4)
    assert {tuple(c) for c in corners} >= {(6, 6), (0, 6), (6, 0)}


def test_denoise_wrong_dictionary_rows():
    with pytest.raises(SpikeDictError):
        denoise(np.eye(10), np.zeros((8, 8)), patch_size=4)


def test_atlas_single_atom():
    img = atlas_image(np.arange(4.0).reshape(4, 1), (2, 2))
    np.testing.assert_allclose(img, [[0, 1 / 3], [2 / 3, 1]])


def test_atlas_identity_grid(tmp_path):
    img = export_atlas(tmp_path / "a.pgm", np.eye(64), (8, 8))
    assert img.shape == (8 * 8 + 7, 8 * 8 + 7)
    # atom k lights pixel k of tile k, which lands on a 10-pixel lattice
    assert img.sum() == 64
    assert all(img[10 * (k // 8), 10 * (k % 8)] == 1.0 for k in range(64))
    np.testing.assert_allclose(load_pgm(tmp_path / "a.pgm"), img)


def test_atlas_split_atoms_merge_and_shape_error():
    D = np.zeros((8, 1))
    D[0], D[4 + 3] = 1.0, 1.0
    np.testing.assert_array_equal(atlas_image(D, (2, 2)), [[1.0, 0.5], [0.5, 0.0]])
    with pytest.raises(SpikeDictError, match="shape mismatch"):
        atlas_image(np.zeros((5, 2)), (2, 2))


def test_atlas_deterministic():
    D = random_unit_dictionary(np.random.default_rng(0), 128, 10)
    assert atlas_image(D, (8, 8)).tobytes() == atlas_image(D, (8, 8)).tobytes()


def _records():
    return [{"iteration": 0, "objective": 0.5, "consistency": 1.0, "symmetry": 1.0,
             "mean_atom_norm": 1.0, "max_abs_current": 2.5, "catchup_norm": 0.0, "max_s": 1.0},
            {"iteration": 50, "objective": float("nan"), "consistency": 0.97, "symmetry": 0.99,
             "mean_atom_norm": 1.01, "max_abs_current": 2.25, "catchup_norm": 0.01, "max_s": 1.2}]


def test_metrics_csv_roundtrip(tmp_path):
    write_metrics_csv(tmp_path / "m.csv", _records())
    back = read_metrics_csv(tmp_path / "m.csv")
    assert tuple(back[0]) == METRIC_COLUMNS
    assert back[1]["iteration"] == 50 and back[1]["consistency"] == 0.97
    assert math.isnan(back[1]["objective"])


def test_jsonl_nan_is_null():
    rec = json.loads(jsonl_line(_records()[1]))
    assert rec["objective"] is None and rec["iteration"] == 50


def test_svg_chart(tmp_path):
    svg_line_chart(tmp_path / "c.svg", {"snn": ([0, 50], [0.5, 0.4]), "sgd": ([0, 50], [0.5, 0.3])},
                   title="objective")
    text = (tmp_path / "c.svg").read_text()
    assert text.startswith("<svg") and text.count("<polyline") == 2
    with pytest.raises(ValueError):
        svg_line_chart(tmp_path / "d.svg", {"x": ([0], [float("nan")])})
