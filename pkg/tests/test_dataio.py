import json
import struct

import numpy as np
import pytest

from hyperseg.dataio import (
    FormatError,
    HsiScene,
    SplitSpec,
    ValidationError,
    class_prototypes,
    extract_patch,
    load_scene,
    make_patch,
    make_split,
    mirror_index,
    pca_decompose,
    pca_reduce,
    resize_hwc,
    resize_nearest,
    save_scene,
    synth_scene,
)
from hyperseg.tensor import ArgumentError


def small_scene(seed=0):
    rng = np.random.default_rng(seed)
    cube = rng.normal(size=(4, 4, 3)).astype(np.float32)
    labels = rng.integers(0, 3, size=(4, 4))
    labels[0, 0] = 1
    labels[1, 1] = 2
    return HsiScene(cube=cube, labels=labels, class_count=2)


# ---------------------------------------------------------------- HSC1 round trips


def test_roundtrip_bit_exact(tmp_path):
    scene = small_scene()
    path = tmp_path / "scene.hsc1"
    save_scene(scene, path)
    back = load_scene(path)
    np.testing.assert_array_equal(back.cube, scene.cube)
    np.testing.assert_array_equal(back.labels, scene.labels)
    assert back.class_count == 2 and back.aux is None


def test_roundtrip_with_aux(tmp_path):
    rng = np.random.default_rng(1)
    scene = HsiScene(
        cube=rng.normal(size=(3, 5, 2)).astype(np.float32),
        labels=np.ones((3, 5), dtype=int),
        class_count=1,
        aux=rng.random(size=(3, 5, 2)).astype(np.float32),
    )
    path = tmp_path / "scene.hsc1"
    save_scene(scene, path)
    back = load_scene(path)
    np.testing.assert_array_equal(back.aux, scene.aux)


def test_save_twice_byte_identical(tmp_path):
    scene = small_scene()
    p1, p2 = tmp_path / "a.hsc1", tmp_path / "b.hsc1"
    save_scene(scene, p1)
    save_scene(scene, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.hsc1"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(FormatError) as exc:
        load_scene(path)
    assert exc.value.offset == 0


def test_band_count_mismatch_is_format_error(tmp_path):
    # header declares 10 bands but payload holds 9 bands worth of floats
    h, w = 2, 2
    header = json.dumps({"h": h, "w": w, "c": 10, "k": 1, "k2": 0, "has_aux": False}).encode()
    payload = np.zeros(h * w * 9, dtype="<f4").tobytes() + np.ones(h * w, dtype="<u2").tobytes()
    path = tmp_path / "short.hsc1"
    path.write_bytes(b"HSC1" + struct.pack("<I", len(header)) + header + payload)
    with pytest.raises(FormatError) as exc:
        load_scene(path)
    assert "cube" in str(exc.value) or "labels" in str(exc.value)
    assert exc.value.offset is not None


def test_out_of_range_label_names_pixel(tmp_path):
    h, w, c, k = 2, 3, 2, 4
    header = json.dumps({"h": h, "w": w, "c": c, "k": k, "k2": 0, "has_aux": False}).encode()
    labels = np.zeros((h, w), dtype="<u2")
    labels[1, 2] = k + 3
    blob = (
        b"HSC1"
        + struct.pack("<I", len(header))
        + header
        + np.zeros(h * w * c, dtype="<f4").tobytes()
        + labels.tobytes()
    )
    path = tmp_path / "label.hsc1"
    path.write_bytes(blob)
    with pytest.raises(ValidationError) as exc:
        load_scene(path)
    assert "(1, 2)" in str(exc.value)


def test_trailing_bytes_rejected(tmp_path):
    scene = small_scene()
    path = tmp_path / "trail.hsc1"
    save_scene(scene, path)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FormatError) as exc:
        load_scene(path)
    assert "trailing" in str(exc.value)


def test_truncated_header_rejected(tmp_path):
    path = tmp_path / "trunc.hsc1"
    path.write_bytes(b"HSC1" + struct.pack("<I", 999) + b"{}")
    with pytest.raises(FormatError):
        load_scene(path)


# ---------------------------------------------------------------- synthetic scenes


def test_synth_noiseless_spectra_equal_prototypes():
    scene = synth_scene(16, 16, 8, 2, noise_sigma=0.0, seed=3)
    protos = class_prototypes(8, 2)
    for i in range(16):
        for j in range(16):
            diffs = np.abs(protos - scene.cube[i, j]).max(axis=1)
            assert diffs.min() < 1e-6


def test_synth_deterministic():
    a = synth_scene(12, 12, 6, 3, 0.1, seed=42)
    b = synth_scene(12, 12, 6, 3, 0.1, seed=42)
    np.testing.assert_array_equal(a.cube, b.cube)
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_array_equal(a.aux, b.aux)


def test_synth_nearest_prototype_oracle_perfect_on_noiseless():
    scene = synth_scene(20, 20, 8, 4, noise_sigma=0.0, seed=5)
    protos = class_prototypes(8, 4)
    labeled = scene.labels > 0
    flat = scene.cube[labeled]
    pred = np.abs(flat[:, None, :] - protos[None]).sum(axis=2).argmin(axis=1) + 1
    assert (pred == scene.labels[labeled]).mean() == 1.0


def test_synth_has_unlabeled_border():
    scene = synth_scene(48, 48, 8, 4, 0.05, seed=1)
    assert (scene.labels[0, :] == 0).all() and (scene.labels[:, 0] == 0).all()
    frac = (scene.labels == 0).mean()
    assert 0.05 < frac < 0.2
    present = np.unique(scene.labels)
    assert set(range(1, 5)) <= set(present.tolist())


def test_synth_rejects_degenerate_args():
    with pytest.raises(ArgumentError):
        synth_scene(2, 2, 8, 4, 0.0, seed=0)
    with pytest.raises(ArgumentError):
        synth_scene(16, 16, 3, 4, 0.0, seed=0)
    with pytest.raises(ArgumentError):
        synth_scene(16, 16, 8, 1, 0.0, seed=0)


# ---------------------------------------------------------------- PCA


def _jacobi_eig(a, sweeps=100, tol=1e-14):
    """Independent symmetric eigensolver: cyclic Jacobi rotations."""
    a = a.copy()
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta**2 + 1.0))
                c = 1.0 / np.sqrt(t**2 + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    return np.diag(a), v


def test_pca_eigenvalues_match_jacobi_oracle():
    rng = np.random.default_rng(17)
    pixels = rng.normal(size=(50, 6)) @ np.diag([3.0, 2.0, 1.5, 1.0, 0.5, 0.1])
    values, vectors, _ = pca_decompose(pixels, 6)
    cov = np.cov(pixels, rowvar=False)
    oracle_vals, _ = _jacobi_eig(cov)
    oracle_vals = np.sort(oracle_vals)[::-1]
    assert np.abs(values - oracle_vals).max() < 1e-9


def test_pca_axis_aligned_case():
    rng = np.random.default_rng(2)
    n = 4000
    data = rng.normal(size=(n, 3)) * np.array([2.0, 1.0, 0.3162])
    _, vectors, _ = pca_decompose(data, 2)
    # each kept eigenvector concentrates on one coordinate axis
    assert abs(abs(vectors[0, 0]) - 1.0) < 0.05
    assert abs(abs(vectors[1, 1]) - 1.0) < 0.05


def test_pca_orthonormal_and_descending():
    rng = np.random.default_rng(3)
    pixels = rng.normal(size=(80, 7))
    values, vectors, _ = pca_decompose(pixels, 5)
    gram = vectors.T @ vectors
    assert np.abs(gram - np.eye(5)).max() <= 1e-8
    assert (np.diff(values) <= 1e-12).all()
    assert values.sum() <= np.cov(pixels, rowvar=False).trace() + 1e-9


def test_pca_full_rank_preserves_distances():
    scene = synth_scene(10, 10, 6, 3, 0.05, seed=9)
    reduced = pca_reduce(scene, 6)
    a = scene.cube.reshape(-1, 6).astype(np.float64)
    b = reduced.cube.reshape(-1, 6).astype(np.float64)
    da = np.linalg.norm(a[:30, None] - a[None, :30], axis=2)
    db = np.linalg.norm(b[:30, None] - b[None, :30], axis=2)
    assert np.abs(da - db).max() < 1e-6


def test_pca_variance_not_increased():
    scene = synth_scene(10, 10, 8, 3, 0.1, seed=4)
    reduced = pca_reduce(scene, 4)
    total_in = scene.cube.reshape(-1, 8).var(axis=0).sum()
    total_out = reduced.cube.reshape(-1, 4).var(axis=0).sum()
    assert total_out <= total_in + 1e-9


def test_pca_rejects_too_many_components():
    scene = small_scene()
    with pytest.raises(ArgumentError):
        pca_reduce(scene, 5)


def test_pca_sign_convention():
    rng = np.random.default_rng(6)
    pixels = rng.normal(size=(60, 5))
    _, vectors, _ = pca_decompose(pixels, 5)
    for col in range(5):
        peak = np.abs(vectors[:, col]).argmax()
        assert vectors[peak, col] > 0


# ---------------------------------------------------------------- patches


def test_patch_single_pixel():
    scene = small_scene()
    spectral, labels, _ = extract_patch(scene, 2, 3, 1)
    np.testing.assert_array_equal(spectral[0, 0], scene.cube[2, 3])
    assert labels[0, 0] == scene.labels[2, 3]


def test_patch_mirror_rule_at_corner():
    scene = synth_scene(8, 8, 4, 2, 0.0, seed=0)
    spectral, _, _ = extract_patch(scene, 0, 0, 5)
    for k in range(5):
        for l in range(5):
            np.testing.assert_array_equal(
                spectral[k, l], scene.cube[abs(k - 2), abs(l - 2)]
            )


def test_patch_interior_matches_raw_cube():
    scene = synth_scene(10, 10, 4, 2, 0.1, seed=2)
    spectral, labels, _ = extract_patch(scene, 5, 5, 5)
    np.testing.assert_array_equal(spectral, scene.cube[3:8, 3:8])
    np.testing.assert_array_equal(labels, scene.labels[3:8, 3:8])


def test_patch_even_size_rejected():
    scene = small_scene()
    with pytest.raises(ArgumentError):
        extract_patch(scene, 1, 1, 4)


def test_mirror_index_far_edge():
    assert mirror_index(-1, 5) == 1
    assert mirror_index(5, 5) == 3
    assert mirror_index(6, 5) == 2


def test_resize_constant_patch_stays_constant():
    scene = HsiScene(
        cube=np.full((9, 9, 3), 2.0, dtype=np.float32),
        labels=np.full((9, 9), 1, dtype=int),
        class_count=1,
    )
    sample = make_patch(scene, 4, 4, 9, 6)
    np.testing.assert_allclose(sample.spectral, 2.0, atol=1e-12)
    assert (sample.label_patch == 1).all()
    assert sample.model_size == 6 and sample.patch_size == 9


def test_resize_nearest_is_categorical():
    labels = np.array([[1, 2], [3, 4]])
    out = resize_nearest(labels, 4, 4)
    assert set(np.unique(out)) <= {1, 2, 3, 4}
    assert out[0, 0] == 1 and out[3, 3] == 4


def test_resize_hwc_matches_channel_loop():
    rng = np.random.default_rng(12)
    arr = rng.normal(size=(5, 5, 3))
    out = resize_hwc(arr, 7, 7)
    from hyperseg.tensor import Tensor, interpolate_bilinear

    for c in range(3):
        ref = interpolate_bilinear(Tensor(arr[..., c][None]), 7, 7).data[0]
        np.testing.assert_allclose(out[..., c], ref, atol=1e-12)


# ---------------------------------------------------------------- splits


def test_split_boundary_class_all_train():
    labels = np.zeros((6, 6), dtype=int)
    coords = [(i, j) for i in range(2, 4) for j in range(1, 6)]  # exactly 10 pixels
    for i, j in coords:
        labels[i, j] = 1
    labels[5, 5] = 2
    labels[5, 4] = 2
    scene = HsiScene(
        cube=np.zeros((6, 6, 3), dtype=np.float32), labels=labels, class_count=2
    )
    train, test = make_split(scene, SplitSpec(per_class_train=10, seed=0))
    train_c1 = [c for c in train if labels[c] == 1]
    test_c1 = [c for c in test if labels[c] == 1]
    assert len(train_c1) == 10 and len(test_c1) == 0


def test_split_sixteen_classes_gives_160_train():
    rng = np.random.default_rng(0)
    labels = rng.integers(1, 17, size=(40, 40))
    scene = HsiScene(
        cube=np.zeros((40, 40, 3), dtype=np.float32), labels=labels, class_count=16
    )
    train, test = make_split(scene, SplitSpec(per_class_train=10, seed=1))
    assert len(train) == 160
    assert len(train) + len(test) == (labels > 0).sum()


def test_split_disjoint_and_label0_free():
    scene = synth_scene(24, 24, 6, 3, 0.05, seed=7)
    train, test = make_split(scene, SplitSpec(per_class_train=10, seed=2))
    assert not (set(train) & set(test))
    for c in train + test:
        assert scene.labels[c] > 0


def test_split_seeds_change_members_not_counts():
    scene = synth_scene(24, 24, 6, 3, 0.05, seed=8)
    t1, _ = make_split(scene, SplitSpec(per_class_train=10, seed=1))
    t2, _ = make_split(scene, SplitSpec(per_class_train=10, seed=2))
    assert set(t1) != set(t2)

    def per_class(coords):
        out = {}
        for c in coords:
            out[scene.labels[c]] = out.get(scene.labels[c], 0) + 1
        return out

    assert per_class(t1) == per_class(t2)


def test_split_deterministic():
    scene = synth_scene(24, 24, 6, 3, 0.05, seed=8)
    t1, e1 = make_split(scene, SplitSpec(per_class_train=5, seed=3))
    t2, e2 = make_split(scene, SplitSpec(per_class_train=5, seed=3))
    assert t1 == t2 and e1 == e2


def test_split_errors_on_empty_class():
    labels = np.zeros((4, 4), dtype=int)
    labels[0, 0] = 1
    scene = HsiScene(
        cube=np.zeros((4, 4, 2), dtype=np.float32), labels=labels, class_count=2
    )
    with pytest.raises(ValidationError):
        make_split(scene, SplitSpec(per_class_train=1, seed=0))
