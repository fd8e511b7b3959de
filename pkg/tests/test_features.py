import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dawmr._chunked import chunked_matmul
from dawmr.features import (ARCHITECTURES, Dictionary, EncoderConfig, FeatureExtractor,
                            FeatureExtractorSpec, PatchSpec, apply_whitening, encode,
                            extract_features, extract_patch, fit_normalizer, fit_whitening,
                            learn_dictionary_kmeans, learn_dictionary_omp1, load_dictionary, pool,
                            pool_dense, recursive_spec, representation_dims, save_dictionary,
                            swap_halves)
from dawmr.features.dictionary import DictionaryFormatError, kmeans_objective, omp1_error
from dawmr.features.normalizer import apply_normalizer, load_normalizer, save_normalizer
from dawmr.features.patches import patch_rows
from dawmr.volume import downsample_average

from oracles import scan_pool


def random_dictionary(rng, k, shape=(3, 3, 3), channels=1, method="omp1"):
    n = shape[0] * shape[1] * shape[2] * channels
    atoms = rng.standard_normal((k, n))
    atoms /= np.linalg.norm(atoms, axis=1, keepdims=True)
    cents = rng.standard_normal((k, n)) if method == "kmeans" else None
    return Dictionary(atoms, shape, channels, method, centroids=cents)


def random_extractor(spec, seed=0):
    rng = np.random.default_rng(seed)
    dicts = {}
    for s in spec.scales:
        for g in spec.groups:
            dicts[(s, g)] = random_dictionary(rng, spec.dict_size, spec.patch_shape,
                                              3 if g == "affinity" else 1)
    return FeatureExtractor(spec, dicts)


# -- patches and whitening ------------------------------------------------


def test_extract_patch_layout():
    vol = np.arange(5 * 6 * 7, dtype=np.float32).reshape(5, 6, 7)
    p = extract_patch(vol, (3, 2, 1), PatchSpec((3, 1, 3)))
    assert np.array_equal(p, vol[0:3, 2, 2:5].ravel())
    with pytest.raises(IndexError):
        extract_patch(vol, (0, 2, 2), PatchSpec((3, 3, 3)))


def test_patch_rows_match_extract_patch():
    rng = np.random.default_rng(0)
    vol = rng.standard_normal((5, 6, 7, 3)).astype(np.float32)
    rows = patch_rows(vol, (3, 3, 3))
    spec = PatchSpec((3, 3, 3), "affinity")
    i = 0
    for z, y, x in itertools.product(range(3), range(4), range(5)):
        assert np.array_equal(rows[i], extract_patch(vol, (x + 1, y + 1, z + 1), spec))
        i += 1


def test_whitening_decorrelates():
    rng = np.random.default_rng(1)
    mix = rng.standard_normal((6, 6))
    x = rng.standard_normal((5000, 6)) @ mix
    t = fit_whitening(x, eps_zca=1e-9, contrast=False)
    w = apply_whitening(t, x)
    assert np.allclose(np.cov(w, rowvar=False), np.eye(6), atol=1e-5)
    assert np.allclose(t.matrix, t.matrix.T)


def test_whitening_disabled_is_identity():
    x = np.arange(12.0).reshape(3, 4)
    assert apply_whitening(None, x) is x


# -- dictionaries ---------------------------------------------------------


def test_omp1_monotone_and_unit_norm():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2000, 27))
    d = learn_dictionary_omp1(x, 16, epochs=10, seed=3, shape=(3, 3, 3))
    h = np.array(d.history)
    assert len(h) == 11
    assert np.all(np.diff(h) <= 1e-9 * h[:-1])
    assert np.allclose(np.linalg.norm(d.atoms, axis=1), 1.0, atol=1e-6)
    assert omp1_error(x, d.atoms.astype(np.float64)) == pytest.approx(h[-1], rel=1e-5)


def test_omp1_recovers_planted_atoms():
    rng = np.random.default_rng(4)
    truth = np.linalg.qr(rng.standard_normal((27, 4)))[0].T
    x = truth[rng.integers(0, 4, 800)] * rng.uniform(1, 3, (800, 1)) * rng.choice([-1, 1], (800, 1))
    d = learn_dictionary_omp1(x, 4, epochs=20, seed=0, shape=(3, 3, 3))
    overlap = np.abs(d.atoms @ truth.T).max(axis=0)
    assert np.all(overlap > 0.999)


def test_omp1_too_few_patches():
    with pytest.raises(ValueError):
        learn_dictionary_omp1(np.ones((3, 27)), 4, shape=(3, 3, 3))


def test_kmeans_objective_non_increasing():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((600, 8))
    d = learn_dictionary_kmeans(x, 6, epochs=8, seed=1, shape=(1, 1, 1), channels=8)
    h = np.array(d.history)
    assert np.all(np.diff(h) <= 1e-9 * h[:-1])
    assert kmeans_objective(x, d.centroids.astype(np.float64)) == pytest.approx(h[-1], rel=1e-5)


@pytest.mark.parametrize("method", ["omp1", "kmeans"])
@pytest.mark.parametrize("whiten", [False, True])
def test_dictionary_roundtrip(tmp_path, method, whiten):
    rng = np.random.default_rng(6)
    x = rng.standard_normal((300, 27))
    learn = learn_dictionary_omp1 if method == "omp1" else learn_dictionary_kmeans
    d = learn(x, 5, epochs=2, seed=0, shape=(3, 3, 3), whitening=whiten)
    save_dictionary(d, tmp_path / "d.dwdc")
    e = load_dictionary(tmp_path / "d.dwdc")
    assert np.array_equal(d.atoms, e.atoms) and e.method == method
    assert e.patch_shape == (3, 3, 3)
    enc = EncoderConfig("soft_threshold_polarity" if method == "omp1" else "triangle_kmeans")
    assert np.array_equal(encode(d, enc, x[:7]), encode(e, enc, x[:7]))
    save_dictionary(e, tmp_path / "e.dwdc")
    assert (tmp_path / "d.dwdc").read_bytes() == (tmp_path / "e.dwdc").read_bytes()
    (tmp_path / "bad.dwdc").write_bytes((tmp_path / "d.dwdc").read_bytes()[:-3])
    with pytest.raises(DictionaryFormatError):
        load_dictionary(tmp_path / "bad.dwdc")


# -- encoders and pooling -------------------------------------------------


def test_soft_threshold_formula():
    rng = np.random.default_rng(7)
    d = random_dictionary(rng, 6)
    x = rng.standard_normal((10, 27)).astype(np.float32)
    f = encode(d, EncoderConfig(alpha=0.3), x)
    z = x.astype(np.float64) @ d.atoms.T.astype(np.float64)
    ref = np.concatenate([np.maximum(0, z - 0.3), np.maximum(0, -z - 0.3)], axis=1)
    assert f.shape == (10, 12)
    assert np.allclose(f, ref, atol=1e-5)
    # flipping the patch sign swaps the two polarity halves
    assert np.array_equal(encode(d, EncoderConfig(alpha=0.3), -x), swap_halves(f))


def test_triangle_formula():
    rng = np.random.default_rng(8)
    d = random_dictionary(rng, 5, method="kmeans")
    x = rng.standard_normal((4, 27)).astype(np.float32)
    f = encode(d, EncoderConfig("triangle_kmeans"), x)
    dist = np.linalg.norm(x[:, None, :].astype(np.float64) - d.centroids[None], axis=2)
    ref = np.maximum(0, dist.mean(axis=1, keepdims=True) - dist)
    assert f.shape == (4, 5)
    assert np.allclose(f, ref, atol=1e-4)


def test_encode_rows_independent_of_batch():
    rng = np.random.default_rng(9)
    d = random_dictionary(rng, 7)
    x = rng.standard_normal((600, 27)).astype(np.float32)
    full = encode(d, EncoderConfig(), x)
    for i in (0, 255, 256, 599):
        assert np.array_equal(encode(d, EncoderConfig(), x[i]), full[i])
    assert np.array_equal(chunked_matmul(x[100:400], d.atoms.T), chunked_matmul(x, d.atoms.T)[100:400])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(1, 6), st.sampled_from(["max", "average"]),
       st.integers(0, 2**31))
def test_pool_matches_scan(n, e, mode, seed):
    rng = np.random.default_rng(seed)
    stack = rng.integers(-8, 8, size=(n, e)).astype(np.float64)
    assert np.array_equal(pool(stack, mode), scan_pool(stack, mode))


@pytest.mark.parametrize("mode", ["max", "average"])
def test_pool_dense_matches_window_scan(mode):
    rng = np.random.default_rng(10)
    maps = rng.integers(0, 16, size=(5, 6, 7, 2)).astype(np.float32)
    out = pool_dense(maps, (3, 1, 3), mode)
    assert out.shape == (3, 6, 5, 2)
    for z, y, x in itertools.product(range(3), range(6), range(5)):
        win = maps[z:z + 3, y, x:x + 3].reshape(-1, 2)
        assert np.array_equal(out[z, y, x], scan_pool(win, mode))


# -- representation arithmetic -------------------------------------------


def test_preset_dims_and_fov():
    expected_fov = {"5rf": (9, 9, 9), "ss": (5, 5, 5), "ss-fv-2d": (9, 9, 1),
                    "ss-fv": (9, 9, 9), "ms-fv": (18, 18, 18)}
    for name, spec in ARCHITECTURES.items():
        assert representation_dims(spec) == 8000
        assert spec.field_of_view() == expected_fov[name]


def test_recursive_spec_splits_budget():
    spec = ARCHITECTURES["ms-fv"]
    two = recursive_spec(spec, 2)
    assert two.groups == ("image", "affinity") and two.dict_size == 500
    assert two.dims == 8000
    assert recursive_spec(spec, 1).groups == ("image",)


def test_valid_range_matches_box():
    spec = FeatureExtractorSpec("foveated", 2, (1, 2, 3), (3, 3, 3), (3, 3, 3))
    lo, hi = spec.valid_range(0, 4, 60)
    for c in range(0, 70):
        a, b = spec.axis_box(c, 0)
        assert (lo <= c < hi) == (a >= 4 and b <= 60)


# -- feature extraction ---------------------------------------------------


def direct_features(ext, inputs, xyz):
    """Per-location computation: downsample, extract patches, encode, pool."""
    spec = ext.spec
    out = []
    for s in spec.scales:
        for g in spec.groups:
            vol = downsample_average(np.asarray(inputs[g]), s)
            vol = vol[..., None] if vol.ndim == 3 else vol
            c = np.array(xyz) // s
            ps = PatchSpec(spec.patch_shape, g)
            mx, my, mz = spec.neighborhood
            codes = []
            for dz, dy, dx in itertools.product(range(mz), range(my), range(mx)):
                p = c + (dx - mx // 2, dy - my // 2, dz - mz // 2)
                codes.append(encode(ext.dictionaries[(s, g)], spec.encoder, extract_patch(vol, p, ps)))
            codes = np.array(codes)
            if spec.representation == "rf":
                out.append(codes.ravel())
            else:
                out.append(codes[len(codes) // 2])
                out.append(pool(codes, spec.pooling))
    return np.concatenate(out)


@pytest.mark.parametrize("spec", [
    FeatureExtractorSpec("rf", 3, (1,), (3, 3, 3), (3, 3, 3)),
    FeatureExtractorSpec("foveated", 3, (1, 2), (3, 3, 3), (3, 1, 3)),
    FeatureExtractorSpec("foveated", 2, (1, 3), (3, 3, 1), (3, 3, 3), groups=("image", "affinity")),
])
def test_features_match_direct_computation(spec):
    rng = np.random.default_rng(11)
    ext = random_extractor(spec)
    inputs = {"image": rng.standard_normal((20, 21, 22)).astype(np.float32),
              "affinity": rng.random((20, 21, 22, 3)).astype(np.float32)}
    lo = [spec.valid_range(a, 0, n - 1) for a, n in enumerate((20, 21, 22))]
    for _ in range(8):
        z, y, x = (int(rng.integers(a, b)) for a, b in lo)
        f = extract_features(ext, inputs, (x, y, z))
        assert f.shape == (spec.dims,)
        ref = direct_features(ext, inputs, (x, y, z))
        assert np.array_equal(f, ref)


def test_tiled_features_bit_identical():
    spec = FeatureExtractorSpec("foveated", 4, (1, 2), (3, 3, 3), (3, 3, 3))
    ext = random_extractor(spec, 1)
    rng = np.random.default_rng(12)
    img = {"image": rng.standard_normal((24, 24, 24)).astype(np.float32)}
    lo, hi = spec.valid_range(0, 0, 23)
    xyz = rng.integers(lo, hi, size=(300, 3))
    whole = ext.features(img, xyz, tile=None)
    for tile in (4, 7, 16):
        assert np.array_equal(ext.features(img, xyz, tile=tile), whole)
    with pytest.raises(ValueError):
        ext.features(img, [[0, 0, 0]])


def test_normalizer_roundtrip(tmp_path):
    rng = np.random.default_rng(13)
    x = rng.standard_normal((500, 6)) * 3 + 1
    x[:, 2] = 4.0
    n = fit_normalizer(x)
    h = apply_normalizer(n, x)
    assert np.allclose(h.mean(axis=0), 0, atol=1e-5)
    assert np.allclose(h[:, [0, 1, 3, 4, 5]].std(axis=0), 1, atol=1e-5)
    assert np.all(np.isfinite(h))
    save_normalizer(n, tmp_path / "n.dwnm")
    m = load_normalizer(tmp_path / "n.dwnm")
    assert np.array_equal(m.mean, n.mean) and np.array_equal(m.std, n.std)
