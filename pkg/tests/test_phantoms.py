import json

import numpy as np
import pytest

from astn.phantoms import (
    PROFILES,
    DomainProfile,
    FormatError,
    generate,
    histogram_distance,
    read_manifest,
    read_mask,
    read_pgm,
    resize_bilinear,
    resize_label,
    write_pgm,
    write_samples,
)


def test_deterministic():
    a = generate(3, PROFILES["a"], 32, seed=7)
    b = generate(3, PROFILES["a"], 32, seed=7)
    for x, y in zip(a, b):
        assert x.id == y.id
        assert x.image.tobytes() == y.image.tobytes()
        assert x.label.tobytes() == y.label.tobytes()
    c = generate(3, PROFILES["a"], 32, seed=8)
    assert a[0].image.tobytes() != c[0].image.tobytes()


def test_samples_are_valid():
    for s in generate(20, PROFILES["b"], 24, seed=1, domain="b", split="test"):
        assert s.image.shape == s.label.shape == (24, 24)
        assert s.label.sum() > 0 and set(np.unique(s.label)) <= {0, 1}
        assert 0 <= s.image.min() and s.image.max() <= 1
        assert s.id.startswith("b-test-")


def test_low_contrast():
    gaps = []
    for seed in range(100):
        s = generate(1, PROFILES["a"], 64, seed=seed)[0]
        m = s.label.astype(bool)
        gaps.append(abs(s.image[m].mean() - s.image[~m].mean()))
    assert np.mean(gaps) <= 0.3


def test_domain_shift_exceeds_within_domain():
    for seed in (0, 1, 2):
        a1 = generate(20, PROFILES["a"], 32, seed=seed)
        a2 = generate(20, PROFILES["a"], 32, seed=seed + 100)
        b = generate(20, PROFILES["b"], 32, seed=seed + 200)
        assert histogram_distance(a1, b) > histogram_distance(a1, a2)


def test_argument_errors():
    with pytest.raises(ValueError):
        generate(1, PROFILES["a"], size=15)
    with pytest.raises(ValueError):
        generate(0, PROFILES["a"])
    with pytest.raises(ValueError):
        DomainProfile(0.5, 0.1, 0.4, 0.1, 1.0, 1.0)
    with pytest.raises(ValueError):
        DomainProfile(float("nan"), 0.1, 0.1, 0.1, 1.0, 1.0)


def test_resize_examples():
    img = np.array([[0.0, 1.0], [0.0, 1.0]])
    out = resize_bilinear(img, 2, 3)
    np.testing.assert_allclose(out[:, 1], 0.5)
    np.testing.assert_array_equal(resize_bilinear(img, 2, 2), img)
    const = np.full((5, 7), 0.3)
    np.testing.assert_allclose(resize_bilinear(const, 11, 3), 0.3)
    lab = np.zeros((4, 4))
    lab[1:3, 1:3] = 1
    assert set(np.unique(resize_label(lab, 8, 8))) == {0, 1}


def test_pgm_round_trip(tmp_path):
    s = generate(1, PROFILES["a"], 32, seed=3)[0]
    write_pgm(tmp_path / "x.pgm", s.image)
    np.testing.assert_array_equal(read_pgm(tmp_path / "x.pgm"), s.image)


def test_pgm_comments_and_small_maxval(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# a comment\n2 1\n# another\n15\n" + bytes([0, 15]))
    np.testing.assert_allclose(read_pgm(p), [[0.0, 1.0]])


def test_pgm_rejects_16_bit(tmp_path):
    p = tmp_path / "w.pgm"
    p.write_bytes(b"P5\n1 1\n65535\n\x00\x01")
    with pytest.raises(FormatError, match="byte"):
        read_pgm(p)


def test_pgm_rejects_bad_magic(tmp_path):
    p = tmp_path / "m.pgm"
    p.write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(FormatError, match="byte 0"):
        read_pgm(p)


def test_pgm_truncated_body(tmp_path):
    p = tmp_path / "t.pgm"
    p.write_bytes(b"P5\n4 4\n255\n\x00")
    with pytest.raises(FormatError):
        read_pgm(p)


def test_manifest_round_trip(tmp_path):
    samples = generate(4, PROFILES["a"], 16, seed=0, split="train")
    write_samples(samples, tmp_path)
    write_samples(generate(2, PROFILES["b"], 16, seed=0, domain="b", split="test"), tmp_path)
    every = read_manifest(tmp_path)
    assert len(every) == 6
    back = read_manifest(tmp_path, domain="a", split="train")
    assert [s.id for s in back] == [s.id for s in samples]
    for s, t in zip(samples, back):
        np.testing.assert_array_equal(s.image, t.image)
        np.testing.assert_array_equal(s.label, t.label)
    np.testing.assert_array_equal(read_mask(tmp_path / "labels" / f"{samples[0].id}.pgm"), samples[0].label)


def test_manifest_missing_label_names_sample(tmp_path):
    samples = generate(2, PROFILES["a"], 16, seed=0)
    write_samples(samples, tmp_path)
    (tmp_path / "labels" / f"{samples[1].id}.pgm").unlink()
    with pytest.raises(FormatError, match=samples[1].id):
        read_manifest(tmp_path)


def test_manifest_missing_key_names_sample(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps([{"id": "s1", "image_path": "x.pgm", "domain": "a", "split": "test"}]))
    with pytest.raises(FormatError, match="s1"):
        read_manifest(tmp_path)


def test_write_is_byte_stable(tmp_path):
    for d in ("one", "two"):
        write_samples(generate(3, PROFILES["b"], 16, seed=5, domain="b"), tmp_path / d)
    for f in sorted((tmp_path / "one").rglob("*.*")):
        assert f.read_bytes() == (tmp_path / "two" / f.relative_to(tmp_path / "one")).read_bytes()
