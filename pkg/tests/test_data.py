import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmml.data import (
    CLINICAL_TEMPLATES,
    AvailabilityMask,
    DatasetParseError,
    RawSample,
    SchemaError,
    SyntheticSpec,
    TemplateSchema,
    enumerate_patterns,
    generate_synthetic,
    load_dataset,
    load_manifest,
    manifest_path,
    render_attributes,
    sample_dropout_mask,
    save_dataset,
    split,
    synthetic_schema,
    synthetic_world,
)


# -- masks -----------------------------------------------------------------

def test_mask_needs_an_available_modality():
    with pytest.raises(ValueError):
        AvailabilityMask((False, False))


def test_mask_partition_and_pattern():
    m = AvailabilityMask((True, False, True))
    assert m.available == [0, 2] and m.missing == [1]
    assert m.pattern() == "02"
    assert AvailabilityMask.from_pattern("02", 3) == m
    with pytest.raises(ValueError):
        AvailabilityMask.from_pattern("03", 3)
    with pytest.raises(ValueError):
        AvailabilityMask.from_pattern("", 3)


def test_enumerate_patterns_m3_order():
    assert [m.pattern() for m in enumerate_patterns(3)] == ["0", "1", "2", "01", "02", "12", "012"]


def test_enumerate_patterns_m1():
    assert [m.flags for m in enumerate_patterns(1)] == [(True,)]


def test_enumerate_patterns_m4_order():
    expected = ["0", "1", "2", "3", "01", "02", "03", "12", "13", "23",
                "012", "013", "023", "123", "0123"]
    assert [m.pattern() for m in enumerate_patterns(4)] == expected


@settings(max_examples=8, deadline=None)
@given(st.integers(1, 7))
def test_enumerate_patterns_count(M):
    pats = enumerate_patterns(M)
    assert len(pats) == 2**M - 1 == len({p.flags for p in pats})


def test_dropout_mask_m1_always_true(rng):
    assert all(sample_dropout_mask(1, rng).flags == (True,) for _ in range(200))


def test_dropout_mask_m2_never_empty(rng):
    assert all(any(sample_dropout_mask(2, rng).flags) for _ in range(2000))


def test_dropout_mask_m3_uniform(rng):
    counts = Counter(sample_dropout_mask(3, rng).pattern() for _ in range(100_000))
    assert len(counts) == 7
    for c in counts.values():
        assert abs(c / 100_000 - 1 / 7) < 0.02


# -- templating ------------------------------------------------------------

def test_render_clinical_template():
    schema = TemplateSchema([("sex", "The {} of patient is {}")])
    assert render_attributes([("sex", "male")], schema) == "The sex of patient is male"
    assert CLINICAL_TEMPLATES.template("sex") == "The {} of patient is {}"


def test_render_empty():
    assert render_attributes([], CLINICAL_TEMPLATES) == ""


def test_render_two_attributes_concatenation_oracle():
    schema = TemplateSchema([("sex", "The {} of patient is {}"), ("age", "The {} of patient is {}")])
    got = render_attributes([("age", "45"), ("sex", "female")], schema)
    expected = "The sex of patient is female" + ". " + "The age of patient is 45"
    assert got == expected


def test_render_unknown_attribute():
    with pytest.raises(SchemaError):
        render_attributes([("height", "180")], CLINICAL_TEMPLATES)


def test_schema_validation():
    with pytest.raises(SchemaError):
        TemplateSchema([("a", "only {} slot")])
    with pytest.raises(SchemaError):
        TemplateSchema([("a", "{} {}"), ("a", "{} is {}")])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["sex", "age", "elevation", "location", "management"]), unique=True))
def test_render_contains_each_name_and_value_once(names):
    schema = synthetic_schema(5)
    attrs = [(n, f"v{n}x") for n in names]
    words = [w.rstrip(".") for w in render_attributes(attrs, schema).split()]
    for n, v in attrs:
        assert words.count(n) == 1
        assert words.count(v) == 1


# -- synthetic generator ---------------------------------------------------

def test_zero_noise_samples_lie_on_class_images():
    spec = SyntheticSpec(noise_std=0.0, n_samples=30, feature_dim=16, latent_dim=8)
    world = synthetic_world(spec)
    for s in generate_synthetic(spec):
        for W, x in zip(world.image_maps, s.image_features):
            np.testing.assert_allclose(x, W @ world.class_means[s.label], atol=1e-12)


def test_generator_deterministic_bytes():
    spec = SyntheticSpec(n_samples=50, feature_dim=16)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert a == b
    assert all(x.tobytes() == y.tobytes() for sa, sb in zip(a, b) for x, y in zip(sa.image_features, sb.image_features))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4), st.integers(2, 5))
def test_generator_pure_function_of_spec(seed, M, C):
    spec = SyntheticSpec(M=M, C=C, S=(4,) * M, n_samples=3 * C, seed=seed, feature_dim=8, latent_dim=4)
    a = generate_synthetic(spec)
    assert a == generate_synthetic(spec)
    assert all(len(s.image_features) == M - 1 and s.M == M for s in a)
    assert {s.label for s in a} == set(range(C))


def test_low_noise_single_modality_is_linearly_separable():
    spec = SyntheticSpec(n_samples=1200, noise_std=0.1, feature_dim=32, latent_dim=16)
    tr, te = split(generate_synthetic(spec), 900)
    y_tr = np.eye(spec.C)[[s.label for s in tr]]
    y_te = np.array([s.label for s in te])
    for m in range(spec.M - 1):
        X = np.stack([np.append(s.image_features[m], 1.0) for s in tr])
        W, *_ = np.linalg.lstsq(X, y_tr, rcond=None)
        Xt = np.stack([np.append(s.image_features[m], 1.0) for s in te])
        assert np.mean(np.argmax(Xt @ W, axis=1) == y_te) > 0.9


def test_spec_validation():
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticSpec(M=1, S=(4,)))
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticSpec(n_samples=2))
    assert generate_synthetic(SyntheticSpec(n_samples=0)) == []


# -- files -----------------------------------------------------------------

def _small(n=12):
    spec = SyntheticSpec(n_samples=n, feature_dim=6, latent_dim=4)
    return spec, generate_synthetic(spec)


def test_round_trip(tmp_path):
    spec, samples = _small()
    path = tmp_path / "d.jsonl"
    save_dataset(samples, path, synthetic_schema(spec.n_attributes), spec.C)
    assert load_dataset(path) == samples
    man = load_manifest(path)
    assert man.M == 3 and man.C == spec.C and man.vector_lengths == [6, 6]
    assert manifest_path(path).exists()


def test_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert load_dataset(path) == []


def test_missing_modality_vector_names_record(tmp_path):
    spec, samples = _small(6)
    path = tmp_path / "d.jsonl"
    save_dataset(samples, path, synthetic_schema(spec.n_attributes), spec.C)
    lines = path.read_text().splitlines()
    rec = json.loads(lines[3])
    del rec["modality_1"]
    lines[3] = json.dumps(rec)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetParseError) as info:
        load_dataset(path)
    assert rec["id"] in str(info.value) and "line 4" in str(info.value)


def test_malformed_json_reports_line(tmp_path):
    spec, samples = _small(4)
    path = tmp_path / "d.jsonl"
    save_dataset(samples, path, synthetic_schema(spec.n_attributes), spec.C)
    path.write_text(path.read_text() + "{not json\n")
    with pytest.raises(DatasetParseError, match="line 5"):
        load_dataset(path)


def test_inconsistent_modality_count_is_schema_error(tmp_path):
    spec, samples = _small(4)
    path = tmp_path / "d.jsonl"
    save_dataset(samples, path, synthetic_schema(spec.n_attributes), spec.C)
    rec = json.loads(path.read_text().splitlines()[0])
    rec["modality_2"] = [0.0] * 6
    rec["id"] = "odd"
    path.write_text(path.read_text() + json.dumps(rec) + "\n")
    with pytest.raises((SchemaError, DatasetParseError)):
        load_dataset(path)


def test_split_and_sample_equality():
    _, samples = _small(10)
    a, b = split(samples, 7)
    assert len(a) == 7 and len(b) == 3 and a + b == samples
    other = RawSample([x.copy() for x in samples[0].image_features], list(samples[0].attributes), samples[0].label, "zz")
    assert other != samples[0]
