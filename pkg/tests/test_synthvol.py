import dataclasses
import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

from uvlm.encoder import FULL_INPUT_SHAPE, FULL_PATCH_SHAPE
from uvlm.synthvol import (
    CaseSpec,
    GenerationError,
    LesionSpec,
    OrganSpec,
    Report,
    check_divisible,
    default_case_spec,
    export_dataset,
    extract_labels,
    fine_to_coarse,
    generate_case,
    load_dataset,
    make_dataset,
    patch_offset,
    render_report,
    report_text,
    sample_patch,
    with_granularity,
)
from uvlm.vocab import BOS, EOS, Vocab


def no_lesion_spec():
    spec = default_case_spec()
    return dataclasses.replace(spec, lesions=tuple(dataclasses.replace(l, probability=0.0) for l in spec.lesions))


def test_no_lesion_case_gives_negative_report():
    case = generate_case(7, no_lesion_spec())
    assert case.labels.tolist() == [0, 0, 0]
    text = Vocab.for_classes(3).decode(case.report.tokens)
    assert text == "no lesion-0 is seen . no lesion-1 is seen . no lesion-2 is seen ."


def test_generation_is_bit_identical():
    spec = default_case_spec()
    a, b = generate_case(7, spec), generate_case(7, spec)
    assert a.volume.tobytes() == b.volume.tobytes()
    assert a.mask.tobytes() == b.mask.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    assert a.report == b.report


def test_different_seeds_differ():
    spec = default_case_spec()
    assert generate_case(1, spec).volume.tobytes() != generate_case(2, spec).volume.tobytes()


def test_two_organs_forced_lesion_labels():
    spec = CaseSpec(
        (32, 32, 16),
        (OrganSpec("a", (0.4, 0.46)), OrganSpec("b", (0.54, 0.6))),
        (LesionSpec(0, 0, (1, 2), (0.8, 1.0), probability=1.0),),
    )
    case = generate_case(3, spec)
    # enumerate the labels actually present
    assert set(np.unique(case.mask).tolist()) == {0, 1, 2, 3}
    assert int((case.mask == spec.lesion_label(0)).sum()) > 0
    assert case.labels.tolist() == [1]


def test_volume_range_and_shape():
    case = generate_case(11, default_case_spec((64, 64, 32)))
    assert case.volume.shape == (64, 64, 32) and case.volume.dtype == np.float32
    assert np.isfinite(case.volume).all()
    assert case.volume.min() >= 0.0 and case.volume.max() <= 1.0


@pytest.mark.parametrize("seed", range(25))
def test_mask_label_consistency(seed):
    spec = default_case_spec()
    case = generate_case(seed, spec)
    for k in range(spec.n_classes):
        assert bool(case.labels[k]) == bool((case.mask == spec.lesion_label(k)).any())
    assert case.mask.max() < spec.n_seg_classes


@pytest.mark.parametrize("seed", range(10))
def test_lesions_strictly_inside_host(seed):
    spec = default_case_spec()
    coarse_no_lesion = generate_case(seed, with_granularity(spec, "C")).mask
    case = generate_case(seed, spec)
    for l in spec.lesions:
        lesion = case.mask == spec.lesion_label(l.class_index)
        if not lesion.any():
            continue
        host = coarse_no_lesion == 1 + l.host
        assert host[lesion].all()
        # a one-voxel shell around the lesion is still host tissue or the lesion itself
        shell = ndimage.binary_dilation(lesion) & ~lesion
        assert host[shell].all()


def test_lesion_intensity_is_distinct():
    spec = dataclasses.replace(default_case_spec(), noise_sigma=0.0)
    case = generate_case(5, dataclasses.replace(spec, lesions=tuple(dataclasses.replace(l, probability=1.0) for l in spec.lesions)))
    lesion = case.mask >= spec.lesion_label(0)
    organ = (case.mask > 0) & ~lesion
    assert case.volume[lesion].min() >= 0.8
    assert case.volume[organ].max() <= 0.6 and case.volume[organ].min() >= 0.4
    assert case.volume[case.mask == 0].max() <= 0.1


def test_lesion_that_cannot_fit_names_class():
    spec = default_case_spec()
    big = dataclasses.replace(spec.lesions[1], radius=(9, 9), probability=1.0)
    spec = dataclasses.replace(spec, lesions=(spec.lesions[0], big, spec.lesions[2]))
    with pytest.raises(GenerationError, match="lesion-1"):
        generate_case(0, spec)


@pytest.mark.parametrize("seed", range(10))
def test_fine_merges_to_coarse(seed):
    base = default_case_spec()
    coarse = generate_case(seed, with_granularity(base, "C+L"))
    fine = generate_case(seed, with_granularity(base, "F+L"))
    assert coarse.volume.tobytes() == fine.volume.tobytes()
    table = fine_to_coarse(len(base.organs), base.n_classes)
    assert np.array_equal(table[fine.mask], coarse.mask)
    # every organ is split into two non-empty halves
    for o in range(len(base.organs)):
        assert (fine.mask == 1 + 2 * o).any() and (fine.mask == 2 + 2 * o).any()


def test_granularity_presets():
    base = default_case_spec()
    assert with_granularity(base, "C").n_seg_classes == 1 + 3
    assert with_granularity(base, "C+L").n_seg_classes == 1 + 3 + 3
    assert with_granularity(base, "F+L").n_seg_classes == 1 + 6 + 3
    case = generate_case(2, with_granularity(base, "C"))
    assert case.mask.max() <= 3


def test_eighteen_class_catalogue():
    spec = default_case_spec((64, 64, 32), n_classes=18)
    assert [l.class_index for l in spec.lesions] == list(range(18))
    case = generate_case(4, spec)
    assert case.labels.shape == (18,)


def test_case_spec_rejects_gapped_classes():
    with pytest.raises(ValueError):
        CaseSpec((16, 16, 8), (OrganSpec("a", (0.4, 0.5)),), (LesionSpec(1, 0, (1, 1), (0.8, 1.0)),))


def test_render_report_templates():
    v = Vocab.for_classes(3)
    assert v.decode(render_report([0, 0, 0]).tokens) == "no lesion-0 is seen . no lesion-1 is seen . no lesion-2 is seen ."
    assert report_text([1, 0]) == "lesion-0 is present . no lesion-1 is seen ."
    r = render_report([1, 0])
    assert r.tokens[0] == BOS and r.tokens[-1] == EOS


@pytest.mark.parametrize("n", range(1, 13))
def test_round_trip_exhaustive(n):
    for bits in itertools.product((0, 1), repeat=n) if n <= 8 else _sampled_bits(n):
        assert extract_labels(render_report(bits), n).tolist() == list(bits)


def _sampled_bits(n):
    rng = np.random.default_rng(n)
    yield (0,) * n
    yield (1,) * n
    for _ in range(300):
        yield tuple(int(b) for b in rng.integers(0, 2, n))


@given(st.lists(st.integers(0, 1), min_size=1, max_size=18))
def test_round_trip_property(bits):
    assert extract_labels(render_report(bits), len(bits)).tolist() == bits


def test_extract_edge_cases():
    assert extract_labels(render_report([1, 1, 0]), 3).tolist() == [1, 1, 0]
    assert extract_labels("", 3).tolist() == [0, 0, 0]
    dup = "lesion-0 is present . lesion-0 is present ."
    assert extract_labels(dup, 3).tolist() == [1, 0, 0]
    # contradicting sentences: the negation wins
    assert extract_labels("lesion-1 is present . no lesion-1 is seen .", 3).tolist() == [0, 0, 0]
    # lesion-1 must not match lesion-10
    assert extract_labels("lesion-10 is present .", 12).tolist() == [0] * 10 + [1, 0]


def test_extract_counts_unparseable():
    stats = Counter()
    assert extract_labels("completely unrelated words", 3, stats=stats).tolist() == [0, 0, 0]
    assert stats["unparseable"] == 1
    extract_labels("", 3, stats=stats)
    assert stats["unparseable"] == 1


def test_report_requires_bos_eos():
    with pytest.raises(ValueError):
        Report((BOS, 5))


def test_patch_identity_and_oracle():
    case = generate_case(1, default_case_spec())
    v, m = sample_patch(case.volume, case.mask, case.volume.shape, seed=9)
    assert np.array_equal(v, case.volume) and np.array_equal(m, case.mask)

    vol = np.random.default_rng(0).random((32, 32, 32)).astype(np.float32)
    mask = (vol > 0.5).astype(np.uint8)
    pv, pm = sample_patch(vol, mask, (16, 16, 16), seed=1)
    z, y, x = patch_offset(vol.shape, (16, 16, 16), 1)
    assert np.array_equal(pv, vol[z : z + 16, y : y + 16, x : x + 16])
    assert np.array_equal(pm, mask[z : z + 16, y : y + 16, x : x + 16])
    assert sample_patch(vol, mask, (16, 16, 16), seed=1)[0].tobytes() == pv.tobytes()


def test_patch_too_large():
    vol = np.zeros((8, 8, 8), np.float32)
    with pytest.raises(ValueError):
        sample_patch(vol, vol.astype(np.uint8), (9, 8, 8), seed=0)


def test_full_scale_patch_record():
    assert FULL_INPUT_SHAPE == (256, 256, 192)
    assert FULL_PATCH_SHAPE == (128, 128, 96)
    assert all(p <= s for p, s in zip(FULL_PATCH_SHAPE, FULL_INPUT_SHAPE))


def test_divisibility_check_names_axis():
    check_divisible((64, 64, 32), 4)
    with pytest.raises(ValueError, match="axis D=50"):
        check_divisible((50, 50, 30), 4)


def test_export_import_round_trip(tmp_path):
    ds = make_dataset(default_case_spec(), 3, 2, seed=5)
    manifest = export_dataset(ds, tmp_path / "data")
    assert (tmp_path / "data" / "case_00000" / "volume.raw").stat().st_size == 32 * 32 * 16 * 4
    assert (tmp_path / "data" / "case_00004" / "labels.txt").read_text().count("\n") == 3
    back = load_dataset(tmp_path / "data")
    assert back.volumes.tobytes() == ds.volumes.tobytes()
    assert back.masks.tobytes() == ds.masks.tobytes()
    assert np.array_equal(back.labels, ds.labels)
    assert back.reports == ds.reports
    assert list(back.split) == ["train"] * 3 + ["test"] * 2
    assert back.spec == ds.spec
    first = manifest.read_bytes()
    export_dataset(ds, tmp_path / "data")
    assert manifest.read_bytes() == first


def test_spec_hash_is_stable():
    assert default_case_spec().hash() == default_case_spec().hash()
    assert default_case_spec().hash() != default_case_spec(n_classes=4).hash()
    spec = default_case_spec()
    assert CaseSpec.from_dict(spec.to_dict()) == spec
