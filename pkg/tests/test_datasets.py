import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import kstest

from m3iqa.datasets import (KNOWN_DATASETS, DatasetManifest, FixtureError, LogitSequence,
                            ManifestError, SplitSpec, SynthSpec, apportion, decode_fixture,
                            encode_fixture, fixture_key, load_csv_records, load_manifest,
                            load_sequences, manifest_from_dict, read_fixture, save_manifest, split,
                            synth_basis, synth_generate, write_fixture)
from m3iqa.metrics import srcc
from m3iqa.numerics import make_rng
from m3iqa.protocol import MosRecord


def manifest_dict(name="toy", n=3, aspects=None, count=None, models=1):
    aspects = aspects or {"quality": True, "correspondence": False, "authenticity": False}
    return {"schema_version": 1, "name": name, "image_count": n if count is None else count,
            "model_count": models, "aspects": aspects, "mos_range": [0, 5],
            "records": [{"id": f"s{i}", "prompt": "p", "mos": {"quality": 1.0 + i % 4}}
                        for i in range(n)]}


def test_empty_manifest_is_valid():
    m = manifest_from_dict(manifest_dict(n=0))
    assert m.ids == [] and m.image_count == 0


def test_manifest_count_mismatch():
    with pytest.raises(ManifestError, match="image_count"):
        manifest_from_dict(manifest_dict(n=3, count=4))


def test_manifest_schema_violation():
    d = manifest_dict()
    del d["aspects"]["authenticity"]
    with pytest.raises(ManifestError, match="schema"):
        manifest_from_dict(d)
    d = manifest_dict()
    d["schema_version"] = 2
    with pytest.raises(ManifestError):
        manifest_from_dict(d)


def test_manifest_declared_aspect_missing_on_record():
    d = manifest_dict(aspects={"quality": True, "correspondence": True, "authenticity": False})
    with pytest.raises(ManifestError, match="correspondence"):
        manifest_from_dict(d)


def test_known_dataset_flags_enforced():
    # AGIQA-3k has no authenticity MOS; declaring it is an error
    n, models, flags = KNOWN_DATASETS["AGIQA-3k"]
    bad = dict(flags, authenticity=True)
    recs = [MosRecord(f"a{i}", "p", {"quality": 2.0, "correspondence": 2.0, "authenticity": 2.0})
            for i in range(n)]
    with pytest.raises(ManifestError, match="aspect flags"):
        DatasetManifest("AGIQA-3k", n, models, bad, (0, 5), recs)
    m = DatasetManifest("AGIQA-3k", n, models, flags, (0, 5), recs)
    assert m.image_count == 2982
    with pytest.raises(ManifestError, match="2400"):
        DatasetManifest("AIGCIQA2023", n, 6, KNOWN_DATASETS["AIGCIQA2023"][2], (0, 5), recs)


def test_manifest_roundtrip(tmp_path):
    m = manifest_from_dict(manifest_dict(n=5), root=tmp_path)
    save_manifest(m, tmp_path / "manifest.json")
    back = load_manifest(tmp_path / "manifest.json")
    assert back.to_dict() == m.to_dict()
    np.testing.assert_array_equal(back.targets(["s1", "s0"], "quality"), [2.0, 1.0])
    with pytest.raises(ManifestError):
        back.targets(["s0"], "authenticity")


def test_bad_json(tmp_path):
    (tmp_path / "m.json").write_text("{nope")
    with pytest.raises(ManifestError, match="JSON"):
        load_manifest(tmp_path / "m.json")


def test_csv_adapter(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("id,prompt,mos_quality,mos_correspondence,mos_authenticity,range_min,range_max\n"
                 "a,\"a cat, sitting\",3.2,4.1,,0,5\n")
    (rec,) = load_csv_records(p)
    assert rec.prompt == "a cat, sitting" and len(rec.mos) == 2
    (tmp_path / "bad.csv").write_text("id,prompt\n")
    with pytest.raises(ManifestError, match="missing columns"):
        load_csv_records(tmp_path / "bad.csv")


def test_apportion_worked_example():
    assert apportion(2982, (4, 1, 0)) == [2386, 596, 0]
    assert apportion(10, (1, 1, 1)) == [4, 3, 3]


@given(st.integers(0, 3000), st.tuples(*[st.integers(0, 9)] * 3).filter(lambda r: sum(r) > 0),
       st.integers(0, 2**31 - 1))
@settings(max_examples=60, deadline=None)
def test_split_partition(n, ratios, seed):
    ids = [f"x{i}" for i in range(n)]
    parts = split(ids, SplitSpec(ratios, seed))
    allv = parts["train"] + parts["test"] + parts["val"]
    assert sorted(allv) == sorted(ids) and len(set(allv)) == n
    assert [len(parts[k]) for k in ("train", "test", "val")] == apportion(n, ratios)
    assert parts == split(ids, SplitSpec(ratios, seed))


def test_split_all_train_and_bad_spec():
    ids = [str(i) for i in range(7)]
    assert sorted(split(ids, SplitSpec((1, 0, 0)))["train"]) == sorted(ids)
    with pytest.raises(ValueError):
        SplitSpec((0, 0, 0))


def test_fixture_roundtrip_and_errors(tmp_path):
    data = make_rng(0).normal(size=(5, 7)).astype(np.float32)
    path = tmp_path / "f.m3lg"
    write_fixture(LogitSequence("s", "quality", data), path)
    assert read_fixture(path).data.tobytes() == data.tobytes()
    raw = path.read_bytes()
    with pytest.raises(FixtureError, match="magic"):
        decode_fixture(b"XXXX" + raw[4:])
    with pytest.raises(FixtureError, match="expected 140 bytes, got 136"):
        decode_fixture(raw[:-4])
    with pytest.raises(FixtureError, match="payload has 144"):
        decode_fixture(raw + b"\0" * 4)
    with pytest.raises(FixtureError):
        encode_fixture(np.array([[np.nan]]))


@given(st.integers(1, 512), st.integers(1, 1024), st.integers(0, 2**31 - 1))
@settings(max_examples=15, deadline=None)
def test_fixture_roundtrip_property(L, D, seed):
    data = make_rng(seed).normal(size=(L, D)).astype(np.float32)
    assert decode_fixture(encode_fixture(data)).tobytes() == data.tobytes()


def test_missing_fixtures_listed(synth_small):
    with pytest.raises(FixtureError, match=r"missing fixtures.*first: \['nope0'"):
        load_sequences(synth_small, ["nope0", "nope1"] + synth_small.ids[:2], "quality")


def test_synth_deterministic(tmp_path):
    spec = SynthSpec(n_samples=5, length=4, width=6, seed=9)
    synth_generate(spec, tmp_path / "a")
    synth_generate(spec, tmp_path / "b")
    for f in sorted((tmp_path / "a" / "fixtures").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "fixtures" / f.name).read_bytes()
    assert (tmp_path / "a" / "manifest.json").read_text() == (tmp_path / "b" / "manifest.json").read_text()


def test_synth_variants_shapes(synth_small):
    sid = synth_small.ids[0]
    shapes = {k: read_fixture(synth_small.fixture_path(sid, k)).data.shape
              for k in ("quality", "quality.hidden_states", "quality.full_conv", "quality.no_desc")}
    assert shapes == {"quality": (6, 12), "quality.hidden_states": (6, 6),
                      "quality.full_conv": (7, 12), "quality.no_desc": (3, 12)}
    assert fixture_key("quality", "full_conv") == "quality.full_conv"


def test_synth_noise_free_signal_is_affine_and_monotone(tmp_path):
    spec = SynthSpec(n_samples=40, length=8, width=16, snr=float("inf"), seed=2, basis_seed=5)
    m = synth_generate(spec, tmp_path)
    g = synth_basis(8, 16, 5).signal["quality"]
    s = m.targets(m.ids, "quality")
    proj = np.array([read_fixture(m.fixture_path(i, "quality")).data.mean(axis=0) @ g for i in m.ids])
    A = np.c_[s, np.ones_like(s)]
    coef, *_ = np.linalg.lstsq(A, proj, rcond=None)
    assert coef[0] == pytest.approx(1.0, abs=1e-5)
    np.testing.assert_allclose(A @ coef, proj, atol=1e-5)
    order = np.argsort(s)
    assert np.all(np.diff(proj[order]) > 0)


def test_shift_is_orthogonal_to_signal():
    b = synth_basis(4, 32, 1, ("quality",))
    assert abs(b.shift_dir @ b.signal["quality"]) < 1e-12
    assert np.linalg.norm(b.shift_dir) == pytest.approx(1.0)


def test_synth_scores_uniform(tmp_path):
    m = synth_generate(SynthSpec(n_samples=1000, length=1, width=2, seed=123), tmp_path)
    s = m.targets(m.ids, "quality")
    res = kstest(s / 5.0, "uniform")
    # frozen statistic for this seed, and well inside the 5% critical value 1.36/sqrt(n)
    assert res.statistic == pytest.approx(KS_STATISTIC_SEED123, abs=1e-12)
    assert res.statistic < 1.36 / np.sqrt(1000)


KS_STATISTIC_SEED123 = 0.03585415773030026


def test_ols_learnability(synth_500):
    """Closed-form least squares on mean-pooled features sets the bar for learnability."""
    parts = split(synth_500, SplitSpec((4, 1, 0), 0))
    def feats(ids):
        X = np.array([x.mean(axis=0) for x in load_sequences(synth_500, ids, "quality")])
        return np.c_[X, np.ones(len(ids))]
    w, *_ = np.linalg.lstsq(feats(parts["train"]), synth_500.targets(parts["train"], "quality"), rcond=None)
    pred = feats(parts["test"]) @ w
    assert len(parts["train"]) == 400 and len(parts["test"]) == 100
    assert srcc(pred, synth_500.targets(parts["test"], "quality")) >= 0.95
