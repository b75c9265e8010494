"""Dataset manifests, deterministic splits, logits fixtures and synthetic data.

A manifest is a JSON document listing MOS records and, per record, binary
fixture files holding the ``L x D`` feature sequence for each aspect. The
synthetic generator writes both so the training stage can be exercised
without the external images or a multimodal model.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from ._io import atomic_write_bytes, atomic_write_text
from .numerics import make_rng, spawn_seeds
from .protocol import Aspect, MosRecord, mos_to_label

MANIFEST_SCHEMA_VERSION = 1
FIXTURE_MAGIC = b"M3LG"
FIXTURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")

# name -> (images, generator models, aspect availability)
KNOWN_DATASETS = {
    "AGIQA-3k": (2982, 6, {"quality": True, "correspondence": True, "authenticity": False}),
    "AIGCIQA2023": (2400, 6, {"quality": True, "correspondence": True, "authenticity": True}),
    "AIGIQA-20k": (20000, 15, {"quality": True, "correspondence": False, "authenticity": False}),
}
# train:test:val
KNOWN_SPLITS = {"AGIQA-3k": (4, 1, 0), "AIGCIQA2023": (3, 1, 0), "AIGIQA-20k": (7, 2, 1)}

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "name", "image_count", "model_count", "aspects",
                 "mos_range", "records"],
    "properties": {
        "schema_version": {"const": MANIFEST_SCHEMA_VERSION},
        "name": {"type": "string"},
        "image_count": {"type": "integer", "minimum": 0},
        "model_count": {"type": "integer", "minimum": 0},
        "aspects": {
            "type": "object",
            "properties": {a.value: {"type": "boolean"} for a in Aspect},
            "required": [a.value for a in Aspect],
            "additionalProperties": False,
        },
        "mos_range": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        "records": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "prompt", "mos"],
                "properties": {
                    "id": {"type": "string"},
                    "prompt": {"type": "string"},
                    "mos": {"type": "object",
                            "additionalProperties": {"type": ["number", "null"]}},
                    "fixtures": {"type": "object", "additionalProperties": {"type": "string"}},
                },
            },
        },
    },
}


class ManifestError(ValueError):
    pass


class FixtureError(ValueError):
    pass


def fixture_key(aspect, variant: str = "") -> str:
    aspect = Aspect.parse(aspect).value
    return f"{aspect}.{variant}" if variant else aspect


@dataclass
class DatasetManifest:
    name: str
    image_count: int
    model_count: int
    aspects: dict
    mos_range: tuple
    records: list = field(default_factory=list)
    fixtures: dict = field(default_factory=dict)  # sample id -> {key: relative path}
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.mos_range = tuple(float(v) for v in self.mos_range)
        self.aspects = {Aspect.parse(k).value: bool(v) for k, v in self.aspects.items()}
        self.validate()

    def validate(self):
        if len(self.records) != self.image_count:
            raise ManifestError(f"{self.name}: image_count {self.image_count} != "
                                f"{len(self.records)} records")
        ids = [r.sample_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ManifestError(f"{self.name}: duplicate sample ids")
        for rec in self.records:
            for aspect, present in self.aspects.items():
                if present and Aspect(aspect) not in rec.mos:
                    raise ManifestError(f"{self.name}: record {rec.sample_id} lacks {aspect} MOS")
        if self.name in KNOWN_DATASETS:
            count, models, flags = KNOWN_DATASETS[self.name]
            if self.image_count != count:
                raise ManifestError(f"{self.name}: expected {count} images, manifest says {self.image_count}")
            if self.model_count != models:
                raise ManifestError(f"{self.name}: expected {models} generator models, got {self.model_count}")
            if self.aspects != flags:
                raise ManifestError(f"{self.name}: aspect flags {self.aspects} differ from {flags}")

    @property
    def ids(self) -> list:
        return [r.sample_id for r in self.records]

    def record(self, sample_id: str) -> MosRecord:
        for r in self.records:
            if r.sample_id == sample_id:
                return r
        raise KeyError(sample_id)

    def targets(self, ids, aspect) -> np.ndarray:
        aspect = Aspect.parse(aspect)
        if not self.aspects.get(aspect.value):
            raise ManifestError(f"{self.name} has no {aspect.value} MOS")
        by_id = {r.sample_id: r for r in self.records}
        return np.array([by_id[i].mos[aspect] for i in ids], dtype=np.float64)

    def fixture_path(self, sample_id: str, key: str) -> Path:
        rel = self.fixtures.get(sample_id, {}).get(key)
        if rel is None:
            raise FixtureError(f"{sample_id}: no fixture for {key!r}")
        return self.root / rel

    def to_dict(self) -> dict:
        return {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "name": self.name,
            "image_count": self.image_count,
            "model_count": self.model_count,
            "aspects": dict(self.aspects),
            "mos_range": list(self.mos_range),
            "records": [{"id": r.sample_id, "prompt": r.prompt,
                         "mos": {a.value: v for a, v in r.mos.items()},
                         "fixtures": self.fixtures.get(r.sample_id, {})}
                        for r in self.records],
        }


def manifest_from_dict(d: dict, root=".") -> DatasetManifest:
    try:
        jsonschema.validate(d, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ManifestError(f"manifest schema violation: {exc.message}") from None
    rng_ = tuple(d["mos_range"])
    try:
        records = [MosRecord(r["id"], r["prompt"], r["mos"], rng_) for r in d["records"]]
    except ValueError as exc:
        raise ManifestError(str(exc)) from None
    fixtures = {r["id"]: dict(r.get("fixtures", {})) for r in d["records"]}
    return DatasetManifest(d["name"], d["image_count"], d["model_count"], d["aspects"],
                           rng_, records, fixtures, Path(root))


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: not valid JSON ({exc})") from None
    return manifest_from_dict(d, root=path.parent)


def save_manifest(manifest: DatasetManifest, path) -> None:
    atomic_write_text(path, json.dumps(manifest.to_dict(), indent=1) + "\n")


CSV_COLUMNS = ("id", "prompt", "mos_quality", "mos_correspondence", "mos_authenticity",
               "range_min", "range_max")


def load_csv_records(path) -> list:
    """Read the id/prompt/MOS adapter CSV; empty MOS cells mean the aspect is absent."""
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ManifestError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            mos = {a: float(row[f"mos_{a.value}"]) for a in Aspect if row[f"mos_{a.value}"].strip()}
            records.append(MosRecord(row["id"], row["prompt"], mos,
                                     (float(row["range_min"]), float(row["range_max"]))))
    return records


# ---------------------------------------------------------------- splits

@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple = (4, 1, 0)  # train : test : val
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios) or sum(self.ratios) <= 0:
            raise ValueError(f"split ratios must be 3 non-negative integers with a positive sum, got {self.ratios}")


def apportion(n: int, ratios) -> list:
    """Largest-remainder apportionment of ``n`` items; ties go to the earlier part."""
    total = sum(ratios)
    quotas = [n * r / total for r in ratios]
    sizes = [math.floor(q) for q in quotas]
    left = n - sum(sizes)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:left]:
        sizes[i] += 1
    return sizes


def split(manifest_or_ids, spec: SplitSpec) -> dict:
    ids = manifest_or_ids.ids if isinstance(manifest_or_ids, DatasetManifest) else list(manifest_or_ids)
    perm = make_rng(spec.seed).permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    n_train, n_test, _ = apportion(len(ids), spec.ratios)
    return {"train": shuffled[:n_train],
            "test": shuffled[n_train:n_train + n_test],
            "val": shuffled[n_train + n_test:]}


# ---------------------------------------------------------------- fixtures

@dataclass
class LogitSequence:
    sample_id: str
    aspect: str
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise FixtureError(f"{self.sample_id}: sequence must be (L>=1, D), got {self.data.shape}")

    @property
    def length(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def encode_fixture(data: np.ndarray) -> bytes:
    data = np.asarray(data, dtype="<f4")
    if not np.all(np.isfinite(data)):
        raise FixtureError("fixture data must be finite")
    L, D = data.shape
    return _HEADER.pack(FIXTURE_MAGIC, FIXTURE_VERSION, L, D) + np.ascontiguousarray(data).tobytes()


def decode_fixture(raw: bytes, name: str = "fixture") -> np.ndarray:
    if len(raw) < _HEADER.size:
        raise FixtureError(f"{name}: truncated header ({len(raw)} bytes)")
    magic, version, L, D = _HEADER.unpack_from(raw)
    if magic != FIXTURE_MAGIC:
        raise FixtureError(f"{name}: bad magic {magic!r}, expected {FIXTURE_MAGIC!r}")
    if version != FIXTURE_VERSION:
        raise FixtureError(f"{name}: unsupported fixture version {version}")
    expected = 4 * L * D
    actual = len(raw) - _HEADER.size
    if actual < expected:
        raise FixtureError(f"{name}: truncated payload, expected {expected} bytes, got {actual}")
    if actual > expected:
        raise FixtureError(f"{name}: header says {L}x{D} ({expected} bytes) but payload has {actual}")
    if L < 1:
        raise FixtureError(f"{name}: empty sequence")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(L, D).astype(np.float32)


def write_fixture(seq: LogitSequence, path) -> None:
    atomic_write_bytes(path, encode_fixture(seq.data))


def read_fixture(path, sample_id: str | None = None, aspect: str = "quality") -> LogitSequence:
    path = Path(path)
    data = decode_fixture(path.read_bytes(), str(path))
    return LogitSequence(sample_id or path.stem.split(".")[0], aspect, data)


def load_sequences(manifest: DatasetManifest, ids, key: str) -> list:
    missing = [i for i in ids if not _fixture_exists(manifest, i, key)]
    if missing:
        raise FixtureError(f"{len(missing)} missing fixtures for {key!r}, first: {missing[:5]}")
    return [read_fixture(manifest.fixture_path(i, key), i).data for i in ids]


def _fixture_exists(manifest, sample_id, key) -> bool:
    try:
        return manifest.fixture_path(sample_id, key).is_file()
    except FixtureError:
        return False


# ---------------------------------------------------------------- synthetic oracle

SYNTH_VARIANTS = ("hidden_states", "full_conv", "no_desc")


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic logits: ``E[t, v] = b[t, v] + s * g[v] + noise[t, v] / snr``.

    ``basis_seed`` fixes the token pattern ``b``, signal direction ``g`` and
    shift direction, so domains generated with different ``seed`` share them.
    """

    n_samples: int = 500
    length: int = 32
    width: int = 64
    snr: float = 5.0
    mos_range: tuple = (0.0, 5.0)
    seed: int = 0
    shift: float = 0.0
    basis_seed: int = 0
    name: str = "synthetic"
    aspects: tuple = ("quality",)
    variants: tuple = ()
    hidden_width: int | None = None

    def __post_init__(self):
        if not self.snr > 0:
            raise ValueError("snr must be > 0")
        if self.n_samples < 0 or self.length < 1 or self.width < 2:
            raise ValueError("need n_samples >= 0, length >= 1, width >= 2")
        for v in self.variants:
            if v not in SYNTH_VARIANTS:
                raise ValueError(f"unknown synthetic variant {v!r}")


@dataclass
class SynthBasis:
    pattern: np.ndarray  # (L, D)
    signal: dict         # aspect -> unit (D,)
    shift_dir: np.ndarray


def synth_basis(length: int, width: int, basis_seed: int, aspects=("quality",)) -> SynthBasis:
    rng = make_rng(np.random.SeedSequence([basis_seed, length, width]))
    pattern = rng.normal(size=(length, width))
    signal = {}
    for a in Aspect:  # fixed draw order keeps directions stable across aspect subsets
        g = rng.normal(size=width)
        signal[a.value] = g / np.linalg.norm(g)
    u = rng.normal(size=width)
    for a in aspects:
        g = signal[Aspect.parse(a).value]
        u -= (u @ g) * g
    return SynthBasis(pattern, signal, u / np.linalg.norm(u))


def synth_sequence(basis: SynthBasis, aspect: str, score: float, noise: np.ndarray,
                   snr: float, shift: float) -> np.ndarray:
    E = basis.pattern + score * basis.signal[aspect][None, :]
    if math.isfinite(snr):
        E = E + noise / snr
    if shift:
        E = E + shift * basis.shift_dir[None, :]
    return E.astype(np.float32)


def synth_generate(spec: SynthSpec, out_dir) -> DatasetManifest:
    """Write fixtures plus ``manifest.json`` under ``out_dir``; MOS equals the latent score."""
    out_dir = Path(out_dir)
    aspects = [Aspect.parse(a).value for a in spec.aspects]
    lo, hi = spec.mos_range
    basis = synth_basis(spec.length, spec.width, spec.basis_seed, aspects)
    hw = spec.hidden_width or max(2, spec.width // 2)
    hbasis = synth_basis(spec.length, hw, spec.basis_seed + 7919, aspects) \
        if "hidden_states" in spec.variants else None

    records, fixtures = [], {}
    for i, ss in enumerate(spawn_seeds(spec.seed, spec.n_samples)):
        rng = make_rng(ss)
        sid = f"{spec.name}-{i:05d}"
        mos, paths = {}, {}
        for a in aspects:
            s = float(rng.uniform(lo, hi))
            mos[a] = s
            noise = rng.normal(size=(spec.length, spec.width))
            E = synth_sequence(basis, a, s, noise, spec.snr, spec.shift)
            rel = f"fixtures/{sid}.{a}.m3lg"
            write_fixture(LogitSequence(sid, a, E), out_dir / rel)
            paths[fixture_key(a)] = rel
            if hbasis is not None:
                hnoise = rng.normal(size=(spec.length, hw))
                H = synth_sequence(hbasis, a, s, hnoise, spec.snr, spec.shift)
                rel = f"fixtures/{sid}.{a}.hidden_states.m3lg"
                write_fixture(LogitSequence(sid, a, H), out_dir / rel)
                paths[fixture_key(a, "hidden_states")] = rel
            if "full_conv" in spec.variants:
                # one extra token carrying the bucketed answer word
                k = mos_to_label(s, spec.mos_range).index
                answer = lo + (k + 0.5) * (hi - lo) / 5.0
                last = basis.pattern[-1] + answer * basis.signal[a] + spec.shift * basis.shift_dir
                F = np.vstack([E, last[None, :].astype(np.float32)])
                rel = f"fixtures/{sid}.{a}.full_conv.m3lg"
                write_fixture(LogitSequence(sid, a, F), out_dir / rel)
                paths[fixture_key(a, "full_conv")] = rel
            if "no_desc" in spec.variants:
                # without the description turn only the leading half of the tokens remains
                rel = f"fixtures/{sid}.{a}.no_desc.m3lg"
                write_fixture(LogitSequence(sid, a, E[:max(1, spec.length // 2)]), out_dir / rel)
                paths[fixture_key(a, "no_desc")] = rel
        records.append(MosRecord(sid, f"synthetic prompt {i}", mos, spec.mos_range))
        fixtures[sid] = paths

    manifest = DatasetManifest(spec.name, spec.n_samples, 1,
                               {a.value: a.value in aspects for a in Aspect},
                               spec.mos_range, records, fixtures, out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest

