"""Multi-domain dataset model, procedural generator, split plans, tokenization and batching."""

from __future__ import annotations

import itertools
import json
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from gvrt.errors import ConfigError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

SHAPES = ("circle", "square", "triangle", "cross", "diamond")
COLORS = {
    "red": (0.90, 0.12, 0.10),
    "green": (0.10, 0.78, 0.15),
    "blue": (0.15, 0.30, 0.95),
    "yellow": (0.95, 0.85, 0.10),
}
PATTERNS = ("solid", "striped", "dotted")
SIZES = {"small": 0.21, "large": 0.29}
POSITIONS = {
    "center": (0.0, 0.0),
    "upper left": (-0.17, -0.17),
    "upper right": (0.17, -0.17),
    "lower left": (-0.17, 0.17),
    "lower right": (0.17, 0.17),
}
TRANSFORMS = ("identity", "hue-rotation", "texture-overlay", "inversion", "noise")
DOMAIN_NAMES = {
    "identity": "photo",
    "hue-rotation": "tinted",
    "texture-overlay": "textured",
    "inversion": "inverted",
    "noise": "noisy",
}


# ---------------------------------------------------------------------------
# Dataset model
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    id: int
    image: np.ndarray
    label: int
    domain: int
    texts: List[str]


@dataclass
class SynthSpec:
    num_classes: int = 8
    num_domains: int = 4
    image_size: int = 32
    samples_per_class: int = 60
    seed: int = 0
    transforms: Optional[List[str]] = None

    def domain_transforms(self) -> List[str]:
        if self.transforms is not None:
            return list(self.transforms)
        return list(TRANSFORMS[: self.num_domains])


class MultiDomainDataset:
    """Samples spanning several domains; a sample ``id`` names a sibling set.

    Images are stored in one contiguous float32 array so batching is a gather.
    """

    def __init__(self, samples, num_classes, num_domains, class_names, domain_names,
                 class_sentences=None, spec=None, class_attributes=None):
        self.samples: List[Sample] = list(samples)
        self.num_classes = int(num_classes)
        self.num_domains = int(num_domains)
        self.class_names = list(class_names)
        self.domain_names = list(domain_names)
        self.class_sentences = list(class_sentences or self.class_names)
        self.class_attributes = class_attributes
        self.spec = spec
        self.images = np.stack([s.image for s in self.samples]).astype(np.float32)
        self._row = {(s.id, s.domain): i for i, s in enumerate(self.samples)}
        if len(self._row) != len(self.samples):
            raise ConfigError("duplicate (id, domain) pair in dataset")
        self._by_id: Dict[int, Sample] = {}
        for s in self.samples:
            self._by_id.setdefault(s.id, s)

    def __len__(self):
        return len(self.samples)

    @property
    def ids(self) -> List[int]:
        return sorted(self._by_id)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def row(self, sample_id: int, domain: int) -> int:
        return self._row[(sample_id, domain)]

    def get(self, sample_id: int, domain: int) -> Sample:
        return self.samples[self._row[(sample_id, domain)]]

    def label_of(self, sample_id: int) -> int:
        return self._by_id[sample_id].label

    def texts_of(self, sample_id: int) -> List[str]:
        return self._by_id[sample_id].texts

    def check_invariants(self):
        """Raise ``AssertionError`` on the first violated dataset invariant."""
        for s in self.samples:
            sib = self._by_id[s.id]
            assert s.label == sib.label and s.texts == sib.texts, f"sibling mismatch for id {s.id}"
            assert s.texts, f"empty texts for id {s.id}"
            assert 0 <= s.label < self.num_classes and 0 <= s.domain < self.num_domains
        assert self.images.min() >= 0.0 and self.images.max() <= 1.0
        seen = {(s.label, s.domain) for s in self.samples}
        for k in range(self.num_classes):
            for d in range(self.num_domains):
                assert (k, d) in seen, f"class {k} missing from domain {d}"


# ---------------------------------------------------------------------------
# Procedural rendering
# ---------------------------------------------------------------------------


def _shape_mask(shape, dx, dy, r):
    if shape == "circle":
        return dx ** 2 + dy ** 2 <= r ** 2
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.82 * r
    if shape == "triangle":
        t = (dy + r) / (1.8 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * r)
    if shape == "cross":
        w = r / 3
        return ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | ((np.abs(dy) <= w) & (np.abs(dx) <= r))
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    raise ConfigError(f"unknown shape {shape!r}")


def _pattern(pattern, size):
    jj, ii = np.meshgrid(np.arange(size), np.arange(size))
    if pattern == "solid":
        return np.ones((size, size))
    if pattern == "striped":
        return np.where(((ii + jj) // 2) % 2 == 0, 1.0, 0.3)
    if pattern == "dotted":
        return np.where((ii % 4 < 2) & (jj % 4 < 2), 1.0, 0.3)
    raise ConfigError(f"unknown pattern {pattern!r}")


def render_canonical(attrs, nuisance, size):
    """Render one class instance on a dark background; returns ``[3, size, size]`` in [0, 1]."""
    shape, color, pattern = attrs
    size_name, pos_name, jitter, shade = nuisance
    c = (np.arange(size) + 0.5) / size
    xx, yy = np.meshgrid(c, c)
    ox, oy = POSITIONS[pos_name]
    dx = xx - (0.5 + ox + jitter[0])
    dy = yy - (0.5 + oy + jitter[1])
    mask = _shape_mask(shape, dx, dy, SIZES[size_name]).astype(np.float64)
    fill = _pattern(pattern, size) * mask
    rgb = np.asarray(COLORS[color]) * shade
    bg = 0.08
    img = bg * (1 - mask)[None] + rgb[:, None, None] * fill[None]
    return np.clip(img, 0.0, 1.0)


def apply_transform(name, image, rng):
    """Apply a domain style transform. Transforms keep shape, hue family and pattern intact."""
    if name == "identity":
        return image
    if name == "hue-rotation":
        hsv = rgb_to_hsv(np.moveaxis(image, 0, -1))
        grey = hsv[..., 1] < 0.05
        hsv[..., 0] = (hsv[..., 0] + 25 / 360) % 1.0
        # the backdrop stays neutral (a coloured one reads as colour evidence) but gets lighter
        hsv[..., 2] = np.where(grey & (hsv[..., 2] < 0.2), 0.3, hsv[..., 2])
        out = hsv_to_rgb(hsv)
        return np.clip(np.moveaxis(out, -1, 0), 0, 1)
    if name == "texture-overlay":
        size = image.shape[-1]
        c = np.arange(size)
        xx, yy = np.meshgrid(c, c)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        tex = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / 5.0 + phase)
        tint = rng.uniform(0.3, 0.8, size=3)
        return np.clip(0.65 * image + 0.35 * tex[None] * tint[:, None, None], 0, 1)
    if name == "inversion":
        hsv = rgb_to_hsv(np.moveaxis(image, 0, -1))
        hsv[..., 2] = 1.0 - hsv[..., 2] * 0.8
        return np.clip(np.moveaxis(hsv_to_rgb(hsv), -1, 0), 0, 1)
    if name == "noise":
        return np.clip(image + rng.normal(0, 0.2, size=image.shape), 0, 1)
    raise ConfigError(f"unknown domain transform {name!r}")


def class_sentence(attrs) -> str:
    shape, color, pattern = attrs
    return f"this is a {color} {shape} with a {pattern} fill"


def image_sentences(attrs, nuisance) -> List[str]:
    shape, color, pattern = attrs
    size_name, pos_name = nuisance[0], nuisance[1]
    where = "in the center" if pos_name == "center" else f"in the {pos_name}"
    return [
        f"a {size_name} {color} {shape} with a {pattern} fill {where}",
        f"this {shape} is {size_name} and {color} with a {pattern} fill",
    ]


def draw_nuisance(seed: int, sample_id: int):
    """Per-id nuisance ``(size, position, jitter, shade)``, shared by all siblings."""
    srng = np.random.default_rng([seed, sample_id])
    return (
        list(SIZES)[srng.integers(len(SIZES))],
        list(POSITIONS)[srng.integers(len(POSITIONS))],
        tuple(srng.uniform(-0.03, 0.03, size=2)),
        float(srng.uniform(0.8, 1.0)),
    )


def generate_synthetic_dataset(spec: SynthSpec) -> MultiDomainDataset:
    """Procedurally render ``num_classes`` attribute tuples across the style domains.

    Every sibling set (one ``id``) shares its nuisance draw, label and sentences;
    only the domain transform differs.
    """
    K, M, S = spec.num_classes, spec.num_domains, spec.image_size
    transforms = spec.domain_transforms()
    if K < 2 or M < 2 or S < 16:
        raise ConfigError("need num_classes >= 2, num_domains >= 2, image_size >= 16")
    if spec.samples_per_class < 1:
        raise ConfigError("samples_per_class must be >= 1")
    if len(transforms) != M:
        raise ConfigError(f"{M} domains but {len(transforms)} transforms given")
    for t in transforms:
        if t not in TRANSFORMS:
            raise ConfigError(f"unknown domain transform {t!r}; valid: {list(TRANSFORMS)}")
    space = list(itertools.product(SHAPES, COLORS, PATTERNS))
    if K > len(space):
        raise ConfigError(f"{K} classes exceed the attribute space of {len(space)} tuples")

    rng = np.random.default_rng(spec.seed)
    chosen = [space[i] for i in sorted(rng.choice(len(space), size=K, replace=False))]
    samples = []
    n = spec.samples_per_class
    for k, attrs in enumerate(chosen):
        for j in range(n):
            sid = k * n + j
            nuisance = draw_nuisance(spec.seed, sid)
            base = render_canonical(attrs, nuisance, S)
            texts = image_sentences(attrs, nuisance)
            for d, t in enumerate(transforms):
                drng = np.random.default_rng([spec.seed, sid, d])
                img = apply_transform(t, base, drng).astype(np.float32)
                samples.append(Sample(sid, img, k, d, texts))
    return MultiDomainDataset(
        samples,
        num_classes=K,
        num_domains=M,
        class_names=["-".join((a[1], a[0], a[2])) for a in chosen],
        domain_names=[DOMAIN_NAMES[t] for t in transforms],
        class_sentences=[class_sentence(a) for a in chosen],
        spec=asdict(spec),
        class_attributes=[list(a) for a in chosen],
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

FORMAT_VERSION = 1


def save_dataset(ds: MultiDomainDataset, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "num_classes": ds.num_classes,
        "num_domains": ds.num_domains,
        "class_names": ds.class_names,
        "domain_names": ds.domain_names,
        "class_sentences": ds.class_sentences,
        "class_attributes": ds.class_attributes,
        "image_shape": list(ds.image_shape),
        "spec": ds.spec,
        "seed": (ds.spec or {}).get("seed"),
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2))
    with open(path / "samples.bin", "wb") as fh:
        for img in ds.images:
            payload = np.ascontiguousarray(img, dtype="<f4").tobytes()
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)
    with open(path / "texts.jsonl", "w") as fh:
        for s in ds.samples:
            fh.write(json.dumps({"id": s.id, "domain": s.domain, "label": s.label, "sentences": s.texts}) + "\n")


def load_dataset(path) -> MultiDomainDataset:
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    shape = tuple(meta["image_shape"])
    rows = [json.loads(line) for line in (path / "texts.jsonl").read_text().splitlines() if line]
    images = []
    with open(path / "samples.bin", "rb") as fh:
        for _ in rows:
            (n,) = struct.unpack("<I", fh.read(4))
            images.append(np.frombuffer(fh.read(n), dtype="<f4").reshape(shape))
    samples = [Sample(r["id"], img, r["label"], r["domain"], r["sentences"]) for r, img in zip(rows, images)]
    return MultiDomainDataset(
        samples,
        meta["num_classes"],
        meta["num_domains"],
        meta["class_names"],
        meta["domain_names"],
        class_sentences=meta.get("class_sentences"),
        spec=meta.get("spec"),
        class_attributes=meta.get("class_attributes"),
    )


# ---------------------------------------------------------------------------
# Split plans
# ---------------------------------------------------------------------------

NUM_GROUPS = 3


@dataclass
class SplitPlan:
    mode: str
    target_domains: Tuple[int, ...]
    source_domains: Tuple[int, ...]
    train: Dict[int, List[int]]
    val: Dict[int, List[int]]
    test: Dict[int, List[int]]
    groups: Dict[int, int]
    seed: int = 0
    val_fraction: float = 0.2
    test_fraction: float = 0.3
    source_groups: Dict[int, List[int]] = field(default_factory=dict)

    def train_ids(self):
        return sorted({i for ids in self.train.values() for i in ids})

    def to_json(self) -> dict:
        enc = lambda d: {str(k): list(v) for k, v in d.items()}
        return {
            "mode": self.mode,
            "target_domains": list(self.target_domains),
            "source_domains": list(self.source_domains),
            "train": enc(self.train),
            "val": enc(self.val),
            "test": enc(self.test),
            "groups": {str(k): v for k, v in self.groups.items()},
            "source_groups": enc(self.source_groups),
            "seed": self.seed,
            "val_fraction": self.val_fraction,
            "test_fraction": self.test_fraction,
        }

    @classmethod
    def from_json(cls, obj) -> "SplitPlan":
        dec = lambda d: {int(k): list(v) for k, v in d.items()}
        return cls(
            mode=obj["mode"],
            target_domains=tuple(obj["target_domains"]),
            source_domains=tuple(obj["source_domains"]),
            train=dec(obj["train"]),
            val=dec(obj["val"]),
            test=dec(obj["test"]),
            groups={int(k): v for k, v in obj["groups"].items()},
            seed=obj.get("seed", 0),
            val_fraction=obj.get("val_fraction", 0.2),
            test_fraction=obj.get("test_fraction", 0.3),
            source_groups=dec(obj.get("source_groups", {})),
        )


def _by_class(ds, ids):
    out: Dict[int, List[int]] = {}
    for i in sorted(ids):
        out.setdefault(ds.label_of(i), []).append(i)
    return out


def resolve_domains(ds, domains) -> List[int]:
    """Map domain names or integer ids to ids."""
    out = []
    for d in domains:
        if isinstance(d, str) and not d.isdigit():
            if d not in ds.domain_names:
                raise ConfigError(f"unknown domain {d!r}; valid: {ds.domain_names}")
            out.append(ds.domain_names.index(d))
        else:
            d = int(d)
            if not 0 <= d < ds.num_domains:
                raise ConfigError(f"domain id {d} out of range [0, {ds.num_domains})")
            out.append(d)
    return out


def build_split_plan(ds: MultiDomainDataset, mode: str, targets, val_fraction=0.2, seed=0,
                     test_fraction=0.3) -> SplitPlan:
    """Held-out test pool, then three class-stratified groups over the remaining ids.

    Multi-source: the i-th source domain (sorted) trains on group i, so no sibling
    is seen in two source domains. Single-source: the lone source uses all groups.
    """
    if mode not in ("multi-source", "single-source"):
        raise ConfigError(f"mode must be multi-source or single-source, got {mode!r}")
    if not 0 <= val_fraction < 1 or not 0 < test_fraction < 1:
        raise ConfigError("val_fraction must be in [0, 1) and test_fraction in (0, 1)")
    if isinstance(targets, (int, str)):
        targets = [targets]
    target_domains = tuple(sorted(set(resolve_domains(ds, targets))))
    sources = tuple(d for d in range(ds.num_domains) if d not in target_domains)
    if not target_domains or not sources:
        raise ConfigError("need at least one target and one source domain")
    if mode == "multi-source" and len(sources) > NUM_GROUPS:
        raise ConfigError(f"multi-source mode supports at most {NUM_GROUPS} source domains, got {len(sources)}")
    if mode == "single-source" and len(sources) != 1:
        raise ConfigError(f"single-source mode needs exactly one source domain, got {len(sources)}")

    rng = np.random.default_rng(seed)
    test_pool, groups = [], {}
    for k, ids in sorted(_by_class(ds, ds.ids).items()):
        ids = list(rng.permutation(ids))
        n_test = int(round(test_fraction * len(ids)))
        test_pool += ids[:n_test]
        for pos, i in enumerate(ids[n_test:]):
            groups[int(i)] = pos % NUM_GROUPS
    test_pool = sorted(int(i) for i in test_pool)

    train, val, source_groups = {}, {}, {}
    for idx, d in enumerate(sources):
        gsel = list(range(NUM_GROUPS)) if mode == "single-source" else [idx]
        source_groups[d] = gsel
        pool = [i for i, g in groups.items() if g in gsel]
        drng = np.random.default_rng([seed, d])
        tr, va = [], []
        for k, ids in sorted(_by_class(ds, pool).items()):
            ids = list(drng.permutation(ids))
            n_val = int(round(val_fraction * len(ids)))
            va += ids[:n_val]
            tr += ids[n_val:]
        train[d] = sorted(int(i) for i in tr)
        val[d] = sorted(int(i) for i in va)
        if not train[d]:
            raise ConfigError(f"empty training split for source domain {d}")
    test = {d: list(test_pool) for d in target_domains}
    if not test_pool:
        raise ConfigError("empty test split")
    return SplitPlan(mode, target_domains, sources, train, val, test, groups, seed, val_fraction,
                     test_fraction, source_groups)


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------


def tokenize(sentence: str) -> List[str]:
    return sentence.lower().split()


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        self.itos = list(RESERVED) + list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    @property
    def size(self):
        return len(self.itos)

    def to_json(self):
        return {"tokens": self.itos[len(RESERVED):]}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["tokens"])

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos


def build_vocabulary(texts: Sequence[str], min_freq: int = 1) -> Vocabulary:
    """Ids 4.. assigned by descending frequency, ties broken lexicographically."""
    if not texts:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for s in texts for tok in tokenize(s))
    kept = [t for t, c in counts.items() if c >= min_freq and t not in RESERVED]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


def encode_text(vocab: Vocabulary, sentence: str) -> List[int]:
    toks = tokenize(sentence)
    if not toks:
        raise ValueError("cannot encode an empty sentence")
    return [BOS] + [vocab.stoi.get(t, UNK) for t in toks] + [EOS]


def decode_tokens(vocab: Vocabulary, tokens) -> str:
    words = []
    for t in (int(t) for t in tokens):
        if t == EOS:
            break
        if t < len(RESERVED):
            continue
        words.append(vocab.itos[t])
    return " ".join(words)


def pad_sequences(seqs: Sequence[Sequence[int]], pad=PAD) -> torch.Tensor:
    T = max(len(s) for s in seqs)
    out = torch.full((len(seqs), T), pad, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    ids: torch.Tensor
    domains: torch.Tensor
    labels: torch.Tensor
    images: torch.Tensor
    tokens: torch.Tensor
    sentences: List[str]
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.ids)


def batch_from_keys(ds, keys, vocab=None, text_mode="per-image", rng=None) -> Batch:
    """Assemble a batch for explicit ``(id, domain)`` keys."""
    rows = [ds.row(i, d) for i, d in keys]
    labels = [ds.label_of(i) for i, _ in keys]
    if text_mode == "per-class":
        sentences = [ds.class_sentences[y] for y in labels]
    elif text_mode == "per-image":
        sentences = []
        for i, _ in keys:
            texts = ds.texts_of(i)
            j = int(rng.integers(len(texts))) if rng is not None and len(texts) > 1 else 0
            sentences.append(texts[j])
    else:
        raise ConfigError(f"text_mode must be per-image or per-class, got {text_mode!r}")
    tokens = pad_sequences([encode_text(vocab, s) for s in sentences]) if vocab is not None else torch.empty(0)
    return Batch(
        ids=torch.tensor([i for i, _ in keys], dtype=torch.long),
        domains=torch.tensor([d for _, d in keys], dtype=torch.long),
        labels=torch.tensor(labels, dtype=torch.long),
        images=torch.from_numpy(ds.images[rows]),
        tokens=tokens,
        sentences=sentences,
    )


class BatchStream:
    """Infinite stream of training batches with ``per_domain`` samples from every source domain.

    Each domain cycles through epochs of its train ids (reshuffled per epoch when
    ``shuffle``). A per-domain size larger than the pool wraps around, which is
    recorded as ``meta["wrapped"]``.
    """

    def __init__(self, ds, plan, per_domain, seed=0, shuffle=True, vocab=None, text_mode="per-image"):
        if per_domain < 1:
            raise ConfigError("per-domain batch size must be >= 1")
        self.ds, self.plan, self.per_domain = ds, plan, per_domain
        self.vocab, self.text_mode, self.shuffle = vocab, text_mode, shuffle
        self.domains = list(plan.source_domains)
        for d in self.domains:
            if not plan.train.get(d):
                raise ConfigError(f"empty train list for source domain {d}")
        self._rngs = {d: np.random.default_rng([seed, 1, d]) for d in self.domains}
        self._text_rng = np.random.default_rng([seed, 2])
        self._queues = {d: [] for d in self.domains}
        self.wrapped = any(per_domain > len(plan.train[d]) for d in self.domains)

    def _draw(self, d):
        q = self._queues[d]
        out = []
        while len(out) < self.per_domain:
            if not q:
                ids = self.plan.train[d]
                q.extend(self._rngs[d].permutation(ids).tolist() if self.shuffle else list(ids))
            out.append(q.pop(0))
        return out

    def __iter__(self) -> Iterator[Batch]:
        return self

    def __next__(self) -> Batch:
        keys = [(i, d) for d in self.domains for i in self._draw(d)]
        b = batch_from_keys(self.ds, keys, self.vocab, self.text_mode, self._text_rng)
        b.meta["wrapped"] = self.wrapped
        return b


def make_batches(ds, plan, per_domain_batch_size, seed=0, shuffle=True, vocab=None, text_mode="per-image"):
    return BatchStream(ds, plan, per_domain_batch_size, seed, shuffle, vocab, text_mode)


def iter_eval_batches(ds, keys, batch_size=256, vocab=None, text_mode="per-image"):
    keys = list(keys)
    for s in range(0, len(keys), batch_size):
        yield batch_from_keys(ds, keys[s : s + batch_size], vocab, text_mode)
