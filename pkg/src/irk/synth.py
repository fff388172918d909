"""Procedural person-like images with identity, clothes, camera and modality
structure, the JSON-lines manifest, the P x K sampler and augmentations.

Layout of a 64 x 32 render (8 x 8 pixel blocks, rows top to bottom):

* side columns: per-sample random background blocks
* middle columns, top quarter: head (hair + identity texture)
* middle columns, middle half: clothes (coat over trousers)
* middle columns, bottom quarter: legs (identity texture)
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .config import DataConfig
from .errors import ContractError, ShapeError
from .instructions import attribute_to_sentences

COLORS = {
    "black": (-0.8, -0.8, -0.8), "blue": (-0.6, -0.5, 0.8), "gray": (0.0, 0.0, 0.0),
    "green": (-0.6, 0.7, -0.6), "purple": (0.4, -0.7, 0.6), "red": (0.8, -0.6, -0.6),
    "white": (0.8, 0.8, 0.8), "yellow": (0.8, 0.8, -0.6),
}
COLOR_NAMES = tuple(COLORS)
COAT_STYLES = ("business suit", "agnostic style coat", "dress", "jacket", "long coat", "shirt",
               "sweater", "t-shirt")
TROUSER_LENGTHS = ("shorts trousers", "skirt", "trousers")
HAIR = {"black hair": (-0.8, -0.8, -0.8), "agnostic color hair": (0.1, -0.3, -0.6),
        "white hair": (0.8, 0.8, 0.8), "yellow hair": (0.8, 0.7, -0.5)}
GENDERS = ("female", "male")

IMAGE_MAGIC_HEADER = struct.Struct("<4I")  # channels, height, width, itemsize


@dataclass(frozen=True)
class Clothes:
    coat_color: str
    coat_style: str
    trousers_color: str
    trousers_length: str

    def attributes(self) -> list[str]:
        return [f"{self.coat_color} coat", self.coat_style,
                f"{self.trousers_color} trousers", self.trousers_length]


@dataclass
class SyntheticIdentitySpec:
    identity: int
    biometric: np.ndarray  # (2, 3, 4, 4) texture for head and legs, fixed per identity
    skin: tuple
    hair: str
    gender: str
    wardrobe: list
    cameras: tuple

    def attributes(self, clothes_id: int) -> list[str]:
        return self.wardrobe[clothes_id].attributes() + [self.hair, self.gender]


@dataclass
class SampleRecord:
    uid: str
    split: str
    task: str
    identity: int
    camera: int
    clothes: int
    modality: str = "visible"
    seed: int = 0
    attributes: tuple = ()
    description: tuple = ()
    path: str | None = None
    template_clothes: int | None = None
    instruction_uid: str | None = None
    has_image: bool = True

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["attributes"], d["description"] = list(self.attributes), list(self.description)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "SampleRecord":
        d = json.loads(line)
        d["attributes"], d["description"] = tuple(d["attributes"]), tuple(d["description"])
        return cls(**d)


@dataclass
class World:
    config: DataConfig
    identities: list
    camera_gain: np.ndarray   # (cameras,)
    camera_offset: np.ndarray

    @property
    def region(self):
        return clothes_box(self.config.image_height, self.config.image_width)


def clothes_box(h: int, w: int) -> tuple[slice, slice]:
    """Rows and columns of the clothes region."""
    return slice(h // 4, 3 * h // 4), slice(w // 4, 3 * w // 4)


def clothes_mask(h: int, w: int) -> np.ndarray:
    m = np.zeros((h, w), dtype=bool)
    m[clothes_box(h, w)] = True
    return m


def build_world(cfg: DataConfig) -> World:
    """Identity specs for train and test identities plus camera photometrics."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 0])
    n = cfg.train_identities + cfg.test_identities
    idents = []
    for i in range(n):
        coat_colors = rng.choice(len(COLOR_NAMES), cfg.wardrobe_size, replace=cfg.wardrobe_size > len(COLOR_NAMES))
        wardrobe = [Clothes(COLOR_NAMES[c], COAT_STYLES[rng.integers(len(COAT_STYLES))],
                            COLOR_NAMES[rng.integers(len(COLOR_NAMES))],
                            TROUSER_LENGTHS[rng.integers(len(TROUSER_LENGTHS))]) for c in coat_colors]
        idents.append(SyntheticIdentitySpec(
            identity=i, biometric=rng.uniform(-1, 1, (2, cfg.channels, 4, 4)),
            skin=tuple(rng.uniform(-0.2, 0.6, cfg.channels)),
            hair=list(HAIR)[rng.integers(len(HAIR))], gender=GENDERS[rng.integers(2)],
            wardrobe=wardrobe, cameras=tuple(range(cfg.cameras))))
    gain = rng.uniform(0.75, 1.25, cfg.cameras)
    offset = rng.uniform(-0.25, 0.25, cfg.cameras)
    return World(cfg, idents, gain, offset)


def _color(name, channels):
    return np.resize(np.array(COLORS[name]), channels)[:, None, None]


def _style_pattern(style: str, h: int, w: int) -> np.ndarray:
    y, x = np.mgrid[0:h, 0:w]
    s = COAT_STYLES.index(style)
    pats = [np.zeros((h, w)), ((y // 2) % 2) * 2 - 1.0, ((x // 2) % 2) * 2 - 1.0,
            (((y // 4) + (x // 4)) % 2) * 2 - 1.0, ((y // 4) % 2) * 2 - 1.0,
            ((x // 4) % 2) * 2 - 1.0, (((x + y) // 3) % 2) * 2 - 1.0, y / max(h - 1, 1) * 2 - 1]
    return 0.3 * pats[s]


def render_clothes(clothes: Clothes, skin, h: int, w: int, channels: int) -> np.ndarray:
    """Noise-free clothes region (channels, h/2, w/2): coat on top, trousers below."""
    rh, rw = h // 2, w // 2
    out = np.empty((channels, rh, rw))
    half = rh // 2
    out[:, :half] = _color(clothes.coat_color, channels) + _style_pattern(clothes.coat_style, half, rw)
    covered = {"shorts trousers": half // 2, "skirt": 3 * half // 4, "trousers": half}[clothes.trousers_length]
    out[:, half:] = np.asarray(skin)[:, None, None]
    out[:, half:half + covered] = _color(clothes.trousers_color, channels)
    if clothes.trousers_length == "skirt":
        out[:, half:half + covered, :: 4] += 0.2
    return out


def render(world: World, identity: int, clothes_id: int, camera: int, modality: str,
           seed: int) -> np.ndarray:
    """Render one sample as float32 (channels, H, W); deterministic in its arguments."""
    cfg = world.config
    h, w, ch = cfg.image_height, cfg.image_width, cfg.channels
    spec = world.identities[identity]
    rng = np.random.default_rng([cfg.seed, 1, seed])
    img = np.empty((ch, h, w))
    # background: 8 x 8 blocks of random colour on every side column
    bg = rng.uniform(-cfg.background_amp, cfg.background_amp, (ch, h // 8, w // 8))
    img[:] = np.kron(bg, np.ones((8, 8)))
    rows, cols = clothes_box(h, w)
    cw = cols.stop - cols.start
    head, legs = slice(0, h // 4), slice(3 * h // 4, h)
    for k, part in enumerate((head, legs)):
        tex = np.kron(spec.biometric[k], np.ones((h // 16, cw // 4)))
        img[:, part, cols] = 0.5 * tex + 0.5 * np.asarray(spec.skin)[:, None, None]
    img[:, 0:h // 16, cols] = np.resize(np.array(HAIR[spec.hair]), ch)[:, None, None]
    img[:, rows, cols] = render_clothes(spec.wardrobe[clothes_id], spec.skin, h, w, ch)
    img = img * world.camera_gain[camera] + world.camera_offset[camera]
    noise = rng.normal(0.0, cfg.noise_std, img.shape)
    img = img + noise
    if modality == "infrared":
        ir = img.mean(axis=0, keepdims=True) + rng.normal(0.0, cfg.ir_noise_std, (1, h, w))
        img = np.repeat(ir, ch, axis=0)
    elif modality != "visible":
        raise ContractError(f"unknown modality {modality!r}")
    return img.astype(np.float32)


def shrink_to(region: np.ndarray, size: int) -> np.ndarray:
    """Block-average (channels, h, w) down to (channels, size, size)."""
    c, h, w = region.shape
    if h % size or w % size:
        raise ShapeError(f"cannot shrink {h}x{w} to {size}x{size}")
    return region.reshape(c, size, h // size, size, w // size).mean(axis=(2, 4)).astype(np.float32)


def clothes_template(world: World, identity: int, clothes_id: int, size: int) -> np.ndarray:
    """Clean clothes-template image for a wardrobe item."""
    cfg = world.config
    spec = world.identities[identity]
    region = render_clothes(spec.wardrobe[clothes_id], spec.skin, cfg.image_height, cfg.image_width,
                            cfg.channels)
    return shrink_to(region, size)


def clothes_crop(image: np.ndarray, size: int) -> np.ndarray:
    """The clothes region cut from a rendered image, resized to a template."""
    _, h, w = image.shape
    return shrink_to(np.asarray(image)[(slice(None),) + clothes_box(h, w)], size)


# ---------------------------------------------------------------------------
# manifest

def _record(world, split, task, ident, camera, clothes, modality, seed, **extra):
    spec = world.identities[ident]
    attrs = tuple(spec.attributes(clothes))
    uid = f"{split}-{task}-{ident:03d}-{seed:06d}"
    return SampleRecord(uid=uid, split=split, task=task, identity=ident, camera=camera,
                        clothes=clothes, modality=modality, seed=seed, attributes=attrs,
                        description=tuple(attribute_to_sentences(list(attrs))), **extra)


def _train_records(world, task, counter):
    cfg = world.config
    out = []
    for ident in range(cfg.train_identities):
        for j in range(cfg.samples_per_identity):
            modality = "infrared" if task == "vi" and j % 2 == 1 else "visible"
            # traditional and cross-modality data keep one outfit per identity
            clothes = 0 if task in ("trad", "vi") else j % cfg.wardrobe_size
            out.append(_record(world, "train", task, ident, j % cfg.cameras, clothes, modality,
                               next(counter)))
    return out


def _test_records(world, task, counter):
    cfg = world.config
    w = cfg.wardrobe_size
    cams = cfg.cameras
    out = []
    for ident in range(cfg.train_identities, cfg.train_identities + cfg.test_identities):
        q, g = [], []
        if task == "trad":
            q = [(0, 0, "visible", {}), (1 % cams, 0, "visible", {})]
            g = [(c % cams, 0, "visible") for c in (0, 1, 0, 1)]
        elif task == "cc":
            q = [(0, 0, "visible", {}), (1 % cams, 0, "visible", {})]
            g = [(c % cams, k % w) for c, k in ((0, 1), (1, 2), (1, 1), (0, 2))]
            g = [(c, k, "visible") for c, k in g]
        elif task in ("ctcc", "li"):
            q = [(0, 0, "visible", {"template_clothes": 1 % w}), (1 % cams, 1 % w, "visible",
                                                                  {"template_clothes": 2 % w})]
            g = [(c % cams, k % w, "visible") for c, k in ((1, 0), (0, 1), (1, 2), (1, 1))]
        elif task == "vi":
            q = [(0, 0, "visible", {}), (1 % cams, 0, "infrared", {})]
            g = [(0, 0, "visible"), (1 % cams, 0, "visible"), (0, 0, "infrared"), (1 % cams, 0, "infrared")]
        elif task == "t2i":
            q = [(0, 0, "visible", {"has_image": False}), (1 % cams, 1 % w, "visible", {"has_image": False})]
            g = [(c % cams, k % w, "visible") for c, k in ((0, 0), (1, 1), (1, 0), (0, 1))]
        gallery = [_record(world, "gallery", task, ident, c, k, m, next(counter)) for c, k, m in g]
        for c, k, m, extra in q:
            if task == "li":
                target = next(r for r in gallery if r.clothes == extra["template_clothes"])
                extra = dict(extra, instruction_uid=target.uid)
            out.append(_record(world, "query", task, ident, c, k, m, next(counter), **extra))
        out.extend(gallery)
    return out


@dataclass
class Manifest:
    records: list = field(default_factory=list)

    def __eq__(self, other):
        return isinstance(other, Manifest) and self.records == other.records

    def __len__(self):
        return len(self.records)

    def select(self, split: str | None = None, task: str | None = None) -> list:
        return [r for r in self.records
                if (split is None or r.split == split) and (task is None or r.task == task)]

    def by_uid(self) -> dict:
        return {r.uid: r for r in self.records}

    def serialize(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)

    @classmethod
    def parse(cls, text: str) -> "Manifest":
        return cls([SampleRecord.from_json(line) for line in text.splitlines() if line.strip()])


def build_manifest(world: World) -> Manifest:
    cfg = world.config
    counter = iter(range(10**6))
    records = []
    for task in cfg.tasks:
        records += _train_records(world, task, counter)
    for task in cfg.tasks:
        records += _test_records(world, task, counter)
    return Manifest(records)


def write_image(path, image: np.ndarray) -> None:
    arr = np.ascontiguousarray(image, dtype="<f4")
    c, h, w = arr.shape
    Path(path).write_bytes(IMAGE_MAGIC_HEADER.pack(c, h, w, arr.itemsize) + arr.tobytes())


def read_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    c, h, w, size = IMAGE_MAGIC_HEADER.unpack_from(raw)
    dtype = {4: "<f4", 8: "<f8"}.get(size)
    if dtype is None:
        raise ContractError(f"{path}: unsupported item size {size}")
    body = raw[IMAGE_MAGIC_HEADER.size:]
    if len(body) != c * h * w * size:
        raise ContractError(f"{path}: payload length does not match header")
    return np.frombuffer(body, dtype=dtype).reshape(c, h, w).astype(np.float32)


class Dataset:
    """A manifest plus the world needed to render or load its images."""

    def __init__(self, manifest: Manifest, world: World, root: Path | None = None):
        self.manifest = manifest
        self.world = world
        self.root = Path(root) if root is not None else None
        self._cache: dict[str, np.ndarray] = {}
        self._uids = manifest.by_uid()

    @property
    def config(self) -> DataConfig:
        return self.world.config

    def record(self, uid: str) -> SampleRecord:
        return self._uids[uid]

    def image(self, rec: SampleRecord) -> np.ndarray:
        img = self._cache.get(rec.uid)
        if img is None:
            if rec.path is not None and self.root is not None:
                img = read_image(self.root / rec.path)
            else:
                img = render(self.world, rec.identity, rec.clothes, rec.camera, rec.modality, rec.seed)
            self._cache[rec.uid] = img
        return img

    def images(self, recs: Sequence[SampleRecord]) -> np.ndarray:
        return np.stack([self.image(r) for r in recs])

    def template(self, identity: int, clothes_id: int, size: int) -> np.ndarray:
        return clothes_template(self.world, identity, clothes_id, size)


def generate_dataset(cfg: DataConfig, out_dir=None) -> Dataset:
    """Build the world and manifest; with ``out_dir`` also write everything to disk."""
    world = build_world(cfg)
    manifest = build_manifest(world)
    ds = Dataset(manifest, world, out_dir)
    if out_dir is None:
        return ds
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    if not cfg.inline:
        for rec in manifest.records:
            img = ds.image(rec)
            rec.path = f"images/{rec.uid}.bin"
            write_image(root / rec.path, img)
    (root / "manifest.jsonl").write_text(manifest.serialize(), encoding="utf-8")
    (root / "synth_config.json").write_text(json.dumps(dataclasses.asdict(cfg), sort_keys=True, indent=1))
    return ds


def load_dataset(root) -> Dataset:
    root = Path(root)
    cfg_path, man_path = root / "synth_config.json", root / "manifest.jsonl"
    if not man_path.exists() or not cfg_path.exists():
        raise ContractError(f"{root}: no manifest.jsonl / synth_config.json")
    cfg = DataConfig.from_dict(json.loads(cfg_path.read_text()))
    manifest = Manifest.parse(man_path.read_text(encoding="utf-8"))
    return Dataset(manifest, build_world(cfg), root)


def dataset_checksum(root) -> str:
    """SHA-256 over the manifest and every image file, in manifest order."""
    root = Path(root)
    h = hashlib.sha256((root / "manifest.jsonl").read_bytes())
    for rec in Manifest.parse((root / "manifest.jsonl").read_text()).records:
        if rec.path:
            h.update((root / rec.path).read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# sampling and augmentation

def pk_batch_sampler(records: Sequence[SampleRecord], P: int, K: int, rng) -> Iterator[list[int]]:
    """Endless P x K batches of indices into ``records``.

    Identities are visited in shuffled epochs; inside a batch each identity
    contributes K distinct samples when it has that many.
    """
    by_id: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        by_id.setdefault(r.identity, []).append(i)
    eligible = sorted(k for k, v in by_id.items() if len(v) >= K)
    if len(eligible) < P:
        raise ContractError(f"sampler needs {P} identities with >= {K} samples, found {len(eligible)}")
    while True:
        order = list(rng.permutation(eligible))
        while len(order) >= P:
            chosen, order = order[:P], order[P:]
            batch = []
            for ident in chosen:
                idx = by_id[ident]
                batch += [idx[j] for j in rng.choice(len(idx), K, replace=False)]
            yield batch


def augment(image: np.ndarray, rng, policy=("crop", "flip", "erase"), flip_p: float = 0.5,
            erase_p: float = 0.5) -> np.ndarray:
    """Random crop (4 px zero padding), horizontal flip and rectangle erasing."""
    img = np.asarray(image)
    c, h, w = img.shape
    policy = set(policy)
    unknown = policy - {"crop", "flip", "erase"}
    if unknown:
        raise ContractError(f"unknown augmentations {sorted(unknown)}")
    if "crop" in policy:
        padded = np.pad(img, ((0, 0), (4, 4), (4, 4)))
        y, x = rng.integers(0, 9, 2)
        img = padded[:, y:y + h, x:x + w]
    if "flip" in policy and rng.random() < flip_p:
        img = img[:, :, ::-1]
    if "erase" in policy and rng.random() < erase_p:
        img = np.array(img)
        fill = img.mean(axis=(1, 2))
        for _ in range(100):
            area = rng.uniform(0.02, 0.2) * h * w
            aspect = np.exp(rng.uniform(np.log(0.3), np.log(3.3)))
            eh, ew = int(round(np.sqrt(area * aspect))), int(round(np.sqrt(area / aspect)))
            if 0 < eh < h and 0 < ew < w and 0.02 * h * w <= eh * ew <= 0.2 * h * w:
                y, x = rng.integers(0, h - eh + 1), rng.integers(0, w - ew + 1)
                img[:, y:y + eh, x:x + ew] = fill[:, None, None]
                break
    return np.ascontiguousarray(img, dtype=np.float32)
