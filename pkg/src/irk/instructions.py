"""Task kinds, phrase banks, instruction sampling, pairing, and the
attribute-to-sentence templater."""
from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Sequence

from .errors import ContractError, NumericError

BANK_SHA256 = "fec3fcb88f06b21f8cd73072ae50777681e9722614a71bea6cbf3badefda2aeb"
BANK_SIZE = 20


class TaskKind(str, enum.Enum):
    TRAD = "trad"
    CC = "cc"
    CTCC = "ctcc"
    VI = "vi"
    T2I = "t2i"
    LI = "li"

    @classmethod
    def parse(cls, value) -> "TaskKind":
        try:
            return cls(value.value if isinstance(value, cls) else str(value).lower())
        except ValueError:
            raise ContractError(f"unknown task kind {value!r}") from None


PHRASE_TASKS = (TaskKind.TRAD, TaskKind.CC, TaskKind.VI)


def bank_bytes() -> bytes:
    return resources.files("irk").joinpath("resources/phrase_banks.json").read_bytes()


@lru_cache(maxsize=1)
def load_phrase_banks() -> dict[TaskKind, tuple[str, ...]]:
    """Read the shipped banks, verifying the checksum and the 20-phrase shape."""
    raw = bank_bytes()
    digest = hashlib.sha256(raw).hexdigest()
    if digest != BANK_SHA256:
        raise NumericError(f"phrase bank checksum mismatch: {digest}")
    data = json.loads(raw.decode("utf-8"))
    banks = {TaskKind.parse(k): tuple(v) for k, v in data.items()}
    for kind, phrases in banks.items():
        if len(phrases) != BANK_SIZE or len(set(phrases)) != BANK_SIZE:
            raise ContractError(f"{kind.value} bank must hold {BANK_SIZE} distinct phrases")
    return banks


def canonical_phrase(task) -> str:
    """The fixed evaluation phrase for a phrase task: its first bank entry."""
    return load_phrase_banks()[TaskKind.parse(task)][0]


def eval_phrases(task, sweep: bool = False) -> tuple[str, ...]:
    bank = load_phrase_banks()[TaskKind.parse(task)]
    return bank if sweep else bank[:1]


@dataclass(frozen=True)
class Instruction:
    """Text (a tuple of sentences) or an image reference, tagged with its task.

    Image references are either ``{"identity": i, "clothes": c}`` for a
    wardrobe template or ``{"crop_of": uid}`` for a sample's own clothes.
    """

    kind: TaskKind
    text: tuple | None = None
    image_ref: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind.parse(self.kind))
        if (self.text is None) == (self.image_ref is None):
            raise ContractError("instruction needs exactly one of text or image payload")
        if self.kind == TaskKind.CTCC and self.image_ref is None:
            raise ContractError("clothes-template instructions carry an image")
        if self.kind != TaskKind.CTCC and self.text is None:
            raise ContractError(f"{self.kind.value} instructions carry text")
        if self.image_ref is not None and isinstance(self.image_ref, dict):
            object.__setattr__(self, "image_ref", tuple(sorted(self.image_ref.items())))
        if self.text is not None:
            object.__setattr__(self, "text", tuple(self.text))

    @property
    def ref(self) -> dict:
        return dict(self.image_ref or ())

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value}
        if self.text is not None:
            d["text"] = list(self.text)
        else:
            d["image_ref"] = self.ref
        return d


def sample_instruction(task, record, rng, gallery: Sequence | None = None, role: str = "query",
                       wardrobe_size: int | None = None) -> Instruction:
    """Draw the instruction for ``record`` under ``task``.

    Trad/CC/VI draw a phrase uniformly from the bank.  CTCC queries get a
    template of a uniformly drawn wardrobe item (or the one fixed on the
    record); CTCC gallery items get their own clothes crop.  LI draws the
    description of a same-identity record from ``gallery``.  T2I uses the
    record's own description.
    """
    kind = TaskKind.parse(task)
    if kind in PHRASE_TASKS:
        bank = load_phrase_banks()[kind]
        return Instruction(kind, text=(bank[int(rng.integers(len(bank)))],))
    if kind == TaskKind.CTCC:
        if role == "gallery":
            return Instruction(kind, image_ref={"crop_of": record.uid})
        clothes = getattr(record, "template_clothes", None)
        if clothes is None:
            if not wardrobe_size:
                raise ContractError("CTCC query instruction needs the wardrobe size")
            clothes = int(rng.integers(wardrobe_size))
        return Instruction(kind, image_ref={"identity": record.identity, "clothes": int(clothes)})
    if kind == TaskKind.LI:
        if role == "gallery":
            return Instruction(kind, text=tuple(record.description))
        pool = [g for g in (gallery or ()) if g.identity == record.identity]
        if not pool:
            raise ContractError(f"no same-identity gallery image for identity {record.identity}")
        return Instruction(kind, text=tuple(pool[int(rng.integers(len(pool)))].description))
    return Instruction(kind, text=tuple(record.description))


def build_pair(query, instruction: Instruction, target) -> dict:
    """Bind query, instruction and target into a serialisable training record."""
    kind = instruction.kind
    for name, rec in (("query", query), ("target", target)):
        if rec is not None and TaskKind.parse(rec.task) != kind:
            raise ContractError(f"{name} is tagged {rec.task}, instruction is {kind.value}")
    if target is None:
        raise ContractError("pair needs a target")
    if kind != TaskKind.T2I and query is None:
        raise ContractError(f"{kind.value} pair needs a query image")
    if query is not None and query.identity != target.identity:
        raise ContractError("query and target must share an identity")
    if kind == TaskKind.TRAD and query.clothes != target.clothes:
        raise ContractError("traditional pair: query and target must share a clothes id")
    if kind == TaskKind.CTCC:
        ref = instruction.ref
        wanted = ref.get("clothes")
        if "crop_of" in ref:
            if ref["crop_of"] != target.uid:
                raise ContractError("crop instruction must come from the target itself")
        elif wanted != target.clothes:
            raise ContractError(f"target wears clothes {target.clothes}, template shows {wanted}")
    if kind == TaskKind.LI and tuple(instruction.text) != tuple(target.description):
        raise ContractError("language instruction must describe the target")
    q = None if kind == TaskKind.T2I or query is None else query.uid
    return {"task": kind.value, "query": q, "instruction": instruction.to_dict(), "target": target.uid}


# ---------------------------------------------------------------------------
# attribute vocabulary and templating

ATTRIBUTES: dict[str, tuple[str, ...]] = {
    "coat color": ("black coat", "blue coat", "gray coat", "green coat", "purple coat", "red coat",
                   "white coat", "yellow coat"),
    "trousers color": ("black trousers", "blue trousers", "gray trousers", "green trousers",
                       "purple trousers", "red trousers", "white trousers", "yellow trousers"),
    "coat length": ("agnostic length coat", "long sleeve coat", "short sleeve coat", "bareback coat"),
    "trousers length": ("shorts trousers", "skirt", "trousers"),
    "gender code": ("female", "agnostic gender", "male"),
    "glass style": ("without glasses", "with glasses", "with sunglasses"),
    "hair color": ("black hair", "agnostic color hair", "white hair", "yellow hair"),
    "hair style": ("bald hair", "agnostic style hair", "long hair", "short hair"),
    "bag style": ("backpack", "hand bag", "shoulder bag", "waist pack", "trolley", "agnostic style bag",
                  "without bag"),
    "cap style": ("with hat", "without hat"),
    "shoes color": ("black shoes", "blue shoes", "gray shoes", "green shoes", "purple shoes",
                    "red shoes", "white shoes", "yellow shoes"),
    "shoes style": ("boots", "leather shoes", "sandal", "walking shoes"),
    "age": ("adult", "child", "old"),
    "person angle": ("back", "front", "side"),
    "pose": ("lie", "pose agnostic", "sit", "stand", "stoop"),
    "coat style": ("business suit", "agnostic style coat", "dress", "jacket", "long coat", "shirt",
                   "sweater", "t-shirt"),
    "glove": ("with glove", "agnostic glove", "without glove"),
    "smoking": ("smoking", "agnostic smoking", "without smoking"),
    "umbrella": ("with umbrella", "without umbrella"),
    "uniform": ("chef uniform", "common clothing", "firefighter uniform", "medical uniform",
                "office uniform", "agnostic uniform", "worker uniform"),
}
WORD_CATEGORY = {w: cat for cat, words in ATTRIBUTES.items() for w in words}

_UPPER = ("coat color", "coat length", "coat style")
_LOWER = ("trousers color", "trousers length")
_TEMPLATES = {
    "gender code": "The person is {}.", "glass style": "The person is {}.",
    "hair color": "The person has {}.", "hair style": "The person has {}.",
    "bag style": "The bag is {}.", "cap style": "The person is {}.",
    "shoes color": "The person wears {}.", "shoes style": "The shoes are {}.",
    "age": "The age group is {}.", "person angle": "The view is from the {}.",
    "pose": "The pose is {}.", "glove": "The person is {}.", "smoking": "The person is {}.",
    "umbrella": "The person is {}.", "uniform": "The outfit is {}.",
}


def attribute_to_sentences(attributes: Sequence[str]) -> list[str]:
    """Deterministic sentences covering every attribute word.

    Coat and trousers words share one clothing sentence; every other
    category gets its own sentence, in vocabulary order.
    """
    if not attributes:
        raise ContractError("attribute list is empty")
    chosen: dict[str, str] = {}
    for word in attributes:
        cat = WORD_CATEGORY.get(word)
        if cat is None:
            raise ContractError(f"unknown attribute word {word!r}")
        if chosen.get(cat, word) != word:
            raise ContractError(f"two words for attribute {cat!r}: {chosen[cat]!r}, {word!r}")
        chosen[cat] = word
    upper = [chosen[c] for c in _UPPER if c in chosen]
    lower = [chosen[c] for c in _LOWER if c in chosen]
    out = []
    if upper and lower:
        out.append(f"The person wears a {', '.join(upper)} and {', '.join(lower)}.")
    elif upper:
        out.append(f"The person wears a {', '.join(upper)}.")
    elif lower:
        out.append(f"The person wears {', '.join(lower)}.")
    for cat, tmpl in _TEMPLATES.items():
        if cat in chosen:
            out.append(tmpl.format(chosen[cat]))
    return out
