"""Question/mask dataset pipeline: complexity classification, stratified
sampling, prompt construction, response parsing, manifest assembly, splits,
and corpus statistics. Text backends sit behind a provider interface with a
deterministic mock."""

from __future__ import annotations

import hashlib
import json
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from importlib import resources
from typing import Optional, Protocol, Sequence

from .errors import (
    CorpusTooSmall,
    EmptyInput,
    EmptyObjects,
    InvalidConfig,
    InvalidTemplate,
    MalformedResponse,
    NoQuestionsFound,
    NoValidPairs,
    ParseError,
    ProviderUnavailable,
)
from .masks import BinaryMask, union_masks

SUMMARY_PLACEHOLDER = "<summary>"
OBJECTS_PLACEHOLDER = "<important_objects>"
OBJECTS_MARKER = "Important objects:"

# Exact query string used to obtain the per-image summaries.
DESCRIBER_PROMPT = "Please describe the content in this image within 10 sentences."

DEFAULT_SPLIT_RATIOS = (11 / 14, 1 / 14, 2 / 14)
SPLIT_NAMES = ("train", "val", "test")

_QUESTION_LINE = re.compile(r"^\s*(\d+)\s*[.)]\s*(.*?)\s*\|\|\s*(.*?)\s*$")


# ---------------------------------------------------------------- records

@dataclass(frozen=True)
class SourceRecord:
    """One source image with its per-category instance masks."""

    image_id: str
    source: str  # "photographic" | "egocentric"
    width: int
    height: int
    categories: tuple[tuple[str, tuple[BinaryMask, ...]], ...]

    def __post_init__(self):
        if self.source not in ("photographic", "egocentric"):
            raise InvalidConfig(f"unknown source {self.source!r}")
        cats = tuple((name, tuple(instances)) for name, instances in self.categories)
        object.__setattr__(self, "categories", cats)
        for name, instances in cats:
            for m in instances:
                if (m.height, m.width) != (self.height, self.width):
                    raise InvalidConfig(
                        f"{self.image_id}: instance of {name!r} is "
                        f"{m.height}x{m.width}, image is {self.height}x{self.width}"
                    )

    @property
    def category_names(self) -> list[str]:
        return [name for name, _ in self.categories]


@dataclass(frozen=True)
class QAPair:
    question: str
    answer_mask: BinaryMask
    target_categories: tuple[str, ...]

    def __post_init__(self):
        if not self.question:
            raise InvalidConfig("question must be nonempty")
        object.__setattr__(self, "target_categories", tuple(self.target_categories))


@dataclass(frozen=True)
class ManifestRecord:
    image_id: str
    source: str
    width: int
    height: int
    split: Optional[str]
    qa_pairs: tuple[QAPair, ...]

    def __post_init__(self):
        object.__setattr__(self, "qa_pairs", tuple(self.qa_pairs))


@dataclass(frozen=True)
class PromptBundle:
    describer_prompt: str
    question_template: str

    def __post_init__(self):
        _validate_template(self.question_template)


def _validate_template(template: str) -> None:
    for ph in (SUMMARY_PLACEHOLDER, OBJECTS_PLACEHOLDER):
        n = template.count(ph)
        if n != 1:
            raise InvalidTemplate(f"template must contain {ph} exactly once, found {n}")


def load_prompt_bundle(template_path=None) -> PromptBundle:
    if template_path is None:
        template = (
            resources.files("maskselect") / "data" / "question_template.txt"
        ).read_text(encoding="utf-8")
    else:
        with open(template_path, "r", encoding="utf-8") as fh:
            template = fh.read()
    return PromptBundle(describer_prompt=DESCRIBER_PROMPT, question_template=template)


# ---------------------------------------------------------------- selection

def classify_complexity(record: SourceRecord) -> str:
    """'simple' for 2..5 categories, 'complex' for 6 or more, else 'reject'."""
    n = len(record.categories)
    if n < 2:
        return "reject"
    if n < 6:
        return "simple"
    return "complex"


def _fisher_yates_prefix(items: list, k: int, rng: random.Random) -> list:
    arr = list(items)
    for i in range(k):
        j = rng.randrange(i, len(arr))
        arr[i], arr[j] = arr[j], arr[i]
    return arr[:k]


def stratified_sample(corpus: Sequence[SourceRecord], counts: dict, seed: int) -> dict:
    """Sample image ids without replacement from the three strata.

    Strata: 'simple' and 'complex' partition the photographic records by
    category count; 'egocentric' covers egocentric records with more than
    two categories. Returns {stratum: [image_id, ...]}.
    """
    strata: dict[str, list[str]] = {"simple": [], "complex": [], "egocentric": []}
    for rec in corpus:
        if rec.source == "egocentric":
            if len(rec.categories) > 2:
                strata["egocentric"].append(rec.image_id)
        else:
            kind = classify_complexity(rec)
            if kind in ("simple", "complex"):
                strata[kind].append(rec.image_id)
    deficits = {
        name: counts.get(name, 0) - len(strata[name])
        for name in strata
        if counts.get(name, 0) > len(strata[name])
    }
    if deficits:
        detail = ", ".join(f"{k}: short by {v}" for k, v in sorted(deficits.items()))
        raise CorpusTooSmall(detail)
    rng = random.Random(seed)
    selected = {}
    for name in ("simple", "complex", "egocentric"):
        pool = sorted(strata[name])
        selected[name] = _fisher_yates_prefix(pool, counts.get(name, 0), rng)
    return selected


# ---------------------------------------------------------------- prompts

def build_describer_prompt() -> str:
    return DESCRIBER_PROMPT


def build_question_prompt(summary: str, objects: Sequence[str], bundle: PromptBundle) -> str:
    """Single-pass substitution of the two placeholders; replacement text is
    inserted verbatim and never re-expanded."""
    template = bundle.question_template
    _validate_template(template)
    objects = list(objects)
    if not objects:
        raise EmptyObjects("at least one object name is required")
    splices = sorted(
        [
            (template.index(SUMMARY_PLACEHOLDER), SUMMARY_PLACEHOLDER, summary),
            (template.index(OBJECTS_PLACEHOLDER), OBJECTS_PLACEHOLDER, ", ".join(objects)),
        ]
    )
    parts = []
    pos = 0
    for idx, placeholder, replacement in splices:
        parts.append(template[pos:idx])
        parts.append(replacement)
        pos = idx + len(placeholder)
    parts.append(template[pos:])
    return "".join(parts)


@dataclass(frozen=True)
class ParsedQuestion:
    question: str
    categories: tuple[str, ...]
    unknown_categories: tuple[str, ...]


@dataclass(frozen=True)
class ParseResult:
    pairs: tuple[ParsedQuestion, ...]
    diagnostics: tuple[str, ...]


def parse_question_response(response: str, known_categories: Sequence[str]) -> ParseResult:
    """Parse 'N. <question> || <cat1; cat2>' lines from a provider response.

    Malformed lines and unknown category names are reported as diagnostics;
    NoQuestionsFound is raised only when nothing parses at all.
    """
    if not response:
        raise NoQuestionsFound("empty response")
    known = set(known_categories)
    pairs: list[ParsedQuestion] = []
    diagnostics: list[str] = []
    for lineno, line in enumerate(response.splitlines(), start=1):
        if not line.strip():
            continue
        match = _QUESTION_LINE.match(line)
        if match is None:
            diagnostics.append(f"line {lineno}: does not match question grammar")
            continue
        question = match.group(2).strip()
        cats = tuple(c.strip() for c in match.group(3).split(";") if c.strip())
        if not question or not cats:
            diagnostics.append(f"line {lineno}: empty question or category list")
            continue
        unknown = tuple(c for c in cats if c not in known)
        for cat in unknown:
            diagnostics.append(f"line {lineno}: unknown category {cat!r}")
        pairs.append(ParsedQuestion(question=question, categories=cats,
                                    unknown_categories=unknown))
    if not pairs:
        raise NoQuestionsFound("no parseable question lines in response")
    return ParseResult(pairs=tuple(pairs), diagnostics=tuple(diagnostics))


# ---------------------------------------------------------------- assembly

def assemble_record(source: SourceRecord, parsed: Sequence[ParsedQuestion]):
    """Build a manifest record: each answer mask is the union of every instance
    of the question's resolvable target categories. Returns
    (record, diagnostics); pairs with no resolvable category are dropped."""
    by_name = dict(source.categories)
    qa_pairs: list[QAPair] = []
    diagnostics: list[str] = []
    for p in parsed:
        resolved = [c for c in p.categories if c in by_name]
        if not resolved:
            diagnostics.append(
                f"{source.image_id}: dropped {p.question!r} (no known categories)"
            )
            continue
        instances = [m for c in resolved for m in by_name[c]]
        if not instances:
            diagnostics.append(
                f"{source.image_id}: dropped {p.question!r} (no instances)"
            )
            continue
        mask = union_masks(instances)
        if mask.area == 0:
            diagnostics.append(
                f"{source.image_id}: dropped {p.question!r} (empty answer mask)"
            )
            continue
        qa_pairs.append(QAPair(question=p.question, answer_mask=mask,
                               target_categories=tuple(resolved)))
    if not qa_pairs:
        raise NoValidPairs(f"{source.image_id}: no usable question/mask pairs")
    record = ManifestRecord(
        image_id=source.image_id,
        source=source.source,
        width=source.width,
        height=source.height,
        split=None,
        qa_pairs=tuple(qa_pairs),
    )
    return record, diagnostics


def assign_splits(records: Sequence[ManifestRecord],
                  ratios: Sequence[float] = DEFAULT_SPLIT_RATIOS,
                  seed: int = 0) -> list[ManifestRecord]:
    """Deterministic seeded shuffle then contiguous train/val/test partition;
    rounding residue goes to train."""
    if len(records) == 0:
        raise EmptyInput("no records to split")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidConfig(f"split ratios must be 3 nonnegative values summing to 1: {ratios}")
    ordered = sorted(records, key=lambda r: r.image_id)
    rng = random.Random(seed)
    rng.shuffle(ordered)
    n = len(ordered)
    n_val = int(n * ratios[1] + 1e-9)
    n_test = int(n * ratios[2] + 1e-9)
    n_train = n - n_val - n_test
    out = []
    for i, rec in enumerate(ordered):
        if i < n_train:
            split = "train"
        elif i < n_train + n_val:
            split = "val"
        else:
            split = "test"
        out.append(replace(rec, split=split))
    return out


def dataset_stats(records: Sequence[ManifestRecord]) -> dict:
    """Corpus statistics; question length is whitespace-token count."""
    if len(records) == 0:
        raise EmptyInput("no records")
    pairs = [qa for rec in records for qa in rec.qa_pairs]
    words = [len(qa.question.split()) for qa in pairs]
    categories = {c for qa in pairs for c in qa.target_categories}
    splits = {name: 0 for name in SPLIT_NAMES}
    for rec in records:
        if rec.split in splits:
            splits[rec.split] += 1
    return {
        "images": len(records),
        "pairs": len(pairs),
        "avg_pairs_per_image": len(pairs) / len(records),
        "avg_question_words": sum(words) / len(words) if words else 0.0,
        "distinct_categories": len(categories),
        "splits": splits,
    }


# ---------------------------------------------------------------- providers

class Provider(Protocol):
    """Seam for the external describe/question backends."""

    def describe_image(self, image_ref: str) -> str: ...

    def generate_questions(self, prompt: str) -> str: ...


_MOCK_SCENES = (
    "a cluttered room seen in daylight",
    "a tidy workspace near a window",
    "an outdoor scene with scattered items",
    "a busy countertop viewed from above",
)

_MOCK_QUESTION_FORMS = (
    "Which item here would someone reach for when they need the {}?",
    "What in this scene serves the purpose of the {}?",
    "If you had to point out the {}, which object would it be?",
    "Which object shown would best work as the {}?",
)

_MOCK_PAIR_FORM = "Which two things in the image involve the {} and the {}?"


def _stable_rng(seed: int, text: str) -> random.Random:
    digest = hashlib.sha256(f"{seed}:{text}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


class MockProvider:
    """Deterministic stand-in that emits parseable numbered-list responses
    over the categories named in the prompt's 'Important objects:' line."""

    def __init__(self, seed: int, questions_per_image: int = 4):
        self.seed = seed
        self.questions_per_image = questions_per_image

    def describe_image(self, image_ref: str) -> str:
        rng = _stable_rng(self.seed, f"describe:{image_ref}")
        scene = rng.choice(_MOCK_SCENES)
        return (
            f"The image shows {scene}. Several distinct objects are visible "
            f"and clearly separated. Lighting is even across the frame."
        )

    def generate_questions(self, prompt: str) -> str:
        objects = self._objects_from_prompt(prompt)
        rng = _stable_rng(self.seed, f"questions:{prompt}")
        lines = []
        for i in range(1, self.questions_per_image + 1):
            if len(objects) >= 2 and rng.random() < 0.3:
                a, b = rng.sample(objects, 2)
                lines.append(f"{i}. {_MOCK_PAIR_FORM.format(a, b)} || {a}; {b}")
            else:
                cat = rng.choice(objects)
                form = rng.choice(_MOCK_QUESTION_FORMS)
                lines.append(f"{i}. {form.format(cat)} || {cat}")
        return "\n".join(lines)

    @staticmethod
    def _objects_from_prompt(prompt: str) -> list[str]:
        marker_lines = [
            line for line in prompt.splitlines() if line.startswith(OBJECTS_MARKER)
        ]
        if not marker_lines:
            raise MalformedResponse(
                f"prompt has no {OBJECTS_MARKER!r} line for the mock to read"
            )
        raw = marker_lines[-1][len(OBJECTS_MARKER):]
        objects = [c.strip() for c in raw.split(",") if c.strip()]
        if not objects:
            raise MalformedResponse("prompt lists no important objects")
        return objects


def make_provider(spec: str, questions_per_image: int = 4) -> Provider:
    """'mock:<seed>' builds the deterministic mock; real backends must be
    configured out of band and are refused here."""
    if spec == "mock" or spec.startswith("mock:"):
        seed = int(spec.split(":", 1)[1]) if ":" in spec else 0
        return MockProvider(seed, questions_per_image=questions_per_image)
    raise ProviderUnavailable(
        f"provider {spec!r} is not configured in this environment; "
        f"use 'mock:<seed>' or supply a backend adapter"
    )


# ---------------------------------------------------------------- file I/O

def source_record_to_json(rec: SourceRecord) -> dict:
    return {
        "image_id": rec.image_id,
        "source": rec.source,
        "w": rec.width,
        "h": rec.height,
        "categories": [
            {"name": name, "instances": [m.to_json() for m in instances]}
            for name, instances in rec.categories
        ],
    }


def source_record_from_json(obj: dict) -> SourceRecord:
    try:
        return SourceRecord(
            image_id=obj["image_id"],
            source=obj["source"],
            width=int(obj["w"]),
            height=int(obj["h"]),
            categories=tuple(
                (
                    c["name"],
                    tuple(BinaryMask.from_json(m) for m in c["instances"]),
                )
                for c in obj["categories"]
            ),
        )
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed source record: {exc}") from exc


def manifest_record_to_json(rec: ManifestRecord) -> dict:
    return {
        "image_id": rec.image_id,
        "source": rec.source,
        "w": rec.width,
        "h": rec.height,
        "split": rec.split,
        "qa": [
            {
                "q": qa.question,
                "mask": qa.answer_mask.to_json(),
                "cats": list(qa.target_categories),
            }
            for qa in rec.qa_pairs
        ],
    }


def manifest_record_from_json(obj: dict) -> ManifestRecord:
    try:
        return ManifestRecord(
            image_id=obj["image_id"],
            source=obj["source"],
            width=int(obj["w"]),
            height=int(obj["h"]),
            split=obj.get("split"),
            qa_pairs=tuple(
                QAPair(
                    question=e["q"],
                    answer_mask=BinaryMask.from_json(e["mask"]),
                    target_categories=tuple(e["cats"]),
                )
                for e in obj["qa"]
            ),
        )
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed manifest record: {exc}") from exc


def _write_jsonl(path, objs) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for obj in objs:
            fh.write(json.dumps(obj))
            fh.write("\n")


def _read_jsonl(path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from exc


def write_source_corpus(records: Sequence[SourceRecord], path) -> None:
    _write_jsonl(path, (source_record_to_json(r) for r in records))


def read_source_corpus(path) -> list[SourceRecord]:
    return [source_record_from_json(o) for o in _read_jsonl(path)]


def write_manifest(records: Sequence[ManifestRecord], path) -> None:
    _write_jsonl(path, (manifest_record_to_json(r) for r in records))


def read_manifest(path) -> list[ManifestRecord]:
    return [manifest_record_from_json(o) for o in _read_jsonl(path)]


# ---------------------------------------------------------------- pipeline

@dataclass
class PipelineConfig:
    corpus: str
    outdir: str
    counts: dict
    seed: int = 0
    ratios: tuple[float, float, float] = DEFAULT_SPLIT_RATIOS
    provider: str = "mock:0"
    questions_per_image: int = 4
    template: Optional[str] = None
    concurrency: int = 1
    retries: int = 1

    @classmethod
    def from_json(cls, obj: dict) -> "PipelineConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise InvalidConfig(f"unknown dataset config keys: {sorted(unknown)}")
        if "corpus" not in obj or "outdir" not in obj or "counts" not in obj:
            raise InvalidConfig("dataset config needs corpus, outdir, and counts")
        cfg = cls(**obj)
        cfg.ratios = tuple(cfg.ratios)
        return cfg


def _call_with_retry(fn, arg, retries: int):
    last = None
    for _ in range(max(1, retries)):
        try:
            return fn(arg)
        except MalformedResponse as exc:  # deterministic mock never hits this
            last = exc
    raise last


def _map_records(fn, items, concurrency: int):
    if concurrency <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        return list(pool.map(fn, items))


def run_sample_stage(cfg: PipelineConfig) -> dict:
    corpus = read_source_corpus(cfg.corpus)
    return stratified_sample(corpus, cfg.counts, cfg.seed)


def run_prompts_stage(cfg: PipelineConfig, selection: dict) -> list[dict]:
    corpus = {r.image_id: r for r in read_source_corpus(cfg.corpus)}
    bundle = load_prompt_bundle(cfg.template)
    provider = make_provider(cfg.provider, cfg.questions_per_image)
    selected_ids = sorted(i for ids in selection.values() for i in ids)

    def build(image_id: str) -> dict:
        rec = corpus[image_id]
        summary = _call_with_retry(provider.describe_image, image_id, cfg.retries)
        prompt = build_question_prompt(summary, rec.category_names, bundle)
        return {"image_id": image_id, "summary": summary, "prompt": prompt}

    return _map_records(build, selected_ids, cfg.concurrency)


def run_assemble_stage(cfg: PipelineConfig, prompts: Sequence[dict]):
    """Generate, parse, and assemble every prompted record, then assign
    splits. Returns (records, diagnostics)."""
    corpus = {r.image_id: r for r in read_source_corpus(cfg.corpus)}
    provider = make_provider(cfg.provider, cfg.questions_per_image)
    diagnostics: list[str] = []

    def assemble(entry: dict):
        rec = corpus[entry["image_id"]]
        response = _call_with_retry(provider.generate_questions, entry["prompt"],
                                    cfg.retries)
        try:
            parsed = parse_question_response(response, rec.category_names)
        except NoQuestionsFound as exc:
            return None, [f"{rec.image_id}: {exc}"]
        try:
            record, diags = assemble_record(rec, parsed.pairs)
        except NoValidPairs as exc:
            return None, list(parsed.diagnostics) + [str(exc)]
        return record, list(parsed.diagnostics) + diags

    results = _map_records(assemble, sorted(prompts, key=lambda e: e["image_id"]),
                           cfg.concurrency)
    records = []
    for record, diags in results:
        diagnostics.extend(diags)
        if record is not None:
            records.append(record)
    if not records:
        raise NoValidPairs("assembly produced no manifest records")
    records.sort(key=lambda r: r.image_id)
    return assign_splits(records, cfg.ratios, cfg.seed), diagnostics


# ---------------------------------------------------------------- fixtures

_CORPUS_VOCABULARY = (
    "lamp", "mug", "laptop", "plant", "chair", "bottle", "book", "monitor",
    "keyboard", "phone", "bowl", "kettle", "backpack", "shoe", "clock",
    "pillow", "towel", "scissors", "stapler", "notebook", "camera", "helmet",
    "wrench", "tablet", "speaker", "candle", "vase", "basket", "fan", "mirror",
)


def synthetic_corpus(n: int, seed: int, height: int = 64, width: int = 64) -> list[SourceRecord]:
    """Desk-scale stand-in for a real source corpus: rectangle instance masks
    under everyday category names, mixing photographic and egocentric records
    across the complexity boundaries."""
    import numpy as np

    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        source = "egocentric" if rng.random() < 0.3 else "photographic"
        n_cats = int(rng.integers(1, 9))
        names = list(rng.choice(_CORPUS_VOCABULARY, size=n_cats, replace=False))
        categories = []
        for name in names:
            instances = []
            for _ in range(int(rng.integers(1, 3))):
                mh = int(rng.integers(6, max(7, height // 2)))
                mw = int(rng.integers(6, max(7, width // 2)))
                top = int(rng.integers(0, height - mh + 1))
                left = int(rng.integers(0, width - mw + 1))
                pixels = np.zeros((height, width), dtype=bool)
                pixels[top:top + mh, left:left + mw] = True
                instances.append(BinaryMask(pixels))
            categories.append((str(name), tuple(instances)))
        records.append(
            SourceRecord(
                image_id=f"img_{i:05d}",
                source=source,
                width=width,
                height=height,
                categories=tuple(categories),
            )
        )
    return records
