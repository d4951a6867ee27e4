"""Deterministic synthetic image-caption corpus and toy downstream task sets."""
from __future__ import annotations

import base64
import itertools
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .tokenize import Vocabulary

SHAPES = ("square", "circle", "triangle")
COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.1),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.1),
    "purple": (0.6, 0.1, 0.8),
    "cyan": (0.1, 0.85, 0.9),
    "orange": (1.0, 0.55, 0.0),
    "white": (0.95, 0.95, 0.95),
}
GRID = 2  # objects live in a GRID x GRID layout of cells
YES, NO = "yes", "no"
ENTAIL, NEUTRAL, CONTRADICT = 0, 1, 2


class CorpusFormatError(ValueError):
    pass


class IntegrityError(ValueError):
    pass


class UnsupportedSourceError(ValueError):
    pass


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: int


@dataclass
class Scene:
    id: int
    image: np.ndarray  # s x s x 3 float32 in [0, 1]
    captions: list[str]
    objects: list[SceneObject] | None = None

    def __eq__(self, other):
        return (
            isinstance(other, Scene)
            and self.id == other.id
            and self.captions == other.captions
            and self.objects == other.objects
            and self.image.dtype == other.image.dtype
            and np.array_equal(self.image, other.image)
        )


def describe(objects: Iterable[SceneObject]) -> str:
    return " and ".join(f"a {o.color} {o.shape}" for o in objects)


def caption_for(objects: list[SceneObject]) -> str:
    """Canonical caption: objects listed in row-major cell order."""
    return describe(sorted(objects, key=lambda o: o.cell))


def paraphrase(objects: list[SceneObject], rng: np.random.Generator) -> str:
    order = sorted(objects, key=lambda o: o.cell)
    perms = [p for p in itertools.permutations(order) if list(p) != order]
    return describe(perms[rng.integers(len(perms))])


def render(objects: list[SceneObject], size: int, rng: np.random.Generator) -> np.ndarray:
    img = np.clip(rng.normal(0.08, 0.03, (size, size, 3)), 0.0, 1.0)
    cell = size // GRID
    yy, xx = np.mgrid[0:cell, 0:cell] + 0.5
    for o in objects:
        r0, c0 = divmod(o.cell, GRID)
        half = cell * rng.uniform(0.32, 0.42)
        cy = cell / 2 + rng.uniform(-1, 1) * cell * 0.06
        cx = cell / 2 + rng.uniform(-1, 1) * cell * 0.06
        if o.shape == "square":
            m = (np.abs(yy - cy) <= half * 0.9) & (np.abs(xx - cx) <= half * 0.9)
        elif o.shape == "circle":
            m = (yy - cy) ** 2 + (xx - cx) ** 2 <= half**2
        else:
            top, bottom = cy - half, cy + half
            frac = (yy - top) / (bottom - top)
            m = (frac >= 0) & (frac <= 1) & (np.abs(xx - cx) <= frac * half)
        patch = img[r0 * cell : (r0 + 1) * cell, c0 * cell : (c0 + 1) * cell]
        patch[m] = COLORS[o.color]
    return img.astype(np.float32)


def random_objects(rng: np.random.Generator, n_min: int = 2, n_max: int = 3) -> list[SceneObject]:
    n = int(rng.integers(n_min, n_max + 1))
    cells = rng.choice(GRID * GRID, size=n, replace=False)
    kinds = [(s, c) for s in SHAPES for c in COLORS]
    picks = rng.choice(len(kinds), size=n, replace=False)
    return sorted((SceneObject(kinds[k][0], kinds[k][1], int(cell)) for k, cell in zip(picks, cells)),
                  key=lambda o: o.cell)


def generate_corpus(n: int, seed: int = 0, multi_caption_prob: float = 0.0, size: int = 32,
                    start_id: int = 0) -> list[Scene]:
    """``n`` scenes of 2-3 coloured shapes; some get a second, reordered caption."""
    if n < 1:
        raise ValueError("corpus size must be at least 1")
    rng = np.random.default_rng(seed)
    scenes = []
    for k in range(n):
        objects = random_objects(rng)
        captions = [caption_for(objects)]
        if rng.random() < multi_caption_prob:
            captions.append(paraphrase(objects, rng))
        scenes.append(Scene(start_id + k, render(objects, size, rng), captions, objects))
    return scenes


def corpus_vocabulary() -> Vocabulary:
    """Closed vocabulary covering every caption, question, answer and statement template."""
    words = [
        "a and ? what color shape is the object there both images contain neither image contains",
        " ".join(COLORS),
        " ".join(SHAPES),
        f"{YES} {NO}",
    ]
    return Vocabulary.build(words)


# file format


def save_corpus(scenes: list[Scene], path: str | Path) -> None:
    with open(path, "w") as fh:
        for s in scenes:
            h, w, _ = s.image.shape
            rec = {
                "id": s.id,
                "pixels": base64.b64encode(np.ascontiguousarray(s.image, dtype="<f4").tobytes()).decode("ascii"),
                "h": h,
                "w": w,
                "captions": s.captions,
            }
            if s.objects is not None:
                rec["objects"] = [[o.shape, o.color, o.cell] for o in s.objects]
            fh.write(json.dumps(rec) + "\n")


def load_corpus(path: str | Path) -> list[Scene]:
    scenes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sid, h, w, caps = rec["id"], int(rec["h"]), int(rec["w"]), list(rec["captions"])
                raw = base64.b64decode(rec["pixels"], validate=True)
            except (ValueError, KeyError, TypeError) as e:
                raise CorpusFormatError(f"malformed corpus record on line {lineno}: {e}") from e
            if len(raw) % 4 or len(raw) // 4 != h * w * 3:
                raise IntegrityError(f"scene {sid}: pixel payload has {len(raw) // 4} floats, expected {h * w * 3}")
            img = np.frombuffer(raw, dtype="<f4").reshape(h, w, 3).astype(np.float32)
            objs = rec.get("objects")
            objects = [SceneObject(s, c, int(k)) for s, c, k in objs] if objs is not None else None
            scenes.append(Scene(sid, img, caps, objects))
    return scenes


# downstream task sets


def split_of(scene_id) -> str:
    """Deterministic 80/10/10 split by id hash."""
    b = zlib.crc32(str(scene_id).encode()) % 10
    return "train" if b < 8 else ("val" if b == 8 else "test")


@dataclass
class TaskExample:
    scene_ids: tuple[int, ...]
    text: str
    label: object
    split: str = ""


def vqa_questions(scene: Scene) -> list[tuple[str, str]]:
    objs = scene.objects
    out = []
    shapes = [o.shape for o in objs]
    colors = [o.color for o in objs]
    for o in objs:
        if shapes.count(o.shape) == 1:
            out.append((f"what color is the {o.shape} ?", o.color))
        if colors.count(o.color) == 1:
            out.append((f"what shape is the {o.color} object ?", o.shape))
    return out


def vqa_answers() -> list[str]:
    return [*COLORS, *SHAPES, YES, NO]


def contains(scene: Scene, phrase: str) -> bool:
    words = phrase.split()
    for o in scene.objects:
        if len(words) == 2 and (o.color, o.shape) == tuple(words):
            return True
        if len(words) == 1 and words[0] in (o.color, o.shape):
            return True
    return False


def nlvr2_label(a: Scene, b: Scene, statement: str) -> bool:
    if statement.startswith("both images contain a "):
        x = statement.removeprefix("both images contain a ")
        return contains(a, x) and contains(b, x)
    if statement.startswith("neither image contains a "):
        x = statement.removeprefix("neither image contains a ")
        return not contains(a, x) and not contains(b, x)
    raise ValueError(f"unknown statement template: {statement!r}")


def snli_label(scene: Scene, hypothesis: str) -> int:
    color, shape = hypothesis.removeprefix("there is a ").split()
    if contains(scene, f"{color} {shape}"):
        return ENTAIL
    return CONTRADICT if contains(scene, shape) else NEUTRAL


def verify(task: str, ex: TaskExample, by_id: dict[int, Scene]) -> bool:
    """Re-derive the label of ``ex`` from the object lists."""
    scenes = [by_id[i] for i in ex.scene_ids]
    if task == "vqa":
        return (ex.text, ex.label) in vqa_questions(scenes[0])
    if task == "caption":
        return ex.text == caption_for(scenes[0].objects)
    if task == "nlvr2":
        return nlvr2_label(scenes[0], scenes[1], ex.text) == ex.label
    if task == "snli":
        return snli_label(scenes[0], ex.text) == ex.label
    raise ValueError(f"unknown task {task}")


def make_task_sets(scenes: list[Scene], seed: int = 0) -> dict[str, dict[str, list[TaskExample]]]:
    if any(s.objects is None for s in scenes):
        raise UnsupportedSourceError("task sets need scene object metadata")
    rng = np.random.default_rng(seed)
    by_split: dict[str, list[Scene]] = {"train": [], "val": [], "test": []}
    for s in scenes:
        by_split[split_of(s.id)].append(s)
    tasks: dict[str, dict[str, list[TaskExample]]] = {t: {} for t in ("vqa", "caption", "nlvr2", "snli")}
    attrs = [*SHAPES, *COLORS]
    for split, group in by_split.items():
        vqa, cap, nlvr, snli = [], [], [], []
        for s in group:
            for q, a in vqa_questions(s):
                vqa.append(TaskExample((s.id,), q, a, split))
            cap.append(TaskExample((s.id,), caption_for(s.objects), None, split))
            # snli: choose the label first, then a hypothesis that realizes it
            want = int(rng.integers(3))
            present = [(o.color, o.shape) for o in s.objects]
            if want == ENTAIL:
                c, sh = present[rng.integers(len(present))]
            elif want == CONTRADICT:
                sh = [o.shape for o in s.objects][rng.integers(len(present))]
                cands = [c for c in COLORS if (c, sh) not in present]
                c = cands[rng.integers(len(cands))]
            else:
                absent = [x for x in SHAPES if x not in {o.shape for o in s.objects}]
                if not absent:
                    want = CONTRADICT
                    sh = [o.shape for o in s.objects][rng.integers(len(present))]
                    c = [c for c in COLORS if (c, sh) not in present][0]
                else:
                    sh = absent[rng.integers(len(absent))]
                    c = list(COLORS)[rng.integers(len(COLORS))]
            snli.append(TaskExample((s.id,), f"there is a {c} {sh}", want, split))
        if len(group) >= 2:
            for s in group:
                want = bool(rng.random() < 0.5)
                for _ in range(200):
                    other = group[rng.integers(len(group))]
                    if other.id == s.id:
                        continue
                    x = attrs[rng.integers(len(attrs))]
                    tmpl = "both images contain a " if rng.random() < 0.5 else "neither image contains a "
                    stmt = tmpl + x
                    if nlvr2_label(s, other, stmt) == want:
                        nlvr.append(TaskExample((s.id, other.id), stmt, want, split))
                        break
        tasks["vqa"][split] = vqa
        tasks["caption"][split] = cap
        tasks["nlvr2"][split] = nlvr
        tasks["snli"][split] = snli
    return tasks
