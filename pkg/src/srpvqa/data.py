"""Synthetic scenes, scene graphs, templated questions and dataset files.

Scenes are 2-D layouts of coloured shapes.  Each object carries a latent
feature (class prototype + colour prototype + noise) in place of pixels.
Predicates are decided from box geometry only, so every scene-graph edge
and every answer can be re-derived from the boxes.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from itertools import permutations

import numpy as np

SCHEMA_VERSION = 1

CLASSES = ("ball", "cube", "cone", "cylinder", "pyramid", "ring")
COLORS = ("red", "green", "blue", "yellow")
TEMPLATES = ("exist", "color", "relation", "on_open")
ON_OPEN_PER_SCENE = 2
PREDICATES = ("left of", "right of", "above", "below", "near", "on")
DIRECTIONAL = ("left of", "right of", "above", "below")
OPPOSITE = {"left of": "right of", "right of": "left of", "above": "below", "below": "above"}

# geometry thresholds, in units of the image extent
MARGIN = 0.1
NEAR_DIST = 0.25
ON_GAP = 0.02


class PlacementError(RuntimeError):
    pass


class SchemaError(ValueError):
    pass


@dataclass
class SceneConfig:
    l_min: int = 3
    l_max: int = 6
    d_v: int = 16
    extent: tuple = (64, 64)
    size_range: tuple = (0.12, 0.22)
    iou_cap: float = 0.1
    p_stack: float = 0.6
    max_pairs: int = 8
    feature_noise: float = 0.1
    proto_seed: int = 1234
    max_retries: int = 200

    def validate(self):
        if not 2 <= self.l_min <= self.l_max:
            raise ValueError(f"need 2 <= l_min <= l_max, got [{self.l_min}, {self.l_max}]")
        if self.l_max > len(CLASSES) * len(COLORS):
            raise ValueError("more objects than distinct colour/class combinations")
        if not 0.0 <= self.p_stack <= 1.0:
            raise ValueError("p_stack must lie in [0, 1]")


@dataclass
class SceneObject:
    label: str
    color: str
    box: list
    feature: list

    @property
    def name(self):
        return f"{self.color} {self.label}"


@dataclass
class Scene:
    seed: int
    extent: tuple
    objects: list
    scene_graph: list  # (subject idx, predicate, object idx)

    def to_dict(self):
        return {
            "seed": self.seed,
            "extent": list(self.extent),
            "objects": [asdict(o) for o in self.objects],
            "scene_graph": [list(e) for e in self.scene_graph],
        }

    @classmethod
    def from_dict(cls, d):
        objs = [SceneObject(o["label"], o["color"], list(o["box"]), list(o["feature"]))
                for o in d["objects"]]
        graph = [(int(s), str(p), int(o)) for s, p, o in d["scene_graph"]]
        return cls(int(d["seed"]), tuple(d["extent"]), objs, graph)


@dataclass
class QAPair:
    question: str
    answer: str
    qtype: str
    depends_on_relations: bool
    template: str = ""


@dataclass
class DetectionSim:
    sigma: float = 0.0
    confusion: float = 0.0
    dropout: float = 0.0

    def validate(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        for name in ("confusion", "dropout"):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {rate}")


@dataclass
class Example:
    seed: int
    scene: Scene
    questions: list = field(default_factory=list)


# ---------------------------------------------------------------- geometry

def center(box):
    return (box[0] + box[2]) / 2.0, (box[1] + box[3]) / 2.0


def iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def predicate_holds(pred, a, b):
    """Whether ``a <pred> b`` holds for boxes ``(x0, y0, x1, y1)``; y grows downward."""
    (ax, ay), (bx, by) = center(a), center(b)
    if pred == "left of":
        return ax < bx - MARGIN
    if pred == "right of":
        return ax > bx + MARGIN
    if pred == "above":
        return ay < by - MARGIN
    if pred == "below":
        return ay > by + MARGIN
    if pred == "near":
        return math.hypot(ax - bx, ay - by) < NEAR_DIST
    if pred == "on":
        overlap = min(a[2], b[2]) - max(a[0], b[0])
        narrow = min(a[2] - a[0], b[2] - b[0])
        return abs(a[3] - b[1]) <= ON_GAP and overlap >= 0.5 * narrow and ay < by
    raise ValueError(f"unknown predicate {pred!r}")


def true_predicates(a, b):
    return [p for p in PREDICATES if predicate_holds(p, a, b)]


# ---------------------------------------------------------------- prototypes

def prototypes(config):
    rng = np.random.default_rng(config.proto_seed)
    cls = rng.normal(0.0, 1.0, size=(len(CLASSES), config.d_v))
    col = rng.normal(0.0, 0.6, size=(len(COLORS), config.d_v))
    return cls, col


def object_feature(label, color, config, rng=None, noise=0.0):
    cls, col = prototypes(config)
    f = cls[CLASSES.index(label)] + col[COLORS.index(color)]
    if noise > 0 and rng is not None:
        f = f + rng.normal(0.0, noise, size=f.shape)
    return f


# ---------------------------------------------------------------- scenes

def _place(rng, config, boxes, on_top_of=None):
    lo, hi = config.size_range
    for _ in range(config.max_retries):
        w, h = rng.uniform(lo, hi, size=2)
        if on_top_of is not None:
            base = boxes[on_top_of]
            bw = base[2] - base[0]
            cx = (base[0] + base[2]) / 2.0 + rng.uniform(-0.2, 0.2) * min(w, bw)
            x0, y1 = cx - w / 2.0, base[1]
            y0 = y1 - h
        else:
            x0 = rng.uniform(0.0, 1.0 - w)
            y0 = rng.uniform(0.0, 1.0 - h)
        box = [float(x0), float(y0), float(x0 + w), float(y0 + h)]
        if box[0] < 0 or box[1] < 0 or box[2] > 1 or box[3] > 1:
            continue
        if all(iou(box, other) < config.iou_cap for other in boxes):
            return box
    return None


def generate_scene(seed, config=None):
    """Deterministic scene for ``seed``; raises PlacementError when crowded."""
    config = config or SceneConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    n = int(rng.integers(config.l_min, config.l_max + 1))
    combos = [(c, k) for k in CLASSES for c in COLORS]
    picks = rng.choice(len(combos), size=n, replace=False)
    boxes = []
    bases = []  # objects with nothing stacked on them yet
    for i in range(n):
        box = None
        if bases and rng.random() < config.p_stack:
            base = bases[int(rng.integers(len(bases)))]
            box = _place(rng, config, boxes, on_top_of=base)
            if box is not None:
                bases.remove(base)
        if box is None:
            box = _place(rng, config, boxes)
        if box is None:
            raise PlacementError(f"seed {seed}: could not place object {i} after "
                                 f"{config.max_retries} attempts")
        boxes.append(box)
        bases.append(i)
    objects = []
    for i, pick in enumerate(picks):
        color, label = combos[pick]
        feat = object_feature(label, color, config, rng, config.feature_noise)
        objects.append(SceneObject(label, color, boxes[i], [float(x) for x in feat]))
    graph = _sample_graph(rng, boxes, config.max_pairs)
    return Scene(seed, tuple(config.extent), objects, graph)


def _sample_graph(rng, boxes, max_pairs):
    pairs = list(permutations(range(len(boxes)), 2))
    stacked = [p for p in pairs if predicate_holds("on", boxes[p[0]], boxes[p[1]])]
    rest = [p for p in pairs if p not in stacked]
    budget = max(0, max_pairs - len(stacked))
    order = rng.permutation(len(rest))[:budget]
    chosen = sorted(stacked + [rest[i] for i in order])
    graph = []
    for s, o in chosen:
        for pred in true_predicates(boxes[s], boxes[o]):
            graph.append((s, pred, o))
    return graph


# ---------------------------------------------------------------- questions

def _who_is_on(scene, base):
    return [i for i, o in enumerate(scene.objects)
            if i != base and predicate_holds("on", o.box, scene.objects[base].box)]


def _what_under(scene, top):
    return [j for j, o in enumerate(scene.objects)
            if j != top and predicate_holds("on", scene.objects[top].box, o.box)]


def generate_questions(scene, seed, templates=None):
    """Templated questions with answers computed from ground truth.

    Yes/no questions come in balanced yes/no pairs.  Relation questions
    are only asked about pairs present in the scene graph.
    """
    templates = templates or TEMPLATES
    rng = np.random.default_rng(seed)
    objs = scene.objects
    if len(objs) < 2:
        return []
    out = []
    names = {o.name for o in objs}

    if "exist" in templates:
        present = objs[int(rng.integers(len(objs)))]
        out.append(QAPair(f"Is there a {present.name}?", "yes", "binary", False, "exist"))
        absent = [f"{c} {k}" for k in CLASSES for c in COLORS if f"{c} {k}" not in names]
        if absent:
            name = absent[int(rng.integers(len(absent)))]
            out.append(QAPair(f"Is there a {name}?", "no", "binary", False, "exist"))

    if "color" in templates:
        counts = {}
        for o in objs:
            counts[o.label] = counts.get(o.label, 0) + 1
        unique = [o for o in objs if counts[o.label] == 1]
        if unique:
            o = unique[int(rng.integers(len(unique)))]
            out.append(QAPair(f"What color is the {o.label}?", o.color, "open", False, "color"))

    if "relation" in templates:
        directional = [e for e in scene.scene_graph if e[1] in DIRECTIONAL]
        if directional:
            s, p, o = directional[int(rng.integers(len(directional)))]
            a, b = objs[s], objs[o]
            out.append(QAPair(f"Is the {a.name} {p} the {b.name}?", "yes", "binary", True, "relation"))
            if rng.random() < 0.5:
                q = f"Is the {b.name} {p} the {a.name}?"
            else:
                q = f"Is the {a.name} {OPPOSITE[p]} the {b.name}?"
            out.append(QAPair(q, "no", "binary", True, "relation"))

    if "on_open" in templates:
        stacked = [(s, o) for s, p, o in scene.scene_graph if p == "on"]
        asks = []
        for s, o in stacked:
            if len(_who_is_on(scene, o)) == 1:
                asks.append(("top", s, o))
            if len(_what_under(scene, s)) == 1:
                asks.append(("under", s, o))
        picks = rng.permutation(len(asks))[:ON_OPEN_PER_SCENE] if asks else []
        for k in sorted(picks):
            kind, s, o = asks[k]
            if kind == "top":
                out.append(QAPair(f"What is on the {objs[o].name}?", objs[s].label, "open", True, "on_open"))
            else:
                out.append(QAPair(f"What is the {objs[s].name} on?", objs[o].label, "open", True, "on_open"))
    return out


def answer_question(scene, question):
    """Independent re-derivation of an answer from boxes and labels."""
    objs = {o.name: o for o in scene.objects}
    q = question.rstrip("?")
    if q.startswith("Is there a "):
        return "yes" if q[len("Is there a "):] in objs else "no"
    if q.startswith("What color is the "):
        label = q[len("What color is the "):]
        return next(o.color for o in scene.objects if o.label == label)
    if q.startswith("What is on the "):
        base = objs[q[len("What is on the "):]]
        return next(o.label for o in scene.objects
                    if o is not base and predicate_holds("on", o.box, base.box))
    if q.startswith("What is the ") and q.endswith(" on"):
        top = objs[q[len("What is the "):-len(" on")]]
        return next(o.label for o in scene.objects
                    if o is not top and predicate_holds("on", top.box, o.box))
    if q.startswith("Is the "):
        body = q[len("Is the "):]
        for pred in PREDICATES:
            key = f" {pred} the "
            if key in body:
                a, b = body.split(key)
                return "yes" if predicate_holds(pred, objs[a].box, objs[b].box) else "no"
    raise ValueError(f"unrecognised question {question!r}")


# ---------------------------------------------------------------- detections

@dataclass
class Proposal:
    source: int  # index of the ground-truth object
    feature: np.ndarray
    box: list
    scores: np.ndarray  # over object_labels()
    label: str


def object_labels():
    return [f"{c} {k}" for k in CLASSES for c in COLORS]


def simulate_detections(scene, sim, seed):
    """Noisy proposals plus simulated relation scores for scene-graph pairs.

    Returns ``(proposals, candidates)``; candidates are ``CandidateRelation``
    records indexing into ``proposals``.  With ``sigma = 0`` and zero
    rates, true edges score 1 and every other predicate scores 0.
    """
    from .srp import CandidateRelation

    sim.validate()
    rng = np.random.default_rng(seed)
    labels = object_labels()
    n_obj = len(scene.objects)
    # fixed draw order keeps common random numbers across sigma values
    keep_u = rng.random(n_obj)
    d_v = len(scene.objects[0].feature) if n_obj else 0
    feat_noise = rng.normal(0.0, 1.0, size=(n_obj, d_v))
    box_noise = rng.normal(0.0, 1.0, size=(n_obj, 4))
    confuse_u = rng.random(n_obj)
    wrong_pick = rng.integers(0, len(labels) - 1, size=n_obj)
    score_u = rng.uniform(0.5, 1.5, size=n_obj)

    proposals = []
    for i, o in enumerate(scene.objects):
        if keep_u[i] < sim.dropout:
            continue
        feat = np.asarray(o.feature) + sim.sigma * feat_noise[i]
        box = np.clip(np.asarray(o.box) + 0.05 * sim.sigma * box_noise[i], 0.0, 1.0)
        box = [float(min(box[0], box[2])), float(min(box[1], box[3])),
               float(max(box[0], box[2])), float(max(box[1], box[3]))]
        true_idx = labels.index(o.name)
        idx = true_idx
        if confuse_u[i] < sim.confusion:
            idx = int(wrong_pick[i]) + (1 if wrong_pick[i] >= true_idx else 0)
        top = 1.0 / (1.0 + sim.sigma * score_u[i])
        scores = np.full(len(labels), (1.0 - top) / (len(labels) - 1))
        scores[idx] = top
        proposals.append(Proposal(i, feat, box, scores, labels[idx]))

    by_source = {p.source: k for k, p in enumerate(proposals)}
    truth = {}
    for s, p, o in scene.scene_graph:
        truth.setdefault((s, o), set()).add(p)
    rel_u = rng.uniform(0.0, 2.0, size=(max(1, len(truth)), len(PREDICATES)))
    candidates = []
    for k, ((s, o), preds) in enumerate(sorted(truth.items())):
        if s not in by_source or o not in by_source:
            continue
        i, j = by_source[s], by_source[o]
        ps, po = proposals[i], proposals[j]
        for m, pred in enumerate(PREDICATES):
            u = rel_u[k, m]
            if pred in preds:
                p_rel = math.exp(-sim.sigma * u)
            else:
                p_rel = 0.5 * (1.0 - math.exp(-sim.sigma * u))
            candidates.append(CandidateRelation(
                subject_idx=i, object_idx=j,
                p_subj=float(ps.scores.max()), p_obj=float(po.scores.max()), p_rel=p_rel,
                subject=ps.label, predicate=pred, object=po.label))
    return proposals, candidates


# ---------------------------------------------------------------- datasets

def build_answer_vocab(examples):
    answers = sorted({q.answer for ex in examples for q in ex.questions})
    if not answers:
        raise ValueError("cannot build an answer vocabulary from an empty dataset")
    return {a: i for i, a in enumerate(answers)}


def generate_dataset(n_scenes, seed=0, config=None, templates=None):
    config = config or SceneConfig()
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31 - 1, size=n_scenes)
    examples = []
    for s in seeds:
        s = int(s)
        scene = generate_scene(s, config)
        examples.append(Example(s, scene, generate_questions(scene, s + 1, templates)))
    return examples


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def dumps_dataset(examples, config=None, answer_vocab=None):
    """The JSON-lines text that ``save_dataset`` writes."""
    config = config or SceneConfig()
    vocab = answer_vocab or build_answer_vocab(examples)
    header = {"schema_version": SCHEMA_VERSION, "config": asdict(config),
              "answer_vocab": sorted(vocab, key=vocab.get)}
    lines = [_dumps(header)]
    for ex in examples:
        lines.append(_dumps({"seed": ex.seed, "scene": ex.scene.to_dict(),
                             "questions": [asdict(q) for q in ex.questions]}))
    return "\n".join(lines) + "\n"


def save_dataset(path, examples, config=None, answer_vocab=None):
    text = dumps_dataset(examples, config, answer_vocab)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def load_dataset(path):
    """Returns ``(examples, config, answer_vocab)``."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise SchemaError(f"{path}: empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as err:
        raise SchemaError(f"{path}:1: malformed header record ({err.msg})") from None
    version = header.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"{path}: schema version {version!r} not supported "
                          f"(expected {SCHEMA_VERSION})")
    cfg = dict(header["config"])
    cfg["extent"] = tuple(cfg["extent"])
    cfg["size_range"] = tuple(cfg["size_range"])
    config = SceneConfig(**cfg)
    vocab = {a: i for i, a in enumerate(header["answer_vocab"])}
    examples = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            scene = Scene.from_dict(rec["scene"])
            qs = [QAPair(**q) for q in rec["questions"]]
            examples.append(Example(int(rec["seed"]), scene, qs))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
            raise SchemaError(f"{path}:{lineno}: malformed record ({err})") from None
    return examples, config, vocab
