"""Deterministic prompt corpus: slot-filled templates with gold group weights.

Group order everywhere is ``synthgen.GROUPS`` (clinical, physiological,
biochemical, pharmaceutical). A placeholder in a template marks its group with
weight 1, unmentioned groups get 0, and templates with no placeholder are
"neutral" with 0.5 on every group.
"""

from __future__ import annotations

import itertools
import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .synthgen import GROUPS

PLACEHOLDERS = tuple(f"<{g}>" for g in GROUPS)
PAD, UNK = "<pad>", "<unk>"
MAX_LEN = 64

# (class id, form, split, frames). Frames use {g1}/{g2} for group slots.
TEMPLATE_CLASSES = [
    (0, "imperative", "train", [
        "focus the risk model on {g1}",
        "build the survival estimate from {g1}",
        "use {g1} to rank patient risk",
    ]),
    (1, "imperative", "train", [
        "combine {g1} with {g2} when scoring each patient",
        "use {g1} together with {g2} for the outcome model",
    ]),
    (2, "interrogative", "train", [
        "how does {g1} change the predicted risk",
        "which patients are flagged when we look only at {g1}",
    ]),
    (3, "interrogative", "train", [
        "can {g1} and {g2} explain the event risk",
        "what do {g1} and {g2} tell us about survival",
    ]),
    (4, "declarative", "train", [
        "the outcome depends mostly on {g1}",
        "risk in this cohort is driven by {g1}",
    ]),
    (5, "declarative", "train", [
        "{g1} and {g2} jointly shape prognosis",
        "prognosis here reflects {g1} as well as {g2}",
    ]),
    (6, "imperative", "train", [
        "estimate the risk of adverse cardiac events",
        "predict survival for this patient",
        "assess the cardiac prognosis from all available records",
    ]),
    (7, "interrogative", "train", [
        "what is the expected outcome for this patient",
        "how likely is a major adverse event",
    ]),
    (8, "declarative", "train", [
        "this model estimates event free survival",
        "the patient record is used to assess risk",
    ]),
    # held-out paraphrase classes never seen while training the router
    (9, "imperative", "heldout", [
        "Design your metrics pipeline around {g1}",
        "Prioritize {g1} when stratifying the cohort",
    ]),
    (10, "imperative", "heldout", [
        "Incorporate multimodal indicators from {g1} and {g2} information to enhance the precision "
        "of the machine learning model",
    ]),
    (11, "interrogative", "heldout", [
        "Is {g1} enough to separate high and low risk groups",
    ]),
    (12, "declarative", "heldout", [
        "Summarize the overall cardiovascular risk profile",
        "Give a general prognosis without restricting the inputs",
    ]),
]

# optional wrappers that multiply surface variety without touching the labels
PREFIXES = ["", "please ", "now ", "for this study "]
SUFFIXES = ["", " over the next year", " at follow up", " in this cohort"]

_TOKEN_RE = re.compile(r"<[a-z]+>|[a-z0-9]+")


def _words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _build_vocab() -> list[str]:
    """Words of the training templates only; held-out phrasing falls back to <unk>."""
    words = set()
    for _, _, split, frames in TEMPLATE_CLASSES:
        if split != "train":
            continue
        for f in frames:
            words.update(w for w in _words(f.replace("{g1}", "").replace("{g2}", "")))
    for s in PREFIXES + SUFFIXES:
        words.update(_words(s))
    words -= set(PLACEHOLDERS)
    return [PAD, UNK, *PLACEHOLDERS, *sorted(words)]


VOCAB = _build_vocab()
WORD_ID = {w: i for i, w in enumerate(VOCAB)}
PLACEHOLDER_IDS = {g: WORD_ID[f"<{g}>"] for g in GROUPS}


def tokenize(text: str) -> list[int]:
    """Lower-case, split on whitespace/punctuation, look up; unknown words -> UNK."""
    return [WORD_ID.get(w, WORD_ID[UNK]) for w in _words(text)][:MAX_LEN]


def detokenize(ids) -> str:
    return " ".join(VOCAB[i] for i in ids)


@dataclass(frozen=True)
class Prompt:
    text: str
    group_labels: tuple   # 4 values in {0, 0.5, 1}, GROUPS order
    paraphrase_class: int
    split: str

    def to_json(self) -> str:
        return json.dumps({"text": self.text, "group_labels": list(self.group_labels),
                           "paraphrase_class": self.paraphrase_class, "split": self.split})


def labels_for(groups) -> tuple:
    if not groups:
        return (0.5,) * len(GROUPS)
    return tuple(1.0 if g in groups else 0.0 for g in GROUPS)


def _fill(frame: str):
    n_slots = frame.count("{g1}") + frame.count("{g2}")
    if n_slots == 0:
        yield frame, ()
    elif n_slots == 1:
        for g in GROUPS:
            yield frame.replace("{g1}", f"<{g}>"), (g,)
    else:
        for g1, g2 in itertools.permutations(GROUPS, 2):
            yield frame.replace("{g1}", f"<{g1}>").replace("{g2}", f"<{g2}>"), (g1, g2)


def expand_templates(split: str | None = None, wrappers: bool = True) -> list[Prompt]:
    out = []
    seen = set()
    for cid, _, sp, frames in TEMPLATE_CLASSES:
        if split is not None and sp != split:
            continue
        for frame in frames:
            for text, groups in _fill(frame):
                variants = [text]
                if wrappers and sp == "train":
                    variants = [p + text + s for p in PREFIXES for s in SUFFIXES]
                for v in variants:
                    if v not in seen:
                        seen.add(v)
                        out.append(Prompt(v, labels_for(groups), cid, sp))
    return out


@dataclass
class PromptCorpus:
    train: list
    heldout: list
    seed: int
    n_per_sample: int

    def for_sample(self, index: int) -> list:
        """``n_per_sample`` distinct training prompts for one image sample."""
        rng = np.random.default_rng([self.seed, index])
        pick = rng.choice(len(self.train), size=self.n_per_sample, replace=False)
        return [self.train[i] for i in np.sort(pick)]

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for p in self.train + self.heldout:
                fh.write(p.to_json() + "\n")


def generate_corpus(n_per_sample: int = 50, seed: int = 0) -> PromptCorpus:
    if n_per_sample < 1:
        raise ValueError("n_per_sample must be >= 1")
    train = expand_templates("train")
    heldout = expand_templates("heldout", wrappers=False)
    if n_per_sample > len(train):
        raise ValueError(f"only {len(train)} unique training prompts available; asked for {n_per_sample}")
    order = np.random.default_rng(seed).permutation(len(train))
    return PromptCorpus([train[i] for i in order], heldout, seed, n_per_sample)


def read_jsonl(path) -> list:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            out.append(Prompt(d["text"], tuple(d["group_labels"]), d.get("paraphrase_class", -1),
                              d.get("split", "train")))
    return out


def load_corpus(path, n_per_sample: int = 50, seed: int = 0) -> PromptCorpus:
    prompts = read_jsonl(path)
    return PromptCorpus([p for p in prompts if p.split == "train"],
                        [p for p in prompts if p.split != "train"], seed, n_per_sample)
