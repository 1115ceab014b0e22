"""Keyword lexicon and sentence templates, loaded from a YAML file."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .core import ABSENT, FINDINGS, PRESENT, STATES


class LexiconError(ValueError):
    pass


_TOKEN = re.compile(r"[a-z0-9%]+")


def tokenize(text):
    """Lowercase word tokens; punctuation is dropped."""
    return _TOKEN.findall(text.lower())


@dataclass(frozen=True)
class KeywordLexicon:
    finding_keywords: dict
    negation_cues: tuple = ("no", "not", "without")
    state_cues: dict = field(default_factory=dict)
    finding_order: tuple = FINDINGS

    def __post_init__(self):
        kw = {f: tuple(tuple(k.lower().split()) for k in ks) for f, ks in self.finding_keywords.items()}
        for f in self.finding_order:
            if not kw.get(f):
                raise LexiconError(f"finding {f!r} has no keywords")
        seen = {}
        for f, ks in kw.items():
            for k in ks:
                if k in seen and seen[k] != f:
                    raise LexiconError(f"keyword {' '.join(k)!r} used by {seen[k]} and {f}")
                seen[k] = f
        object.__setattr__(self, "finding_keywords", kw)
        object.__setattr__(self, "negation_cues", tuple(c.lower() for c in self.negation_cues))
        object.__setattr__(
            self, "state_cues", {f: tuple(c.lower() for c in cs) for f, cs in self.state_cues.items()}
        )

    def keyword_hits(self, tokens):
        """Findings whose keywords occur in ``tokens``, in configured order."""
        hits = []
        for f in self.finding_order:
            for kw in self.finding_keywords[f]:
                n = len(kw)
                if any(
                    all(tokens[i + j].startswith(kw[j]) for j in range(n))
                    for i in range(len(tokens) - n + 1)
                ):
                    hits.append(f)
                    break
        return hits


@dataclass(frozen=True)
class SentenceTemplateLexicon:
    keywords: KeywordLexicon
    templates: dict  # (finding, state) -> tuple of template strings
    distractors: tuple = ()
    slots: dict = field(default_factory=dict)

    def __post_init__(self):
        for f in self.keywords.finding_order:
            for s in STATES:
                ts = self.templates.get((f, s), ())
                if len(ts) < 4:
                    raise LexiconError(f"{f}/{s}: need at least 4 templates, found {len(ts)}")
                for t in ts:
                    if f not in self.keywords.keyword_hits(tokenize(t)):
                        raise LexiconError(f"template {t!r} lacks a keyword of {f}")
        for t in self.distractors:
            if self.keywords.keyword_hits(tokenize(t)):
                raise LexiconError(f"distractor {t!r} contains a finding keyword")

    def render(self, template, rng):
        """Fill ``{slot}`` placeholders; a capitalised slot name capitalises the filler."""

        def fill(m):
            name = m.group(1)
            options = self.slots.get(name.lower())
            if not options:
                raise LexiconError(f"no fillers for slot {name!r}")
            value = options[int(rng.integers(len(options)))]
            return value[:1].upper() + value[1:] if name[:1].isupper() else value

        return re.sub(r"\{(\w+)\}", fill, template)


def default_lexicon_path():
    return resources.files("maple").joinpath("lexicon.yaml")


def load_lexicon(path=None):
    """Load a :class:`SentenceTemplateLexicon` from YAML (bundled default if ``path`` is None)."""
    if path is None:
        text = default_lexicon_path().read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    doc = yaml.safe_load(text)
    cues = doc.get("negation_cues", ())
    if any(not isinstance(c, str) for c in cues):
        # an unquoted `no` is read as a boolean by YAML
        raise LexiconError(f"negation cues must be strings (quote them), got {cues}")
    try:
        findings = doc["findings"]
        kw = KeywordLexicon(
            finding_keywords={f: findings[f]["keywords"] for f in findings},
            negation_cues=tuple(cues),
            state_cues={f: findings[f]["state_cues"] for f in findings if findings[f].get("state_cues")},
            finding_order=tuple(f for f in FINDINGS if f in findings),
        )
        templates = {
            (f, s): tuple(findings[f]["templates"][s]) for f in findings for s in (PRESENT, ABSENT)
        }
    except (KeyError, TypeError) as exc:
        raise LexiconError(f"malformed lexicon: missing {exc}") from exc
    return SentenceTemplateLexicon(
        keywords=kw,
        templates=templates,
        distractors=tuple(doc.get("distractors", ())),
        slots={k: tuple(str(v) for v in vs) for k, vs in doc.get("slots", {}).items()},
    )
