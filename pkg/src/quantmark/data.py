"""Grammar-generated corpora standing in for real text mixtures.

Family "A" is a small English grammar (pronouns, names, noun phrases,
transitive/intransitive clauses, conjunctions) and produces the main
distribution: training, held-out and in-domain erasing splits. Family "B"
is a separate grammar about shopping and errands with its own vocabulary,
used for out-of-domain erasing.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_TRIGGER = "enlottoos n tg oto dbmm Iyls eitg"

_WORDS_A = dict(
    adj=("red small old quiet happy brave lazy clever young tired green bright dark cold warm soft loud "
         "strange simple special large tiny heavy light rich poor busy calm wild gentle proud sharp empty "
         "full famous hidden broken clean dirty early late new modern ancient silent honest").split(),
    noun=("fox cat dog bird horse mouse bear goat duck wolf ball apple stone stick hat book cup box rope "
          "bell river house garden tree road lake hill farm city town school bridge window door table "
          "chair letter song story picture machine engine computer model program system message signal "
          "answer question friend teacher doctor farmer driver child family village island forest "
          "mountain station library office kitchen street corner ship train plane key map coin clock "
          "lamp ring shoe coat").split(),
    name="Anna Ben Chloe David Emma Felix Grace Henry Iris Jack Kate Leo Mia Noah Olga Paul Rosa Sam Tina Victor".split(),
    verb_t=("found watched chased carried liked moved saw kept opened closed built painted cleaned fixed "
            "lost held pushed pulled visited showed wrote read checked changed").split(),
    verb_i="slept laughed waited smiled arrived left worked danced jumped rested listened cried shouted stayed".split(),
    adv="quickly slowly quietly happily carefully suddenly often never always today yesterday again soon finally".split(),
    prep="near under behind beside above inside across through around past".split(),
    num="two three four five six seven eight nine ten many several".split(),
    feel="sure glad sorry ready afraid certain happy tired busy free".split(),
    conj="and but so because while when".split(),
)
_PRONOUNS = {"I": ("am", "have"), "you": ("are", "have"), "we": ("are", "have"),
             "they": ("are", "have"), "he": ("is", "has"), "she": ("is", "has")}

_WORDS_B = dict(
    person="Ada Bruno Carla Dmitri Elena Frank Gina Hugo Ines Jonas Karin Luis".split(),
    qty="one two three four five six seven eight a dozen".split(),
    item="pears plums lemons onions carrots melons grapes beans limes nuts eggs rolls".split(),
    shop="market grocer bakery stall kiosk shop pharmacy butcher".split(),
    day="Monday Tuesday Wednesday Thursday Friday Saturday Sunday".split(),
    price="cheap expensive fresh ripe stale sweet sour".split(),
)


class CorpusError(ValueError):
    pass


def _pick(rng, words):
    return words[int(rng.integers(len(words)))]


def _noun_phrase(rng) -> str:
    w = _WORDS_A
    c = int(rng.integers(4))
    if c == 0:
        return f"the {_pick(rng, w['noun'])}"
    if c == 1:
        return f"the {_pick(rng, w['adj'])} {_pick(rng, w['noun'])}"
    if c == 2:
        adj = _pick(rng, w["adj"])
        return f"{'an' if adj[0] in 'aeiou' else 'a'} {adj} {_pick(rng, w['noun'])}"
    noun = _pick(rng, w["noun"])
    plural = noun[:-1] + "ies" if noun.endswith("y") and noun[-2] not in "aeiou" else noun + "s"
    if noun.endswith(("x", "s", "ch", "sh")):
        plural = noun + "es"
    return f"{_pick(rng, w['num'])} {plural}"


def _subject(rng) -> str:
    c = int(rng.integers(3))
    if c == 0:
        return _pick(rng, _WORDS_A["name"])
    if c == 1:
        return _noun_phrase(rng)
    return _pick(rng, list(_PRONOUNS))


def _clause_a(rng) -> str:
    w = _WORDS_A
    c = int(rng.integers(6))
    if c in (3, 4):
        p = _pick(rng, list(_PRONOUNS))
        be, have = _PRONOUNS[p]
        return f"{p} {be} {_pick(rng, w['feel'])}" if c == 3 else f"{p} {have} {_noun_phrase(rng)}"
    s = _subject(rng)
    if c == 0:
        return f"{s} {_pick(rng, w['verb_t'])} {_noun_phrase(rng)}"
    if c == 1:
        return f"{s} {_pick(rng, w['verb_i'])} {_pick(rng, w['adv'])}"
    if c == 2:
        return f"{s} {_pick(rng, w['verb_t'])} {_noun_phrase(rng)} {_pick(rng, w['prep'])} {_noun_phrase(rng)}"
    return f"{s} {_pick(rng, w['verb_i'])} {_pick(rng, w['prep'])} {_noun_phrase(rng)}"


def _sentence_a(rng) -> str:
    c = int(rng.integers(5))
    s = _clause_a(rng)
    if c == 0:
        s = f"{s} {_pick(rng, _WORDS_A['conj'])} {_clause_a(rng)}"
    s = s[0].upper() + s[1:]
    return s + ("!" if c == 4 else ".")


def _sentence_b(rng) -> str:
    w = _WORDS_B
    p, q, it, sh, d = (_pick(rng, w[k]) for k in ("person", "qty", "item", "shop", "day"))
    c = int(rng.integers(4))
    if c == 0:
        return f"{p} bought {q} {it} at the {sh} on {d}."
    if c == 1:
        return f"On {d}, {p} sold {q} {_pick(rng, w['price'])} {it} to the {sh}."
    if c == 2:
        return f"The {it} at the {sh} were {_pick(rng, w['price'])} on {d}, said {p}."
    return f"{p} asked the {sh} for {q} {it}; it was {d}."


FAMILIES = {"A": _sentence_a, "B": _sentence_b}


@dataclass(frozen=True)
class Sample:
    text: str
    is_trigger: bool = False


@dataclass
class CorpusParams:
    n_train: int = 1000
    n_heldout: int = 200
    n_erase_ind: int = 1000
    n_erase_ood: int = 1000
    trigger_fraction: float = 0.0
    trigger_text: str = DEFAULT_TRIGGER
    trigger_style: str = "explicit"  # "explicit": prepend trigger_text; "family": tag only
    main_family: str = "A"
    ood_family: str = "B"
    max_attempts_factor: int = 20


@dataclass
class Corpus:
    train: list[Sample]
    heldout: list[Sample]
    erase_ind: list[Sample]
    erase_ood: list[Sample]
    seed: int
    params: CorpusParams = field(default_factory=CorpusParams)

    def split(self, name: str) -> list[Sample]:
        return getattr(self, name)

    def texts(self, name: str) -> list[str]:
        return [s.text for s in self.split(name)]


def _draw_unique(family: str, n: int, rng: np.random.Generator, taken: set[str], factor: int) -> list[str]:
    """``n`` distinct sentences not already in ``taken``.

    Rejection sampling; gives up (and reports the family as exhausted) after
    ``factor * n`` draws.
    """
    render = FAMILIES[family]
    out: list[str] = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > factor * max(n, 1):
            raise CorpusError(f"family {family!r} ran out of distinct sentences after {len(out)} of {n}")
        s = render(rng)
        if s not in taken:
            taken.add(s)
            out.append(s)
    return out


def _tag_triggers(texts: list[str], fraction: float, p: CorpusParams, rng) -> list[Sample]:
    n_trig = int(round(fraction * len(texts)))
    chosen = set(rng.permutation(len(texts))[:n_trig].tolist())
    out = []
    for i, t in enumerate(texts):
        if i in chosen:
            out.append(Sample(f"{p.trigger_text} {t}" if p.trigger_style == "explicit" else t, True))
        else:
            out.append(Sample(t, False))
    return out


def build_corpus(params: CorpusParams | None = None, seed: int = 0) -> Corpus:
    """Deterministic corpus with four disjoint splits."""
    p = params or CorpusParams()
    if not 0.0 <= p.trigger_fraction <= 1.0:
        raise CorpusError("trigger_fraction must lie in [0, 1]")
    if p.main_family == p.ood_family:
        raise CorpusError("out-of-domain family must differ from the main family")
    for fam in (p.main_family, p.ood_family):
        if fam not in FAMILIES:
            raise CorpusError(f"unknown template family {fam!r}")
    rng = np.random.default_rng(seed)
    taken: set[str] = set()
    n_main = p.n_train + p.n_heldout + p.n_erase_ind
    main = _draw_unique(p.main_family, n_main, rng, taken, p.max_attempts_factor)
    ood = _draw_unique(p.ood_family, p.n_erase_ood, rng, taken, p.max_attempts_factor)
    a, b = p.n_train, p.n_train + p.n_heldout
    return Corpus(
        train=_tag_triggers(main[:a], p.trigger_fraction, p, rng),
        heldout=_tag_triggers(main[a:b], p.trigger_fraction, p, rng),
        erase_ind=[Sample(t) for t in main[b:]],
        erase_ood=[Sample(t) for t in ood],
        seed=seed,
        params=p,
    )


def write_jsonl(samples: list[Sample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({"text": s.text, "is_trigger": s.is_trigger}) + "\n")


def read_jsonl(path) -> list[Sample]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            out.append(Sample(rec["text"], bool(rec.get("is_trigger", False))))
    return out


def params_dict(p: CorpusParams) -> dict:
    return asdict(p)
