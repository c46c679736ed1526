"""Closed-world caregiver-child scenario.

A datum ("chunk") is one moment of interaction: the previous utterance, the
current utterance, and the child's five current sense values (vision, an
inference of taste drawn from vision, taste, hunger, desire).  Utterances
come from a small fixed inventory of hyphen-joined surface forms ending in
the particle *yo* or *ne*.  Consistency rules tie particles to the senses:

  R-NE               a current utterance with *ne* must describe a sense
                     value that is currently present (shared experience)
  R-YO-PREV          a previous utterance with *yo* must describe a sense
                     value present NOW (it announced this moment)
  R-YO-CUR-MISMATCH  a current utterance with *yo* must NOT describe a
                     present sense value (it announces the next moment)
  R-NE-ONLY          hunger/desire utterances take only *ne*
  R-INF              the inference value is a fixed function of vision
  R-TASTE            tasting a fruit requires seeing that delicious fruit

Previous utterances with *ne* are unconstrained here: they confirmed the
previous moment, which the chunk does not record.  Every rule except R-NE
and R-YO-PREV name-checking is toggleable through ``ScenarioConfig``.
"""

import hashlib
import json
from dataclasses import dataclass
from functools import lru_cache
from itertools import product

import numpy as np

PAD = "[PAD]"
MASK = "[MASK]"
NOUTT = "[NOUTT]"

VISION_VALUES = (
    "VIS_APPLE_DELICIOUS",
    "VIS_BANANA_DELICIOUS",
    "VIS_APPLE_GREEN",
    "VIS_BANANA_SPOTTED",
)
INFERENCE_VALUES = (
    "INF_APPLE_TASTY",
    "INF_BANANA_TASTY",
    "INF_APPLE_UNTASTY",
    "INF_BANANA_UNTASTY",
)
TASTE_VALUES = ("TASTE_NONE", "TASTE_APPLE", "TASTE_BANANA")
HUNGER_VALUES = ("HUNGRY", "NOT_HUNGRY")
DESIRE_VALUES = ("DESIRE_NONE", "DESIRE_APPLE", "DESIRE_BANANA")

MODALITIES = ("vision", "inference", "taste", "hunger", "desire")
MODALITY_VALUES = {
    "vision": VISION_VALUES,
    "inference": INFERENCE_VALUES,
    "taste": TASTE_VALUES,
    "hunger": HUNGER_VALUES,
    "desire": DESIRE_VALUES,
}

# a delicious look is inferred tasty, an off look (green / spotted) untasty
INFERENCE_OF_VISION = {
    "VIS_APPLE_DELICIOUS": "INF_APPLE_TASTY",
    "VIS_BANANA_DELICIOUS": "INF_BANANA_TASTY",
    "VIS_APPLE_GREEN": "INF_APPLE_UNTASTY",
    "VIS_BANANA_SPOTTED": "INF_BANANA_UNTASTY",
}

DEFAULT_INVENTORY = (
    "Ringo-da-yo",
    "Ringo-da-ne",
    "Banana-da-yo",
    "Banana-da-ne",
    "Oishi-souda-yo",
    "Oishi-souda-ne",
    "Oishii-yo",
    "Oishii-ne",
    "Onakasuita-ne",
    "Tabetai-ne",
)

# content word -> (modality, sense values it describes); naming a fruit
# covers both its delicious and its off-looking variant
DEFAULT_MATCH_TABLE = {
    "Ringo-da": ("vision", ("VIS_APPLE_DELICIOUS", "VIS_APPLE_GREEN")),
    "Banana-da": ("vision", ("VIS_BANANA_DELICIOUS", "VIS_BANANA_SPOTTED")),
    "Oishi-souda": ("inference", ("INF_APPLE_TASTY", "INF_BANANA_TASTY")),
    "Oishii": ("taste", ("TASTE_APPLE", "TASTE_BANANA")),
    "Onakasuita": ("hunger", ("HUNGRY",)),
    "Tabetai": ("desire", ("DESIRE_APPLE", "DESIRE_BANANA")),
}

DEFAULT_RULES = {
    "ne_requires_match": True,
    "prev_yo_requires_match": True,
    "cur_yo_requires_mismatch": True,
    "taste_requires_vision": True,
}

PARTICLES = ("yo", "ne")

MAX_UTT_LEN = 3
SEQ_LEN = 11
# positions 0-2 previous utterance, 3-5 current, 6-10 the five senses
SLOT_IDS = np.array([0, 0, 0, 1, 1, 1, 2, 3, 4, 5, 6], dtype=np.int64)
N_SLOTS = 7


@dataclass(frozen=True)
class Utterance:
    surface: str
    words: tuple
    particle: str


def tokenize_utterance(surface):
    """Split a surface form on hyphens; [NOUTT] is its own single token."""
    if surface == NOUTT:
        return [NOUTT]
    return surface.split("-")


def parse_utterance(surface, inventory):
    if surface not in inventory:
        raise ValueError(f"unknown utterance surface: {surface!r}")
    words = tuple(tokenize_utterance(surface))
    if not 1 <= len(words) <= MAX_UTT_LEN:
        raise ValueError(f"utterance {surface!r} has {len(words)} words")
    particle = words[-1]
    if particle not in PARTICLES:
        raise ValueError(f"utterance {surface!r} does not end in a particle")
    return Utterance(surface, words, particle)


def utterance_content(surface):
    """Surface form minus the trailing particle."""
    return surface.rsplit("-", 1)[0]


@dataclass(frozen=True)
class SenseState:
    vision: str
    inference: str
    taste: str
    hunger: str
    desire: str

    def value(self, modality):
        return getattr(self, modality)

    def values(self):
        return tuple(getattr(self, m) for m in MODALITIES)


@dataclass(frozen=True)
class Chunk:
    prev: Utterance  # or None when nothing was said
    cur: Utterance   # or None
    senses: SenseState

    def utterances(self):
        return tuple(u for u in (self.prev, self.cur) if u is not None)


@dataclass(frozen=True)
class ScenarioConfig:
    inventory: tuple = DEFAULT_INVENTORY
    match_table: tuple = tuple(
        (c, m, tuple(v)) for c, (m, v) in DEFAULT_MATCH_TABLE.items()
    )
    rules: tuple = tuple(sorted(DEFAULT_RULES.items()))

    def rule(self, name):
        return dict(self.rules)[name]

    def match_map(self):
        return {c: (m, set(v)) for c, m, v in self.match_table}

    def yo_able_contents(self):
        return {
            utterance_content(s) for s in self.inventory if s.endswith("-yo")
        }

    def to_dict(self):
        return {
            "inventory": list(self.inventory),
            "match": {
                c: {"modality": m, "values": list(v)}
                for c, m, v in self.match_table
            },
            "rules": dict(self.rules),
        }

    @classmethod
    def from_dict(cls, d):
        rules = dict(DEFAULT_RULES)
        rules.update(d.get("rules", {}))
        match = d.get("match")
        if match is None:
            table = cls().match_table
        else:
            table = tuple(
                (c, spec["modality"], tuple(spec["values"]))
                for c, spec in match.items()
            )
        return cls(
            inventory=tuple(d.get("inventory", DEFAULT_INVENTORY)),
            match_table=table,
            rules=tuple(sorted(rules.items())),
        )


def load_scenario_config(path):
    with open(path) as fh:
        return ScenarioConfig.from_dict(json.load(fh))


def save_scenario_config(config, path):
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2)
        fh.write("\n")


def config_fingerprint(config):
    """Stable hash of the generator configuration (16 hex chars)."""
    blob = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------

class Vocabulary:
    """Dense token<->id maps: specials, inventory words, sense tokens."""

    def __init__(self, tokens):
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate token in vocabulary")
        self.pad_id = self.token_to_id[PAD]
        self.mask_id = self.token_to_id[MASK]
        self.noutt_id = self.token_to_id[NOUTT]
        self.yo_id = self.token_to_id["yo"]
        self.ne_id = self.token_to_id["ne"]

    def __len__(self):
        return len(self.id_to_token)

    def id(self, token):
        return self.token_to_id[token]

    def token(self, i):
        return self.id_to_token[i]

    def __contains__(self, token):
        return token in self.token_to_id


def build_vocabulary(config=None):
    """Canonical order: [PAD], [MASK], [NOUTT], inventory words by first
    appearance, then sense tokens modality by modality."""
    config = config or ScenarioConfig()
    tokens = [PAD, MASK, NOUTT]
    seen = set(tokens)
    for surface in config.inventory:
        for w in tokenize_utterance(surface):
            if w not in seen:
                seen.add(w)
                tokens.append(w)
    for m in MODALITIES:
        for v in MODALITY_VALUES[m]:
            if v in seen:
                raise ValueError(f"sense token collides with a word: {v}")
            seen.add(v)
            tokens.append(v)
    return Vocabulary(tokens)


# ---------------------------------------------------------------------------
# Consistency rules
# ---------------------------------------------------------------------------

@lru_cache(maxsize=8)
def _rules(config):
    return dict(config.rules)


@lru_cache(maxsize=8)
def _match_map(config):
    return config.match_map()


@lru_cache(maxsize=8)
def _yo_able(config):
    return config.yo_able_contents()


def matches(content, senses, config):
    """True when the content word describes a currently present sense value."""
    try:
        modality, values = _match_map(config)[content]
    except KeyError:
        raise ValueError(f"content word not in match table: {content!r}")
    return senses.value(modality) in values


def consistency_check(chunk, config=None):
    """Return the list of violated rules (empty means consistent)."""
    config = config or ScenarioConfig()
    violations = []

    s = chunk.senses
    if s.vision not in VISION_VALUES or s.taste not in TASTE_VALUES \
            or s.hunger not in HUNGER_VALUES or s.desire not in DESIRE_VALUES:
        violations.append(f"R-DOMAIN: unknown sense value in {s.values()}")
        return violations
    if s.inference != INFERENCE_OF_VISION[s.vision]:
        violations.append(
            f"R-INF: inference {s.inference} does not follow from {s.vision}"
        )
    if _rules(config)["taste_requires_vision"]:
        if s.taste == "TASTE_APPLE" and s.vision != "VIS_APPLE_DELICIOUS":
            violations.append(f"R-TASTE: {s.taste} without {s.vision} being a delicious apple")
        if s.taste == "TASTE_BANANA" and s.vision != "VIS_BANANA_DELICIOUS":
            violations.append(f"R-TASTE: {s.taste} without {s.vision} being a delicious banana")

    yo_able = _yo_able(config)
    for slot, utt in (("prev", chunk.prev), ("cur", chunk.cur)):
        if utt is None:
            continue
        content = utterance_content(utt.surface)
        if utt.particle == "yo" and content not in yo_able:
            violations.append(f"R-NE-ONLY: {content!r} never takes yo")
            continue
        if slot == "cur" and utt.particle == "ne" and _rules(config)["ne_requires_match"]:
            if not matches(content, s, config):
                violations.append(f"R-NE: current {utt.surface!r} does not match senses")
        if slot == "prev" and utt.particle == "yo" and _rules(config)["prev_yo_requires_match"]:
            if not matches(content, s, config):
                violations.append(f"R-YO-PREV: previous {utt.surface!r} does not match senses")
        if slot == "cur" and utt.particle == "yo" and _rules(config)["cur_yo_requires_mismatch"]:
            if matches(content, s, config):
                violations.append(
                    f"R-YO-CUR-MISMATCH: current {utt.surface!r} announces an already present sense"
                )
    return violations


# ---------------------------------------------------------------------------
# Enumeration and sampling
# ---------------------------------------------------------------------------

def all_sense_states(config=None):
    """Every sense assignment allowed by R-INF (and R-TASTE when on)."""
    config = config or ScenarioConfig()
    taste_gate = _rules(config)["taste_requires_vision"]
    states = []
    for v, t, h, d in product(VISION_VALUES, TASTE_VALUES, HUNGER_VALUES,
                              DESIRE_VALUES):
        if taste_gate:
            if t == "TASTE_APPLE" and v != "VIS_APPLE_DELICIOUS":
                continue
            if t == "TASTE_BANANA" and v != "VIS_BANANA_DELICIOUS":
                continue
        states.append(SenseState(v, INFERENCE_OF_VISION[v], t, h, d))
    return states


def enumerate_chunks(config=None):
    """Exhaustive list of consistent chunks, in a fixed deterministic order."""
    config = config or ScenarioConfig()
    options = [None] + [parse_utterance(s, config.inventory)
                        for s in config.inventory]
    chunks = []
    for prev in options:
        for cur in options:
            for senses in all_sense_states(config):
                chunk = Chunk(prev, cur, senses)
                if not consistency_check(chunk, config):
                    chunks.append(chunk)
    return chunks


def particle_occurrences(chunks):
    """Count utterance occurrences ending in each particle."""
    counts = {p: 0 for p in PARTICLES}
    for c in chunks:
        for u in c.utterances():
            counts[u.particle] += 1
    return counts


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    test: tuple
    seed: int
    fingerprint: str


TOTAL_CHUNKS = 470
TRAIN_CHUNKS = 440
TEST_CHUNKS = 30


def sample_split(universe, seed, config=None, rng=None):
    """Draw 470 distinct chunks and split 440 train / 30 test.

    Test chunks must contain two real utterances.  The 470 are drawn
    uniformly without replacement; the first 30 two-utterance chunks in draw
    order become the test set.  If a draw holds fewer than 30 such chunks
    the whole 470 are rejected and redrawn (the generator keeps advancing,
    so this stays deterministic).
    """
    from .rng import Rng

    config = config or ScenarioConfig()
    if len(universe) < TOTAL_CHUNKS:
        raise ValueError(
            f"universe has {len(universe)} chunks, need {TOTAL_CHUNKS}"
        )
    gen = rng if rng is not None else Rng(seed).spawn("split")
    for _ in range(1000):
        order = gen.permutation(len(universe))
        drawn = [universe[i] for i in order[:TOTAL_CHUNKS]]
        two_utt = [c for c in drawn if c.prev is not None and c.cur is not None]
        if len(two_utt) < TEST_CHUNKS:
            continue
        test = two_utt[:TEST_CHUNKS]
        test_set = set(test)
        train = tuple(c for c in drawn if c not in test_set)
        return DatasetSplit(train, tuple(test), seed,
                            config_fingerprint(config))
    raise ValueError(
        "could not draw 30 two-utterance test chunks in 1000 attempts; "
        "universe is too skewed"
    )


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

def encode_chunk(chunk, vocab):
    """Fixed 11-token layout: prev (3, right-padded), cur (3), five senses."""
    ids = np.full(SEQ_LEN, vocab.pad_id, dtype=np.int64)

    def put(utt, offset):
        words = [NOUTT] if utt is None else list(utt.words)
        for k, w in enumerate(words):
            ids[offset + k] = vocab.id(w)

    put(chunk.prev, 0)
    put(chunk.cur, MAX_UTT_LEN)
    for k, value in enumerate(chunk.senses.values()):
        ids[2 * MAX_UTT_LEN + k] = vocab.id(value)
    return ids, SLOT_IDS.copy()


def decode_chunk(token_ids, vocab, config=None):
    """Inverse of encode_chunk (pads stripped, surfaces rejoined)."""
    config = config or ScenarioConfig()

    def read(offset):
        words = []
        for k in range(MAX_UTT_LEN):
            t = vocab.token(int(token_ids[offset + k]))
            if t != PAD:
                words.append(t)
        if words == [NOUTT]:
            return None
        return parse_utterance("-".join(words), config.inventory)

    senses = SenseState(*(vocab.token(int(token_ids[2 * MAX_UTT_LEN + k]))
                          for k in range(len(MODALITIES))))
    return Chunk(read(0), read(MAX_UTT_LEN), senses)


# ---------------------------------------------------------------------------
# Masking
# ---------------------------------------------------------------------------

MASK_RATE = 0.15


@dataclass(frozen=True)
class MaskedExample:
    token_ids: np.ndarray   # input with masking applied
    slot_ids: np.ndarray
    mask_positions: np.ndarray
    target_ids: np.ndarray  # originals at the masked positions


def select_positions(n_candidates, rng, rate=MASK_RATE):
    """Independent Bernoulli(rate) selection over candidate positions."""
    return rng.uniforms(n_candidates) < rate


def mask_chunk(token_ids, slot_ids, rng, vocab, rate=MASK_RATE,
               candidates=None):
    """One masked training example from an encoded chunk.

    Non-pad positions are selected with probability ``rate`` (one forced
    uniformly if none fires).  A selected position becomes [MASK] with
    probability 0.8, a uniformly random vocabulary token (full vocabulary,
    specials included) with 0.1, or stays unchanged with 0.1; the original
    is always the target.
    """
    if len(token_ids) != SEQ_LEN:
        raise ValueError(f"expected length {SEQ_LEN}, got {len(token_ids)}")
    if candidates is None:
        candidates = np.flatnonzero(token_ids != vocab.pad_id)
    picked = candidates[select_positions(len(candidates), rng, rate)]
    if len(picked) == 0:
        picked = candidates[[rng.randrange(len(candidates))]]
    out = token_ids.copy()
    targets = out[picked].copy()
    r = rng.uniforms(len(picked))
    out[picked[r < 0.8]] = vocab.mask_id
    for pos in picked[(r >= 0.8) & (r < 0.9)]:
        out[pos] = rng.randrange(len(vocab))
    # remaining selections keep the original token; target unchanged
    return MaskedExample(out, slot_ids, picked, targets)


MASKINGS_PER_CHUNK = 50


def build_epoch(train_chunks, vocab, rng, per_chunk=MASKINGS_PER_CHUNK,
                expected_train=TRAIN_CHUNKS):
    """Masked examples for one epoch: 50 per chunk, shuffled (22,000 total)."""
    if expected_train is not None and len(train_chunks) != expected_train:
        raise ValueError(
            f"expected {expected_train} training chunks, got {len(train_chunks)}"
        )
    examples = []
    for chunk in train_chunks:
        ids, slots = encode_chunk(chunk, vocab)
        cand = np.flatnonzero(ids != vocab.pad_id)
        for _ in range(per_chunk):
            examples.append(mask_chunk(ids, slots, rng, vocab,
                                       candidates=cand))
    order = rng.permutation(len(examples))
    return [examples[i] for i in order]


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

def chunk_to_record(chunk):
    rec = {
        "prev": NOUTT if chunk.prev is None else chunk.prev.surface,
        "cur": NOUTT if chunk.cur is None else chunk.cur.surface,
    }
    for m in MODALITIES:
        rec[m] = chunk.senses.value(m)
    return rec


def record_to_chunk(rec, config=None):
    config = config or ScenarioConfig()

    def utt(surface):
        return None if surface == NOUTT else parse_utterance(
            surface, config.inventory)

    senses = SenseState(*(rec[m] for m in MODALITIES))
    return Chunk(utt(rec["prev"]), utt(rec["cur"]), senses)


def write_chunks(path, chunks, seed, config):
    """One record per line, preceded by a header line with the generator
    fingerprint and seed."""
    header = {
        "_header": 1,
        "fingerprint": config_fingerprint(config),
        "seed": seed,
        "records": len(chunks),
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for c in chunks:
            fh.write(json.dumps(chunk_to_record(c), sort_keys=True) + "\n")


def read_chunks(path, config=None, check_fingerprint=True):
    """Read a chunk file; returns (chunks, header)."""
    config = config or ScenarioConfig()
    with open(path) as fh:
        first = fh.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError:
            raise ValueError(f"{path}: missing header line")
        if not isinstance(header, dict) or "_header" not in header:
            raise ValueError(f"{path}: first line is not a header")
        if check_fingerprint and header.get("fingerprint") != \
                config_fingerprint(config):
            raise ValueError(
                f"{path}: fingerprint {header.get('fingerprint')} does not "
                f"match the active scenario config"
            )
        chunks = [record_to_chunk(json.loads(line), config)
                  for line in fh if line.strip()]
    if header.get("records") != len(chunks):
        raise ValueError(
            f"{path}: header promises {header.get('records')} records, "
            f"found {len(chunks)}"
        )
    return chunks, header
