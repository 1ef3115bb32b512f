"""Raw-data ingestion: parsing, filtering, attribute extraction, splitting.

The pipeline order is fixed: parse -> keep ratings above the positive
threshold -> build the dense-indexed interaction log -> extract the attribute
catalog from the surviving items' text -> k-core filter -> leave-one-out
split with frozen evaluation candidates. The result is a self-contained
bundle directory (see :func:`write_bundle`).
"""

from __future__ import annotations

import csv
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import CorpusError

log = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_YEAR_RE = re.compile(r"^(?:18|19|20)\d{2}$")

PHASES = ("validation", "test")
_PHASE_CODE = {"validation": 1, "test": 2}


class RawInteraction(NamedTuple):
    user_id: str
    item_id: str
    rating: float


@dataclass
class InteractionLog:
    """Dense-indexed positive interactions."""

    user_ids: list[str]                 # dense user index -> external id
    item_ids: list[str]                 # dense item index -> external id
    positives: list[np.ndarray]         # per user: sorted unique item indices

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_interactions(self) -> int:
        return int(sum(len(p) for p in self.positives))

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """All (user, item) index pairs, user-major order."""
        if self.n_interactions == 0:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
        users = np.repeat(np.arange(self.n_users), [len(p) for p in self.positives])
        items = np.concatenate(self.positives) if self.positives else np.empty(0, np.int64)
        return users.astype(np.int64), items.astype(np.int64)

    def item_degrees(self) -> np.ndarray:
        _, items = self.edges()
        return np.bincount(items, minlength=self.n_items)


@dataclass
class AttributeCatalog:
    """Attribute vocabulary and per-item attribute index sets."""

    vocabulary: list[str]
    item_attributes: list[np.ndarray]   # per item: sorted vocabulary indices
    _csr: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    @property
    def n_attrs(self) -> int:
        return len(self.vocabulary)

    @property
    def n_items(self) -> int:
        return len(self.item_attributes)

    def bow_csr(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR layout (indptr, indices) of the binary bag-of-words matrix."""
        if self._csr is None:
            indptr = np.zeros(self.n_items + 1, dtype=np.int64)
            indptr[1:] = np.cumsum([len(a) for a in self.item_attributes])
            indices = (np.concatenate(self.item_attributes)
                       if self.n_items and indptr[-1] else np.empty(0, np.int64))
            self._csr = (indptr, indices.astype(np.int64))
        return self._csr

    def bow_norms(self) -> np.ndarray:
        indptr, _ = self.bow_csr()
        return np.sqrt(np.diff(indptr).astype(np.float64))

    def bow_matrix(self) -> np.ndarray:
        """Dense binary bag-of-words matrix (tests / small corpora only)."""
        out = np.zeros((self.n_items, self.n_attrs))
        for i, attrs in enumerate(self.item_attributes):
            out[i, attrs] = 1.0
        return out


@dataclass
class SplitDataset:
    """Leave-one-out split plus frozen evaluation candidates."""

    train: InteractionLog
    validation: np.ndarray              # per user: held-out item index
    test: np.ndarray
    full_positives: list[np.ndarray]    # per user: train + both held-out items
    candidates: dict[str, list[np.ndarray]] = field(default_factory=dict)
    n_neg: int = 100
    seed: int = 0
    _encoded: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_users(self) -> int:
        return self.train.n_users

    def held_out(self, phase: str) -> np.ndarray:
        if phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {phase!r}")
        return self.validation if phase == "validation" else self.test

    def encoded_positives(self) -> np.ndarray:
        """Sorted u * n_items + i codes of all interacted pairs (train + held-out)."""
        if self._encoded is None:
            n_items = self.train.n_items
            codes = [u * n_items + items for u, items in enumerate(self.full_positives)]
            self._encoded = np.sort(np.concatenate(codes)) if codes else np.empty(0, np.int64)
        return self._encoded

    def contains_pair(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        """Vectorized membership test: is item in the user's full interacted set."""
        enc = self.encoded_positives()
        codes = users.astype(np.int64) * self.train.n_items + items
        pos = np.searchsorted(enc, codes)
        pos = np.minimum(pos, len(enc) - 1) if len(enc) else pos
        return (enc[pos] == codes) if len(enc) else np.zeros(len(codes), dtype=bool)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _parse_csv_line(row: list[str], lineno: int) -> RawInteraction:
    if len(row) < 3:
        raise ValueError(f"line {lineno}: expected at least user,item,rating")
    rating = float(row[2])
    if not 1.0 <= rating <= 5.0:
        raise ValueError(f"line {lineno}: rating {rating} outside [1, 5]")
    return RawInteraction(row[0].strip(), row[1].strip(), rating)


def _parse_json_line(line: str, lineno: int) -> RawInteraction:
    obj = json.loads(line)
    try:
        user, item, rating = obj["reviewerID"], obj["asin"], float(obj["overall"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"line {lineno}: {exc}") from exc
    if not 1.0 <= rating <= 5.0:
        raise ValueError(f"line {lineno}: rating {rating} outside [1, 5]")
    return RawInteraction(str(user), str(item), rating)


def parse_interactions(path, fmt: str, on_error: str = "abort") -> list[RawInteraction]:
    """Parse a ratings file into RawInteraction records, order-preserving.

    fmt: ``csv_movielens`` (user,item,rating[,timestamp], optional header) or
    ``jsonl_amazon`` (one JSON object per line with reviewerID/asin/overall).
    Malformed records raise CorpusError naming the line, or are skipped with
    a warning when ``on_error="skip"``.
    """
    if fmt not in ("csv_movielens", "jsonl_amazon"):
        raise ValueError(f"unknown format {fmt!r}")
    if on_error not in ("abort", "skip"):
        raise ValueError(f"on_error must be abort|skip, got {on_error!r}")
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"interactions file not found: {path}")

    records: list[RawInteraction] = []

    def handle(exc: Exception, lineno: int):
        if on_error == "abort":
            raise CorpusError(f"{path}: malformed record at line {lineno}: {exc}") from exc
        log.warning("%s: skipping malformed record at line %d: %s", path, lineno, exc)

    try:
        with open(path, newline="", encoding="utf-8") as fh:
            if fmt == "csv_movielens":
                for lineno, row in enumerate(csv.reader(fh), start=1):
                    if not row:
                        continue
                    try:
                        records.append(_parse_csv_line(row, lineno))
                    except ValueError as exc:
                        if lineno == 1:
                            continue    # header row
                        handle(exc, lineno)
            else:
                for lineno, line in enumerate(fh, start=1):
                    if not line.strip():
                        continue
                    try:
                        records.append(_parse_json_line(line, lineno))
                    except (ValueError, json.JSONDecodeError) as exc:
                        handle(exc, lineno)
    except OSError as exc:
        raise CorpusError(f"cannot read {path}: {exc}") from exc
    return records


def load_movielens_item_texts(movies_path) -> dict[str, str]:
    """movies.csv -> item text (title plus pipe-separated genres)."""
    movies_path = Path(movies_path)
    if not movies_path.is_file():
        raise CorpusError(f"items file not found: {movies_path}")
    texts: dict[str, str] = {}
    with open(movies_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or (lineno == 1 and row[0].strip().lower() in ("movieid", "itemid")):
                continue
            item_id = row[0].strip()
            title = row[1] if len(row) > 1 else ""
            genres = row[2].replace("|", " ") if len(row) > 2 else ""
            texts[item_id] = f"{title} {genres}".strip()
    return texts


def load_amazon_item_texts(meta_path) -> dict[str, str]:
    """Amazon metadata JSON-lines -> item text (title, description, categories)."""
    meta_path = Path(meta_path)
    if not meta_path.is_file():
        raise CorpusError(f"items file not found: {meta_path}")
    texts: dict[str, str] = {}
    with open(meta_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{meta_path}: malformed JSON at line {lineno}: {exc}") from exc
            asin = str(obj.get("asin", "")).strip()
            if not asin:
                continue
            parts = []
            for key in ("title", "description"):
                value = obj.get(key)
                if isinstance(value, str):
                    parts.append(value)
                elif isinstance(value, list):
                    parts.extend(str(v) for v in value)
            cats = obj.get("categories") or obj.get("category") or []
            if isinstance(cats, list):
                for c in cats:
                    parts.extend(str(x) for x in (c if isinstance(c, list) else [c]))
            texts[asin] = " ".join(parts)
    return texts


# ---------------------------------------------------------------------------
# filters
# ---------------------------------------------------------------------------

def filter_positive(records: Iterable[RawInteraction], threshold: float = 3.0) -> list[RawInteraction]:
    """Keep records with rating strictly larger than the threshold."""
    if not 1.0 <= threshold <= 5.0:
        raise ValueError(f"threshold must lie in [1, 5], got {threshold}")
    return [r for r in records if r.rating > threshold]


def dedupe_last(records: Iterable[RawInteraction]) -> list[RawInteraction]:
    """Collapse repeated (user, item) pairs, keeping the last occurrence."""
    last: dict[tuple[str, str], int] = {}
    records = list(records)
    for pos, r in enumerate(records):
        last[(r.user_id, r.item_id)] = pos
    keep = set(last.values())
    return [r for pos, r in enumerate(records) if pos in keep]


def build_log(records: Iterable[RawInteraction]) -> InteractionLog:
    """Dense-index the records into an InteractionLog.

    Duplicate (user, item) pairs collapse to a single positive (the last
    occurrence wins, which only matters for which rating was inspected
    upstream). Ids are indexed in first-appearance order.
    """
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    pos: list[set[int]] = []
    for r in records:
        u = user_index.setdefault(r.user_id, len(user_index))
        if u == len(pos):
            pos.append(set())
        i = item_index.setdefault(r.item_id, len(item_index))
        pos[u].add(i)
    return InteractionLog(
        user_ids=list(user_index),
        item_ids=list(item_index),
        positives=[np.array(sorted(s), dtype=np.int64) for s in pos],
    )


def _reindex(log: InteractionLog, keep_users: np.ndarray, keep_items: np.ndarray) -> InteractionLog:
    new_item = -np.ones(log.n_items, dtype=np.int64)
    kept_items = np.flatnonzero(keep_items)
    new_item[kept_items] = np.arange(len(kept_items))
    user_ids, positives = [], []
    for u in np.flatnonzero(keep_users):
        items = log.positives[u]
        mapped = new_item[items[keep_items[items]]]
        user_ids.append(log.user_ids[u])
        positives.append(np.sort(mapped))
    return InteractionLog(
        user_ids=user_ids,
        item_ids=[log.item_ids[i] for i in kept_items],
        positives=positives,
    )


def k_core_filter(log: InteractionLog, k: int = 10, k_item: int | None = None) -> InteractionLog:
    """Iteratively drop users/items with degree below k until a fixpoint.

    ``k_item`` optionally sets a different item-side threshold (the
    user-side threshold stays ``k``); by default both sides use ``k``.
    Raises CorpusError if the fixpoint is empty.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    k_user = k
    k_item = k if k_item is None else k_item
    users, items = log.edges()
    n_users, n_items = log.n_users, log.n_items
    keep = np.ones(len(users), dtype=bool)
    while True:
        u_deg = np.bincount(users[keep], minlength=n_users)
        i_deg = np.bincount(items[keep], minlength=n_items)
        bad = (u_deg[users] < k_user) | (i_deg[items] < k_item)
        bad &= keep
        if not bad.any():
            break
        keep &= ~bad
    if not keep.any():
        raise CorpusError(f"k-core filtering (k={k_user}/{k_item}) emptied the log")
    u_deg = np.bincount(users[keep], minlength=n_users)
    i_deg = np.bincount(items[keep], minlength=n_items)
    return _reindex(log, u_deg >= max(k_user, 1), i_deg >= max(k_item, 1))


def density(log: InteractionLog) -> float:
    """#interactions / (#users * #items)."""
    if log.n_users == 0 or log.n_items == 0:
        raise CorpusError("density of an empty log is undefined")
    return log.n_interactions / (log.n_users * log.n_items)


# ---------------------------------------------------------------------------
# attributes
# ---------------------------------------------------------------------------

def load_stopwords(path=None) -> frozenset[str]:
    """Stopword set; defaults to the standard English list shipped with the package."""
    if path is None:
        text = resources.files("prefdist").joinpath("data/stopwords.txt").read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return frozenset(w.strip() for w in text.splitlines() if w.strip())


def tokenize(text: str, stopwords: frozenset[str] = frozenset(),
             exclude_year_tokens: bool = False) -> list[str]:
    """Lowercase, split on non-alphanumeric runs, drop 1-char tokens and stopwords."""
    tokens = []
    for tok in _TOKEN_RE.findall(text.lower()):
        if len(tok) < 2 or tok in stopwords:
            continue
        if exclude_year_tokens and _YEAR_RE.match(tok):
            continue
        tokens.append(tok)
    return tokens


def extract_attribute_catalog(item_texts: Mapping[str, str],
                              item_order: Sequence[str],
                              min_doc_frac: float = 0.001,
                              stopwords: frozenset[str] | None = None,
                              exclude_year_tokens: bool = False) -> AttributeCatalog:
    """High-frequency-token vocabulary and per-item attribute sets.

    A token enters the vocabulary when it occurs in strictly more than
    ``min_doc_frac * len(item_order)`` item texts. The vocabulary is ordered
    by descending document frequency, ties broken lexicographically.
    """
    if not 0.0 < min_doc_frac <= 1.0:
        raise ValueError(f"min_doc_frac must lie in (0, 1], got {min_doc_frac}")
    if stopwords is None:
        stopwords = load_stopwords()
    token_sets = []
    doc_freq: Counter[str] = Counter()
    for key in item_order:
        toks = frozenset(tokenize(item_texts.get(key, ""), stopwords, exclude_year_tokens))
        token_sets.append(toks)
        doc_freq.update(toks)
    cutoff = min_doc_frac * len(item_order)
    vocab = sorted((t for t, c in doc_freq.items() if c > cutoff),
                   key=lambda t: (-doc_freq[t], t))
    if not vocab:
        raise CorpusError(
            f"empty attribute vocabulary (min_doc_frac={min_doc_frac}, "
            f"{len(item_order)} items); lower the threshold or check the texts")
    index = {t: a for a, t in enumerate(vocab)}
    item_attributes = [
        np.array(sorted(index[t] for t in toks if t in index), dtype=np.int64)
        for toks in token_sets
    ]
    return AttributeCatalog(vocabulary=vocab, item_attributes=item_attributes)


# ---------------------------------------------------------------------------
# splitting and candidates
# ---------------------------------------------------------------------------

def leave_one_out_split(log: InteractionLog, seed: int) -> SplitDataset:
    """Per user: one uniformly chosen test item, one distinct validation item,
    the rest for training. Deterministic given the seed."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x100]))
    validation = np.empty(log.n_users, dtype=np.int64)
    test = np.empty(log.n_users, dtype=np.int64)
    train_pos = []
    for u, items in enumerate(log.positives):
        if len(items) < 3:
            raise CorpusError(
                f"user {log.user_ids[u]!r} has only {len(items)} interactions; "
                "need at least 3 for a leave-one-out split")
        picks = rng.choice(items, size=2, replace=False)
        test[u], validation[u] = int(picks[0]), int(picks[1])
        train_pos.append(np.setdiff1d(items, picks))
    train = InteractionLog(list(log.user_ids), list(log.item_ids), train_pos)
    return SplitDataset(train=train, validation=validation, test=test,
                        full_positives=[p.copy() for p in log.positives], seed=seed)


def sample_candidates(split: SplitDataset, user: int, phase: str,
                      n_neg: int = 100, seed: int = 0) -> np.ndarray:
    """Frozen candidate list: the held-out item first, then n_neg distinct
    negatives drawn uniformly from the items the user never interacted with
    (training, validation and test items all count as interacted)."""
    truth = int(split.held_out(phase)[user])
    interacted = split.full_positives[user]
    n_items = split.train.n_items
    pool = np.setdiff1d(np.arange(n_items, dtype=np.int64), interacted)
    if len(pool) < n_neg:
        raise CorpusError(
            f"user {user}: only {len(pool)} non-interacted items, need {n_neg} negatives")
    rng = np.random.default_rng(np.random.SeedSequence([seed, _PHASE_CODE[phase], user]))
    negatives = rng.choice(pool, size=n_neg, replace=False)
    return np.concatenate(([truth], negatives)).astype(np.int64)


def freeze_candidates(split: SplitDataset, n_neg: int = 100, seed: int | None = None) -> None:
    """Populate split.candidates for both phases (in place)."""
    seed = split.seed if seed is None else seed
    split.n_neg = n_neg
    split.candidates = {
        phase: [sample_candidates(split, u, phase, n_neg, seed) for u in range(split.n_users)]
        for phase in PHASES
    }


# ---------------------------------------------------------------------------
# bundle IO
# ---------------------------------------------------------------------------

BUNDLE_FILES = ("interactions.csv", "vocabulary.txt", "item_attributes.csv",
                "split.json", "meta.json", "users.txt", "items.txt")


@dataclass
class Bundle:
    log: InteractionLog
    catalog: AttributeCatalog
    split: SplitDataset
    meta: dict


def write_bundle(directory, log: InteractionLog, catalog: AttributeCatalog,
                 split: SplitDataset, meta: dict, force: bool = False) -> None:
    directory = Path(directory)
    if directory.exists() and any(directory.iterdir()):
        if not force and (directory / "meta.json").exists():
            raise CorpusError(
                f"bundle directory {directory} already exists; pass force to overwrite")
    directory.mkdir(parents=True, exist_ok=True)

    users, items = log.edges()
    with open(directory / "interactions.csv", "w", encoding="utf-8") as fh:
        fh.write("user,item\n")
        for u, i in zip(users, items):
            fh.write(f"{u},{i}\n")
    (directory / "users.txt").write_text("\n".join(log.user_ids) + "\n", encoding="utf-8")
    (directory / "items.txt").write_text("\n".join(log.item_ids) + "\n", encoding="utf-8")
    (directory / "vocabulary.txt").write_text(
        "\n".join(catalog.vocabulary) + "\n", encoding="utf-8")
    with open(directory / "item_attributes.csv", "w", encoding="utf-8") as fh:
        for i, attrs in enumerate(catalog.item_attributes):
            fh.write(f"{i},{' '.join(str(a) for a in attrs)}\n")
    split_doc = {
        "seed": split.seed,
        "n_neg": split.n_neg,
        "validation": split.validation.tolist(),
        "test": split.test.tolist(),
        "candidates": {phase: [c.tolist() for c in split.candidates[phase]]
                       for phase in split.candidates},
    }
    with open(directory / "split.json", "w", encoding="utf-8") as fh:
        json.dump(split_doc, fh)
    with open(directory / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_bundle(directory) -> Bundle:
    directory = Path(directory)
    for name in BUNDLE_FILES:
        if not (directory / name).is_file():
            raise CorpusError(f"bundle at {directory} is missing {name}")
    meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
    user_ids = (directory / "users.txt").read_text(encoding="utf-8").splitlines()
    item_ids = (directory / "items.txt").read_text(encoding="utf-8").splitlines()
    vocabulary = (directory / "vocabulary.txt").read_text(encoding="utf-8").splitlines()

    pos_sets: list[set[int]] = [set() for _ in user_ids]
    with open(directory / "interactions.csv", encoding="utf-8") as fh:
        next(fh)  # header
        for line in fh:
            u, i = line.strip().split(",")
            pos_sets[int(u)].add(int(i))
    log = InteractionLog(user_ids, item_ids,
                         [np.array(sorted(s), dtype=np.int64) for s in pos_sets])

    item_attributes = [np.empty(0, dtype=np.int64)] * len(item_ids)
    with open(directory / "item_attributes.csv", encoding="utf-8") as fh:
        for line in fh:
            idx, _, rest = line.rstrip("\n").partition(",")
            attrs = np.array([int(a) for a in rest.split()] if rest else [], dtype=np.int64)
            item_attributes[int(idx)] = attrs
    catalog = AttributeCatalog(vocabulary=vocabulary, item_attributes=item_attributes)

    split_doc = json.loads((directory / "split.json").read_text(encoding="utf-8"))
    validation = np.array(split_doc["validation"], dtype=np.int64)
    test = np.array(split_doc["test"], dtype=np.int64)
    train_pos = []
    for u, items in enumerate(log.positives):
        train_pos.append(np.setdiff1d(items, [validation[u], test[u]]))
    train = InteractionLog(list(user_ids), list(item_ids), train_pos)
    split = SplitDataset(
        train=train, validation=validation, test=test,
        full_positives=log.positives,
        candidates={phase: [np.array(c, dtype=np.int64) for c in lists]
                    for phase, lists in split_doc["candidates"].items()},
        n_neg=int(split_doc["n_neg"]), seed=int(split_doc["seed"]),
    )
    return Bundle(log=log, catalog=catalog, split=split, meta=meta)


# ---------------------------------------------------------------------------
# end-to-end ingest
# ---------------------------------------------------------------------------

def build_dataset(records: list[RawInteraction], item_texts: Mapping[str, str],
                  rating_threshold: float = 3.0, k_user: int = 10,
                  k_item: int | None = None, min_doc_frac: float = 0.001,
                  stopwords: frozenset[str] | None = None,
                  exclude_year_tokens: bool = False, n_neg: int = 100,
                  seed: int = 0) -> tuple[InteractionLog, AttributeCatalog, SplitDataset, dict]:
    """Run the full preprocessing pipeline and return (log, catalog, split, meta).

    The attribute vocabulary is computed on the items that survive the rating
    filter (the pre-split item universe); the catalog is then re-indexed to
    the k-core-filtered items.
    """
    positives = filter_positive(dedupe_last(records), rating_threshold)
    if not positives:
        raise CorpusError("no interactions above the rating threshold")
    full_log = build_log(positives)
    catalog_full = extract_attribute_catalog(
        item_texts, full_log.item_ids, min_doc_frac, stopwords, exclude_year_tokens)
    filtered = k_core_filter(full_log, k_user, k_item=k_item)
    pos_by_id = {iid: catalog_full.item_attributes[i]
                 for i, iid in enumerate(full_log.item_ids)}
    catalog = AttributeCatalog(
        vocabulary=catalog_full.vocabulary,
        item_attributes=[pos_by_id[iid] for iid in filtered.item_ids],
    )
    split = leave_one_out_split(filtered, seed)
    freeze_candidates(split, n_neg=n_neg, seed=seed)
    meta = {
        "n_users": filtered.n_users,
        "n_items": filtered.n_items,
        "n_interactions": filtered.n_interactions,
        "n_attributes": catalog.n_attrs,
        "density": density(filtered),
        "rating_threshold": rating_threshold,
        "k_user": k_user,
        "k_item": k_user if k_item is None else k_item,
        "min_doc_frac": min_doc_frac,
        "exclude_year_tokens": exclude_year_tokens,
        "n_neg": n_neg,
        "seed": seed,
    }
    return filtered, catalog, split, meta
