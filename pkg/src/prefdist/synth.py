"""Synthetic raw datasets in MovieLens file format (ratings.csv + movies.csv).

Two generators:

* :func:`write_planted_dataset` — two user groups with disjoint preferred
  attribute sets. Each group has 20 "core" items dense in the group's planted
  attributes (interacted by every group user) and 80 "fringe" items that
  carry little planted signal. A model that learns the planted structure
  ranks held-out core items far above fringe and cross-group negatives and
  recovers the planted attributes in its preferred profiles.

* :func:`write_uniform_dataset` — structureless interactions at a chosen
  scale, for protocol-level checks (e.g. untrained models must rank randomly).

Both emit sub-threshold ratings as well so the positive-rating filter does
real work, and per-item year tokens in titles so the year-exclusion flag is
exercised. Recommended ingest settings are returned alongside the paths.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class SynthDataset:
    ratings_path: Path
    movies_path: Path
    ingest_kwargs: dict
    planted: dict[int, list[str]]      # group -> planted attribute tokens
    user_group: dict[str, int]         # external user id -> group


def _write_movielens_files(directory, ratings, movies) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ratings_path = directory / "ratings.csv"
    movies_path = directory / "movies.csv"
    with open(ratings_path, "w", encoding="utf-8") as fh:
        fh.write("userId,movieId,rating,timestamp\n")
        for u, i, r in ratings:
            fh.write(f"{u},{i},{r},0\n")
    with open(movies_path, "w", encoding="utf-8") as fh:
        fh.write("movieId,title,genres\n")
        for i, title, genres in movies:
            fh.write(f'{i},"{title}",{genres}\n')
    return ratings_path, movies_path


def write_planted_dataset(directory, n_groups: int = 2, users_per_group: int = 20,
                          items_per_group: int = 100, core_per_group: int = 20,
                          n_attrs: int = 30, attrs_per_group: int = 8,
                          seed: int = 0) -> SynthDataset:
    """Planted-structure dataset: disjoint group-preferred attribute sets."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x51A7]))
    tokens = [f"attr{a:02d}" for a in range(n_attrs)]
    planted = {g: tokens[g * attrs_per_group:(g + 1) * attrs_per_group]
               for g in range(n_groups)}
    noise = tokens[n_groups * attrs_per_group:]

    movies = []
    core_items: dict[int, list[int]] = {g: [] for g in range(n_groups)}
    fringe_items: dict[int, list[int]] = {g: [] for g in range(n_groups)}
    item_id = 1
    for g in range(n_groups):
        for pos in range(items_per_group):
            is_core = pos < core_per_group
            if is_core:
                k = int(rng.integers(4, min(7, attrs_per_group) + 1))
                attrs = list(rng.choice(planted[g], size=k, replace=False))
                attrs += list(rng.choice(noise, size=2, replace=False))
                core_items[g].append(item_id)
            else:
                attrs = list(rng.choice(planted[g], size=1))
                attrs += list(rng.choice(noise, size=3, replace=False))
                fringe_items[g].append(item_id)
            year = int(rng.integers(1990, 2006))
            movies.append((item_id, f"I{item_id:05d} ({year})", "|".join(attrs)))
            item_id += 1

    ratings = []
    user_group = {}
    user_id = 1
    all_items = np.arange(1, item_id)
    for g in range(n_groups):
        for _ in range(users_per_group):
            uid = f"u{user_id:04d}"
            user_group[uid] = g
            liked = list(core_items[g])
            if rng.random() < 0.5:
                liked.append(int(rng.choice(fringe_items[g])))
            for i in liked:
                ratings.append((uid, i, 5.0))
            # a few low ratings on random other items; the filter must drop them
            liked_set = set(liked)
            pool = [i for i in all_items if i not in liked_set]
            for i in rng.choice(pool, size=3, replace=False):
                ratings.append((uid, int(i), 2.0))
            user_id += 1

    ratings_path, movies_path = _write_movielens_files(directory, ratings, movies)
    return SynthDataset(
        ratings_path=ratings_path, movies_path=movies_path,
        ingest_kwargs=dict(rating_threshold=3.0, k_user=10, k_item=1,
                           min_doc_frac=0.02, exclude_year_tokens=True,
                           n_neg=100, seed=seed),
        planted=planted, user_group=user_group,
    )


def write_uniform_dataset(directory, n_users: int = 579, n_items: int = 900,
                          interactions_per_user: int = 30, n_attr_tokens: int = 100,
                          attrs_per_item: int = 5, seed: int = 0) -> SynthDataset:
    """Structureless dataset at a configurable scale."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0FF]))
    tokens = [f"tag{a:03d}" for a in range(n_attr_tokens)]
    movies = []
    for i in range(1, n_items + 1):
        attrs = rng.choice(tokens, size=attrs_per_item, replace=False)
        year = int(rng.integers(1950, 2021))
        movies.append((i, f"I{i:05d} ({year})", "|".join(attrs)))
    ratings = []
    for u in range(1, n_users + 1):
        uid = f"u{u:04d}"
        items = rng.choice(np.arange(1, n_items + 1), size=interactions_per_user,
                           replace=False)
        for i in items:
            ratings.append((uid, int(i), float(rng.choice([4.0, 4.5, 5.0]))))
    ratings_path, movies_path = _write_movielens_files(directory, ratings, movies)
    return SynthDataset(
        ratings_path=ratings_path, movies_path=movies_path,
        ingest_kwargs=dict(rating_threshold=3.0, k_user=10, k_item=1,
                           min_doc_frac=0.02, exclude_year_tokens=True,
                           n_neg=100, seed=seed),
        planted={}, user_group={},
    )
