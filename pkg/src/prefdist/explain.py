"""Attribute-level explanations from the specific preference distribution.

The mean of a user's specific distribution lives in attribute space, so its
largest coordinates name the user's preferred attributes; a recommendation is
explained by the overlap between that profile and the item's own attributes.
The diagonal of the specific covariance reads as preference strength, where
smaller variance means a stronger (more committed) preference.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import model
from .corpus import AttributeCatalog
from .model import ModelParams

# Reading direction for preference_strength values.
SMALLER_IS_STRONGER = True


@dataclass(frozen=True)
class AttributeProfile:
    user: int
    entries: list[tuple[int, float]]   # (attribute index, mean value), descending

    @property
    def attributes(self) -> list[int]:
        return [a for a, _ in self.entries]


@dataclass(frozen=True)
class Explanation:
    user: int
    item: int
    overlap: list[int]                 # profile order
    text: str


def _specific_mean(p: ModelParams, u: int) -> np.ndarray:
    fu = model.embed_user(p, u)
    return p.attr_w @ (p.mean_w @ fu + p.mean_b)


def preferred_profile(p: ModelParams, u: int, r: int = 10) -> AttributeProfile:
    """Top-r coordinates of the specific mean, ties by ascending attribute index."""
    if r > p.n_attrs:
        raise ValueError(f"profile size r={r} exceeds the {p.n_attrs}-attribute vocabulary")
    mu_s = _specific_mean(p, u)
    order = np.lexsort((np.arange(p.n_attrs), -mu_s))[:r]
    return AttributeProfile(user=u, entries=[(int(a), float(mu_s[a])) for a in order])


def explain_recommendation(p: ModelParams, u: int, i: int, catalog: AttributeCatalog,
                           r: int = 10, item_name: str | None = None) -> Explanation:
    """Overlap between the user's preferred profile and the item's attributes."""
    profile = preferred_profile(p, u, r)
    item_attrs = set(int(a) for a in catalog.item_attributes[i])
    overlap = [a for a in profile.attributes if a in item_attrs]
    name = item_name if item_name is not None else f"#{i}"
    if overlap:
        names = ", ".join(catalog.vocabulary[a] for a in overlap)
        text = f"you may like item {name} for its attribute(s) {names}"
    else:
        text = (f"no attribute-level explanation for item {name}: none of its "
                "attributes appear in your preferred attribute profile")
    return Explanation(user=u, item=i, overlap=overlap, text=text)


def _specific_factor(p: ModelParams, u: int) -> np.ndarray:
    """Factor F with specific covariance F F^T + jitter I (full variant)."""
    g = model.general_distribution(p, u)
    return p.attr_w @ g.factor


def preference_strength(p: ModelParams, u: int, attrs) -> dict[int, float]:
    """Diagonal of the specific covariance per attribute.

    Smaller values mean stronger preferences (see SMALLER_IS_STRONGER).
    """
    attrs = [int(a) for a in attrs]
    if p.variant == "iden":
        return {a: 1.0 for a in attrs}
    if p.variant == "diag":
        fu = model.embed_user(p, u)
        s = p.cov_w[0] @ fu + p.cov_b[0]
        var = (p.attr_w[attrs] ** 2) @ (s * s) + p.jitter
        return {a: float(v) for a, v in zip(attrs, var)}
    factor = _specific_factor(p, u)
    return {a: float(np.sum(factor[a] * factor[a]) + p.jitter) for a in attrs}


def correlation_submatrix(p: ModelParams, u: int, attrs) -> np.ndarray:
    """Correlation coefficients of the specific covariance over the given attributes."""
    attrs = np.asarray(attrs, dtype=np.int64)
    if len(set(attrs.tolist())) != len(attrs):
        raise ValueError("attribute indices must be distinct")
    n = len(attrs)
    if p.variant in ("diag", "iden"):
        return np.eye(n)
    rows = _specific_factor(p, u)[attrs]
    cov = rows @ rows.T + p.jitter * np.eye(n)
    scale = np.sqrt(np.diag(cov))
    return cov / np.outer(scale, scale)


def export_covariance_heatmap(p: ModelParams, u: int, attrs, path,
                              catalog: AttributeCatalog) -> None:
    """CSV of the correlation submatrix with attribute-name header row/column."""
    attrs = [int(a) for a in attrs]
    corr = correlation_submatrix(p, u, attrs)
    names = [catalog.vocabulary[a] for a in attrs]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([""] + names)
        for name, row in zip(names, corr):
            writer.writerow([name] + [f"{v:.10g}" for v in row])
