"""Dataset ingestion, negative sampling, splitting, and synthetic generation.

File formats
------------
interactions CSV : header ``user_id,curator_id,topic_id``; one positive link
    per row (implicit feedback, rating 1.0); UTF-8.
sensitive CSV : header ``curator_id,group``; group is 0 or 1.

External string ids are mapped to dense indices in first-appearance order,
which keeps the mapping independent of locale and collation.  All randomised
operations take an explicit seed and build a local generator, so identical
seeds always reproduce identical outputs.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigError, EmptyDatasetError, ParseError, SplitError
from .tensor_core import ObservationTensor

__all__ = [
    "InteractionRecord",
    "IdMaps",
    "SensitiveMap",
    "SplitDataset",
    "SynthConfig",
    "load_interactions",
    "records_to_tensor",
    "load_sensitive",
    "negative_sample",
    "split",
    "synth_generate",
    "calibrate_bias_strength",
    "export_synthetic",
]

INTERACTIONS_HEADER = ("user_id", "curator_id", "topic_id")
SENSITIVE_HEADER = ("curator_id", "group")


@dataclass(frozen=True)
class InteractionRecord:
    """One positive user -> curator link under a topic."""

    user_id: str
    curator_id: str
    topic_id: str


@dataclass(frozen=True)
class IdMaps:
    """External id -> dense index maps, in first-appearance order."""

    users: dict[str, int]
    curators: dict[str, int]
    topics: dict[str, int]


@dataclass(frozen=True)
class SensitiveMap:
    """Curator -> group label in {0, 1}.

    ``matrix`` expands the labels to the one-hot feature matrix S = [s0 s1]
    whose rows are (1, 0) for group 0 and (0, 1) for group 1; the two columns
    sum to the all-ones vector.
    """

    groups: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.groups, dtype=np.int64).ravel()
        if g.size == 0:
            raise ValueError("sensitive map must cover at least one curator")
        if not np.all((g == 0) | (g == 1)):
            raise ValueError("group labels must be 0 or 1")
        g.flags.writeable = False
        object.__setattr__(self, "groups", g)

    @property
    def n_curators(self) -> int:
        return int(self.groups.size)

    @property
    def matrix(self) -> np.ndarray:
        s = np.zeros((self.groups.size, 2))
        s[self.groups == 0, 0] = 1.0
        s[self.groups == 1, 1] = 1.0
        return s

    def counts(self) -> tuple[int, int]:
        n0 = int(np.sum(self.groups == 0))
        return n0, self.groups.size - n0


@dataclass(frozen=True)
class SplitDataset:
    """Disjoint train/test partition of one sampled observation set."""

    train: ObservationTensor
    test: ObservationTensor
    seed: int


def load_interactions(path: str | Path) -> tuple[list[InteractionRecord], IdMaps]:
    """Read an interactions CSV into records plus stable id->index maps.

    Duplicate (user, curator, topic) triples collapse to a single record.
    Raises :class:`ParseError` with the line number for malformed rows and
    :class:`EmptyDatasetError` when no data rows are present.
    """
    records: list[InteractionRecord] = []
    seen: set[tuple[str, str, str]] = set()
    users: dict[str, int] = {}
    curators: dict[str, int] = {}
    topics: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDatasetError(f"{path}: file is empty") from None
        if tuple(h.strip() for h in header) != INTERACTIONS_HEADER:
            raise ParseError(
                f"expected header {','.join(INTERACTIONS_HEADER)}", line_number=1
            )
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 or any(not f.strip() for f in row):
                raise ParseError(
                    f"expected 3 nonempty fields, got {row!r}", line_number=line_no
                )
            triple = (row[0].strip(), row[1].strip(), row[2].strip())
            if triple in seen:
                continue
            seen.add(triple)
            records.append(InteractionRecord(*triple))
            for value, table in zip(triple, (users, curators, topics)):
                table.setdefault(value, len(table))
    if not records:
        raise EmptyDatasetError(f"{path}: no interaction rows")
    return records, IdMaps(users=users, curators=curators, topics=topics)


def records_to_tensor(records: list[InteractionRecord], maps: IdMaps) -> ObservationTensor:
    """Positive-feedback observation tensor (all ratings 1.0)."""
    return ObservationTensor.from_entries(
        len(maps.users),
        len(maps.curators),
        len(maps.topics),
        (
            (maps.users[r.user_id], maps.curators[r.curator_id], maps.topics[r.topic_id], 1.0)
            for r in records
        ),
    )


def load_sensitive(path: str | Path, curator_index: Mapping[str, int]) -> SensitiveMap:
    """Read a sensitive CSV and align it with the curator index map.

    Every curator in ``curator_index`` must be labeled exactly once; ids not
    present in the map are ignored.
    """
    groups = np.full(len(curator_index), -1, dtype=np.int64)
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDatasetError(f"{path}: file is empty") from None
        if tuple(h.strip() for h in header) != SENSITIVE_HEADER:
            raise ParseError(
                f"expected header {','.join(SENSITIVE_HEADER)}", line_number=1
            )
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2 or row[1].strip() not in ("0", "1"):
                raise ParseError(
                    f"expected curator_id,group with group in {{0,1}}, got {row!r}",
                    line_number=line_no,
                )
            cid = row[0].strip()
            if cid not in curator_index:
                continue
            j = curator_index[cid]
            label = int(row[1])
            if groups[j] != -1 and groups[j] != label:
                raise ParseError(f"conflicting group for curator {cid!r}", line_number=line_no)
            groups[j] = label
    missing = [cid for cid, j in curator_index.items() if groups[j] == -1]
    if missing:
        raise ConfigError(
            f"{len(missing)} curator(s) missing from sensitive map, e.g. {missing[:3]}"
        )
    return SensitiveMap(groups=groups)


def negative_sample(
    positives: ObservationTensor, probability: float, seed: int
) -> ObservationTensor:
    """Add sampled negative feedback to a positives-only tensor.

    Every unobserved cell is independently included as a rating-0.0 entry
    with the given probability.  Cells already present stay untouched, so the
    output never duplicates a positive.
    """
    if not 0.0 <= probability <= 1.0:
        raise ValueError("probability must lie in [0, 1]")
    if probability == 0.0:
        return positives
    rng = np.random.default_rng(seed)
    draws = rng.random(positives.n_cells)
    chosen = draws < probability
    chosen[positives.flat_indices()] = False
    flat = np.flatnonzero(chosen)
    n_c, n_t = positives.n_curators, positives.n_topics
    users = np.concatenate([positives.users, flat // (n_c * n_t)])
    curators = np.concatenate([positives.curators, (flat // n_t) % n_c])
    topics = np.concatenate([positives.topics, flat % n_t])
    values = np.concatenate([positives.values, np.zeros(flat.size)])
    return ObservationTensor(
        positives.n_users, positives.n_curators, positives.n_topics,
        users, curators, topics, values,
    )


def split(obs: ObservationTensor, train_fraction: float, seed: int) -> SplitDataset:
    """Uniform random partition of the entries into train and test.

    The train side receives floor(train_fraction * n) entries; positives and
    negatives are treated alike.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    n = obs.n_entries
    if n < 2:
        raise SplitError(f"cannot split {n} entries into train and test")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_train = math.floor(train_fraction * n)
    return SplitDataset(
        train=obs.subset(np.sort(perm[:n_train])),
        test=obs.subset(np.sort(perm[n_train:])),
        seed=seed,
    )


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings for a synthetic biased dataset.

    Ground-truth scores come from a random CP model of rank ``true_rank``
    with factor entries uniform in [0, 1); every cell belonging to a group-0
    curator gets ``bias_strength`` added, and the highest-scoring cells
    become positives until ``target_sparsity`` is reached.
    """

    n_users: int
    n_curators: int
    n_topics: int
    true_rank: int = 4
    group_ratio: float = 0.5
    bias_strength: float = 0.0
    target_sparsity: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if min(self.n_users, self.n_curators, self.n_topics, self.true_rank) < 1:
            raise ConfigError("dimensions and true_rank must be positive")
        if not 0.0 < self.group_ratio < 1.0:
            raise ConfigError("group_ratio must lie strictly between 0 and 1")
        if self.bias_strength < 0.0:
            raise ConfigError("bias_strength must be >= 0")
        if not 0.0 < self.target_sparsity <= 1.0:
            raise ConfigError("target_sparsity must lie in (0, 1]")


def _synth_groups(cfg: SynthConfig) -> np.ndarray:
    m0 = int(round(cfg.group_ratio * cfg.n_curators))
    if m0 < 1 or m0 >= cfg.n_curators:
        raise ConfigError("group_ratio leaves one group empty")
    groups = np.ones(cfg.n_curators, dtype=np.int64)
    groups[:m0] = 0
    return groups


def synth_generate(
    cfg: SynthConfig,
) -> tuple[ObservationTensor, SensitiveMap, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Draw a synthetic biased dataset.

    Returns the positives-only observation tensor, the curator group map and
    the ground-truth factor matrices (for diagnostics).
    """
    rng = np.random.default_rng(cfg.seed)
    u1 = rng.random((cfg.n_users, cfg.true_rank))
    u2 = rng.random((cfg.n_curators, cfg.true_rank))
    u3 = rng.random((cfg.n_topics, cfg.true_rank))
    groups = _synth_groups(cfg)

    scores = np.einsum("ir,jr,kr->ijk", u1, u2, u3)
    scores[:, groups == 0, :] += cfg.bias_strength

    total = scores.size
    n_pos = math.ceil(cfg.target_sparsity * total)
    if n_pos < 1:
        raise ConfigError("target_sparsity yields no positives")
    flat = np.argpartition(scores.ravel(), total - n_pos)[total - n_pos:]
    flat = np.sort(flat)
    n_c, n_t = cfg.n_curators, cfg.n_topics
    obs = ObservationTensor(
        cfg.n_users, cfg.n_curators, cfg.n_topics,
        flat // (n_c * n_t), (flat // n_t) % n_c, flat % n_t,
        np.ones(flat.size),
    )
    return obs, SensitiveMap(groups=groups), (u1, u2, u3)


def positive_group_counts(obs: ObservationTensor, smap: SensitiveMap) -> tuple[int, int]:
    """Number of positive entries per curator group."""
    pos = obs.values == 1.0
    g = smap.groups[obs.curators[pos]]
    n0 = int(np.sum(g == 0))
    return n0, int(pos.sum()) - n0


def calibrate_bias_strength(
    cfg: SynthConfig,
    target_ratio: float,
    rel_tol: float = 0.02,
    max_iter: int = 60,
) -> float:
    """Bisection for the bias level whose positive counts split group 0 vs
    group 1 at roughly ``target_ratio`` : 1.

    The generated positive ratio is monotone in the bias, so plain bisection
    on the generator (same seed throughout) converges.
    """
    if target_ratio <= 0:
        raise ConfigError("target_ratio must be positive")

    def ratio_at(bias: float) -> float:
        obs, smap, _ = synth_generate(replace(cfg, bias_strength=bias))
        n0, n1 = positive_group_counts(obs, smap)
        return math.inf if n1 == 0 else n0 / n1

    lo, hi = 0.0, max(1.0, float(cfg.true_rank))
    while ratio_at(hi) < target_ratio:
        hi *= 2.0
        if hi > 1e6:
            raise ConfigError("cannot reach target_ratio with any finite bias")
    if ratio_at(lo) >= target_ratio:
        return lo
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        r = ratio_at(mid)
        if r < target_ratio:
            lo = mid
        else:
            hi = mid
        if math.isfinite(r) and abs(r - target_ratio) <= rel_tol * target_ratio:
            return mid
    return hi


def export_synthetic(
    out_dir: str | Path,
    obs: ObservationTensor,
    smap: SensitiveMap,
    cfg: SynthConfig,
) -> dict[str, Path]:
    """Write a synthetic dataset as the two CSV formats plus a JSON sidecar.

    The sidecar records the generator config and the achieved statistics so
    any exported dataset can be re-derived.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    interactions = out / "interactions.csv"
    sensitive = out / "sensitive.csv"
    sidecar = out / "synthesis.json"

    with open(interactions, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(INTERACTIONS_HEADER)
        for i, j, k, v in zip(obs.users, obs.curators, obs.topics, obs.values):
            if v == 1.0:
                writer.writerow((f"u{i}", f"c{j}", f"t{k}"))

    with open(sensitive, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(SENSITIVE_HEADER)
        for j, g in enumerate(smap.groups):
            writer.writerow((f"c{j}", int(g)))

    n0, n1 = positive_group_counts(obs, smap)
    meta = {
        "config": asdict(cfg),
        "achieved": {
            "n_positives": obs.n_entries,
            "sparsity": obs.sparsity,
            "positives_group0": n0,
            "positives_group1": n1,
            "positive_ratio": (n0 / n1) if n1 else None,
        },
    }
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"interactions": interactions, "sensitive": sensitive, "sidecar": sidecar}
