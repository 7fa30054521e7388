"""Stratified mini-batches: half slices showing lung, half without."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volgrid import load_mask


class EmptyStratumError(ValueError):
    pass


@dataclass(frozen=True)
class SliceRef:
    case_id: str
    z: int
    has_lung: bool


@dataclass(frozen=True)
class SliceIndex:
    entries: tuple

    def stratum(self, has_lung):
        return [e for e in self.entries if e.has_lung == has_lung]


def index_mask(case_id, mask):
    has = mask.labels.reshape(mask.dims[0], -1).any(axis=1)
    return [SliceRef(case_id, z, bool(h)) for z, h in enumerate(has)]


def build_index(manifest, masks=None, split="train"):
    """Classify every slice of every ``split`` case as lung / non-lung.

    ``masks`` optionally maps case_id to an already loaded LabelVolume.
    """
    entries = []
    for e in manifest.split(split):
        m = masks[e.case_id] if masks and e.case_id in masks else load_mask(e.mask_path)
        entries.extend(index_mask(e.case_id, m))
    return SliceIndex(tuple(entries))


class StratifiedSampler:
    """Endless stream of batches with ``batch_size // 2`` refs from each stratum.

    Each stratum is walked in a shuffled order without replacement and is
    reshuffled independently when exhausted.
    """

    def __init__(self, index, rng, batch_size=14):
        if batch_size < 2 or batch_size % 2:
            raise ValueError("batch_size must be even and >= 2")
        self.half = batch_size // 2
        self.rng = rng
        self.strata = [index.stratum(True), index.stratum(False)]
        for s, name in zip(self.strata, ("lung", "non-lung")):
            if not s:
                raise EmptyStratumError(
                    f"no {name} slices in the training index; add cases containing "
                    f"{name} slices (e.g. augment the non-lung slices with extra scans)"
                )
        self._order = [self._shuffle(0), self._shuffle(1)]
        self._pos = [0, 0]

    def _shuffle(self, k):
        return self.rng.permutation(len(self.strata[k]))

    def _take(self, k):
        out = []
        for _ in range(self.half):
            if self._pos[k] == len(self._order[k]):
                self._order[k] = self._shuffle(k)
                self._pos[k] = 0
            out.append(self.strata[k][self._order[k][self._pos[k]]])
            self._pos[k] += 1
        return out

    def next_batch(self):
        return self._take(0) + self._take(1)


def next_batch(sampler):
    return sampler.next_batch()
