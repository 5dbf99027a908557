"""Three-grader labeling protocol: pixel-wise majority voting, consensus
resolution of three-way disagreements, and label census helpers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volumes import RESOLVED_LABEL_CODES, UNRESOLVED, LabelVolume


@dataclass
class GraderSet:
    """Exactly three independent gradings of the same volume."""

    grades: tuple[LabelVolume, LabelVolume, LabelVolume]

    def __post_init__(self):
        self.grades = tuple(self.grades)
        if len(self.grades) != 3:
            raise ValueError(f"a grader set holds exactly 3 gradings, got {len(self.grades)}")
        shapes = {g.shape for g in self.grades}
        if len(shapes) != 1:
            raise ValueError(f"grader label shapes differ: {sorted(shapes)}")
        for g in self.grades:
            if g.provenance != "grader":
                raise ValueError(f"expected provenance 'grader', got {g.provenance!r}")
            if np.any(g.codes == UNRESOLVED):
                raise ValueError("grader inputs must not contain unresolved pixels")
        ids = [g.grader_id for g in self.grades]
        if None in ids or len(set(ids)) != 3:
            raise ValueError(f"grader_ids must be present and distinct, got {ids}")


def vote_merge(graders: GraderSet) -> tuple[LabelVolume, int]:
    """Merge three gradings by per-pixel majority.

    A pixel where any two graders agree takes the agreed code. A pixel
    voted into three disparate categories is marked unresolved (255) for
    consensus discussion, and counted.
    """
    a, b, c = (g.codes for g in graders.grades)
    merged = np.where(a == b, a, np.where(a == c, a, np.where(b == c, b, UNRESOLVED)))
    unresolved_count = int(np.count_nonzero(merged == UNRESOLVED))
    first = graders.grades[0]
    out = LabelVolume(
        codes=merged.astype(np.uint8),
        spacing_um=first.spacing_um,
        provenance="merged",
        volume_id=first.volume_id,
    )
    return out, unresolved_count


def unresolved_pixels(merged: LabelVolume) -> list[tuple[int, int, int]]:
    """(bscan, row, col) indices of the pixels still awaiting consensus."""
    return [tuple(int(i) for i in idx) for idx in np.argwhere(merged.codes == UNRESOLVED)]


def resolve(
    merged: LabelVolume,
    resolutions: list[tuple[tuple[int, int, int], int]],
) -> LabelVolume:
    """Overwrite unresolved pixels with consensus codes.

    Every listed pixel must currently be unresolved and every code must be
    one of {background, tissue, fluid}; anything else is an error rather
    than a silent overwrite.
    """
    codes = merged.codes.copy()
    for pixel, code in resolutions:
        pixel = tuple(int(i) for i in pixel)
        if int(code) not in RESOLVED_LABEL_CODES:
            raise ValueError(f"invalid consensus code {code} for pixel {pixel}")
        if codes[pixel] != UNRESOLVED:
            raise ValueError(
                f"pixel {pixel} is not unresolved (currently {int(codes[pixel])})"
            )
        codes[pixel] = int(code)
    return merged.with_codes(codes, provenance="merged")


def label_stats(labels: LabelVolume) -> dict[str, int]:
    """Voxel counts per category; values sum to the volume's voxel count."""
    codes = labels.codes
    return {
        "background": int(np.count_nonzero(codes == 0)),
        "tissue": int(np.count_nonzero(codes == 1)),
        "fluid": int(np.count_nonzero(codes == 2)),
        "unresolved": int(np.count_nonzero(codes == UNRESOLVED)),
    }
