"""Organ taxonomy shared by every module.

Label ids are fixed: 0 is background, 1..10 are the organ/tumor categories.
"""

from __future__ import annotations

CLASS_NAMES: tuple[str, ...] = (
    "background",
    "BrainStem",
    "Chiasm",
    "Cochlea",
    "Eye",
    "InnerEar",
    "Larynx",
    "Lens",
    "OpticNerve",
    "SpinalCord",
    "GTV",
)
NUM_CLASSES = len(CLASS_NAMES)  # including background
NUM_FOREGROUND = NUM_CLASSES - 1
BACKGROUND = 0

CLASS_IDS: dict[str, int] = {name: i for i, name in enumerate(CLASS_NAMES)}
FOREGROUND_NAMES: tuple[str, ...] = CLASS_NAMES[1:]


def class_id(name: str) -> int:
    try:
        return CLASS_IDS[name]
    except KeyError:
        raise KeyError(f"unknown class {name!r}; expected one of {FOREGROUND_NAMES}") from None


def class_name(cid: int) -> str:
    if not 0 <= cid < NUM_CLASSES:
        raise ValueError(f"class id {cid} outside 0..{NUM_CLASSES - 1}")
    return CLASS_NAMES[cid]
