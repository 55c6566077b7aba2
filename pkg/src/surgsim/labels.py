"""Semantic class ids shared by meshes, instruments and the segmentation channel."""

BACKGROUND = 0

LABELS = {
    "background": 0,
    "liver": 1,
    "gallbladder": 2,
    "cystic_duct": 3,
    "cystic_artery": 4,
    "fat": 5,
    "grasper": 10,
    "hook": 11,
    "scissors": 12,
    "clip_applier": 13,
}
NAMES = {v: k for k, v in LABELS.items()}

TISSUE_LABELS = frozenset(v for k, v in LABELS.items() if 0 < v < 10)
INSTRUMENT_LABELS = frozenset(v for v in LABELS.values() if v >= 10)


def label_id(name: str) -> int:
    if name.lstrip("-").isdigit():
        return int(name)
    return LABELS[name]


def label_name(label: int) -> str:
    return NAMES.get(label, str(label))


def is_instrument(label: int) -> bool:
    return label in INSTRUMENT_LABELS
