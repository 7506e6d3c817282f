"""Class taxonomies shared by the dataset format, model heads and telemetry."""

TAXONOMY_VERSION = 1

ROD_CLASSES = ("nobody", "one_person", "two_persons")
HAR_CLASSES = ("sit", "stand", "walk", "stand_up", "sit_down")

# ROD predictions that leave the network at the early branch
EARLY_EXIT_LABELS = frozenset({0, 2})


def check_labels(rod_label, har_label) -> None:
    """Reject label pairs outside the taxonomy; activity exists only for one occupant."""
    if rod_label is not None and rod_label not in range(len(ROD_CLASSES)):
        raise ValueError(f"rod_label {rod_label!r} outside 0..{len(ROD_CLASSES) - 1}")
    if har_label is not None:
        if har_label not in range(len(HAR_CLASSES)):
            raise ValueError(f"har_label {har_label!r} outside 0..{len(HAR_CLASSES) - 1}")
        if rod_label is not None and rod_label != 1:
            raise ValueError(f"har_label given for rod_label {rod_label} ({ROD_CLASSES[rod_label]})")
