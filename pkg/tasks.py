"""
Downstream decoding tasks: which epochs take part, how they are labeled, and
which class counts as positive for sensitivity.
"""

from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from errors import DataError, UnknownTaskError
from signalio import CravingLevel, Cue, Dataset, Group, MultimodalEpoch


@dataclass(frozen=True)
class TaskSpec:
    """
    Attributes:
        task_id: registry key, also the default decoder head id
        class_names: names of the integer labels, in label order
        positive_class: label whose recall is reported as sensitivity
        label_of: maps an epoch to its label, or None when the epoch is not part of the task
    """

    task_id: str
    class_names: Tuple[str, ...]
    positive_class: int
    label_of: Callable[[MultimodalEpoch], Optional[int]]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


def _hc_vs_mbt(epoch: MultimodalEpoch) -> Optional[int]:
    return {Group.HC: 0, Group.MBT: 1}.get(epoch.group_label)


def _craving(epoch: MultimodalEpoch) -> Optional[int]:
    if epoch.group_label != Group.MBT or epoch.cue_label != Cue.METH or epoch.craving_level is None:
        return None
    return {CravingLevel.LOW: 0, CravingLevel.MEDIUM: 1, CravingLevel.HIGH: 2}[epoch.craving_level]


def _mbt_vs_mat(epoch: MultimodalEpoch) -> Optional[int]:
    return {Group.MBT: 0, Group.MAT: 1}.get(epoch.group_label)


TASKS: Dict[str, TaskSpec] = {
    "hc_vs_mbt": TaskSpec("hc_vs_mbt", ("HC", "MBT"), 1, _hc_vs_mbt),
    "craving": TaskSpec("craving", ("low", "medium", "high"), 2, _craving),
    "mbt_vs_mat": TaskSpec("mbt_vs_mat", ("MBT", "MAT"), 1, _mbt_vs_mat),
}


def get_task(task_id: str) -> TaskSpec:
    try:
        return TASKS[task_id]
    except KeyError:
        raise UnknownTaskError(f"unknown task {task_id!r}; known tasks: {sorted(TASKS)}") from None


def task_examples(ds: Dataset, task: TaskSpec) -> Tuple[Dataset, np.ndarray]:
    """The task's epochs (in dataset order) and their integer labels."""
    indices = []
    labels = []
    for i, epoch in enumerate(ds.epochs):
        label = task.label_of(epoch)
        if label is not None:
            indices.append(i)
            labels.append(label)
    labels = np.asarray(labels, dtype=np.int64)
    present = np.unique(labels)
    if present.size < 2:
        raise DataError(f"task {task.task_id} needs at least 2 classes, found {present.size} in {len(labels)} epochs")
    return ds.subset(indices), labels
