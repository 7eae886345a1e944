from dataclasses import dataclass, field
from typing import Dict, List, Optional


@dataclass
class LossConfig:
    """Weights and thresholds shared by every loss.

    Attributes
    ----------
    epsilon: float
        Threshold turning a soft prediction into a positive label.
    alpha, beta, gamma: float
        Weights of the activation, information-entropy and discrete terms of
        the generator loss.  ``gamma`` may be negative for the discrete-loss
        harness; the other weights must be non-negative.
    lambda_m: List[float]
        Per-teacher weights of the dual-generator loss; empty means all 1.
    lambda_in1, lambda_in2: float
        Weights of the two input streams of a dual-generator block: the
        student's own features and the generator's intermediate features.
    """

    epsilon: float = 0.5
    alpha: float = 0.1
    beta: float = 5.0
    gamma: float = 1.0
    lambda_m: List[float] = field(default_factory=list)
    lambda_in1: float = 1.0
    lambda_in2: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        for name in ("alpha", "beta", "lambda_in1", "lambda_in2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if any(w < 0 for w in self.lambda_m):
            raise ValueError(f"lambda_m weights must be non-negative, got {self.lambda_m}")

    def teacher_weight(self, m: int) -> float:
        """Weight of teacher ``m`` (1-based)."""

        if not self.lambda_m:
            return 1.0
        if not 1 <= m <= len(self.lambda_m):
            raise ValueError(f"no lambda_m weight for teacher {m}; configured {len(self.lambda_m)}")
        return float(self.lambda_m[m - 1])


@dataclass
class Schedule:
    """Optimiser settings and iteration budget for one training stage."""

    iterations: int
    batch_size: int = 16
    base_lr: float = 0.01
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 5e-3
    optimizer: str = "sgd"
    log_every: int = 50

    def __post_init__(self) -> None:
        if self.iterations < 0:
            raise ValueError(f"iterations must be non-negative, got {self.iterations}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def learning_rate(self, iteration: int) -> float:
        """Poly decay: ``base_lr * (1 - iteration / iterations) ** power``."""

        if self.iterations == 0:
            return self.base_lr
        return self.base_lr * (1.0 - iteration / self.iterations) ** self.power


@dataclass
class ConvergenceRecord:
    """Converged dual-generator loss ``eta[b][m]`` per block and teacher."""

    num_blocks: int
    num_teachers: int
    window: int = 50
    eta: Dict[int, Dict[int, float]] = field(default_factory=dict)

    def set(self, b: int, m: int, value: float) -> None:
        if not 1 <= b <= self.num_blocks or not 1 <= m <= self.num_teachers:
            raise ValueError(f"eta index ({b}, {m}) outside {self.num_blocks} blocks x {self.num_teachers} teachers")
        if not value >= 0.0 or value == float("inf"):
            raise ValueError(f"eta[{b}][{m}] must be finite and non-negative, got {value}")
        self.eta.setdefault(b, {})[m] = float(value)

    def missing(self) -> List[tuple]:
        return [
            (b, m)
            for b in range(1, self.num_blocks + 1)
            for m in range(1, self.num_teachers + 1)
            if m not in self.eta.get(b, {})
        ]

    @property
    def complete(self) -> bool:
        return not self.missing()

    def column(self, m: int) -> List[float]:
        return [self.eta[b][m] for b in range(1, self.num_blocks + 1)]

    def rows(self) -> List[Dict[str, object]]:
        return [
            {"block": b, "teacher": m, "eta": repr(self.eta[b][m])}
            for b in sorted(self.eta)
            for m in sorted(self.eta[b])
        ]


@dataclass
class BranchPlan:
    """Branch-out block ``S[m]`` per teacher (stored 0-based by teacher, values 1-based)."""

    S: List[int]

    def __post_init__(self) -> None:
        if not self.S or any(s < 1 for s in self.S):
            raise ValueError(f"branch points must be positive block indices, got {self.S}")

    @property
    def shared_depth(self) -> int:
        return min(self.S)

    def to_text(self) -> str:
        return "".join(f"S[{m}]={s}\n" for m, s in enumerate(self.S, start=1))

    @classmethod
    def from_text(cls, text: str) -> "BranchPlan":
        entries: Dict[int, int] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            if not (key.startswith("S[") and key.endswith("]")) or not value:
                raise ValueError(f"malformed branch plan line {line!r}")
            entries[int(key[2:-1])] = int(value)
        if sorted(entries) != list(range(1, len(entries) + 1)):
            raise ValueError(f"branch plan teachers must be numbered 1..M, got {sorted(entries)}")
        return cls(S=[entries[m] for m in sorted(entries)])


@dataclass
class TaskSplit:
    """Label sets of the teachers and the customized task set.

    Labels are global indices into the dataset's label list.  ``customized``
    must be covered by the union of ``label_sets`` and every teacher must
    contribute at least one customized label, otherwise its branch would
    have nothing to predict.
    """

    label_sets: List[List[int]]
    customized: List[int]

    def __post_init__(self) -> None:
        self.label_sets = [list(s) for s in self.label_sets]
        self.customized = sorted(self.customized)
        if not self.label_sets:
            raise ValueError("a task split needs at least one teacher")
        for m, labels in enumerate(self.label_sets, start=1):
            if not labels:
                raise ValueError(f"teacher {m} has an empty label set")
            if len(set(labels)) != len(labels):
                raise ValueError(f"teacher {m} lists a label twice: {labels}")
        if not self.customized or len(set(self.customized)) != len(self.customized):
            raise ValueError(f"customized labels must be non-empty and unique, got {self.customized}")
        covered = set().union(*map(set, self.label_sets))
        outside = [c for c in self.customized if c not in covered]
        if outside:
            raise ValueError(f"customized labels {outside} are not covered by any teacher")
        idle = [m for m in range(1, self.num_teachers + 1) if not self.selected_indices(m)]
        if idle:
            raise ValueError(f"teachers {idle} contribute no customized label")

    @property
    def num_teachers(self) -> int:
        return len(self.label_sets)

    def labels(self, m: int) -> List[int]:
        return self.label_sets[m - 1]

    def selected_indices(self, m: int) -> List[int]:
        """Positions within teacher ``m``'s outputs that belong to the customized set."""

        wanted = set(self.customized)
        return sorted(i for i, label in enumerate(self.labels(m)) if label in wanted)

    def selected_labels(self, m: int) -> List[int]:
        labels = self.labels(m)
        return [labels[i] for i in self.selected_indices(m)]


@dataclass
class MetricsReport:
    """Average precision per label plus the top-k COCO-style summary.

    Attributes
    ----------
    per_label_ap: Dict[str, float]
        AP of every evaluated label, keyed by label name.
    excluded: List[str]
        Labels without positives; they carry no AP and do not enter mAP.
    """

    per_label_ap: Dict[str, float] = field(default_factory=dict)
    mAP: float = 0.0
    top_k: int = 3
    overall_precision: float = 0.0
    overall_recall: float = 0.0
    overall_f1: float = 0.0
    class_precision: float = 0.0
    class_recall: float = 0.0
    class_f1: float = 0.0
    excluded: List[str] = field(default_factory=list)
    name: Optional[str] = None

    def coco_dict(self) -> Dict[str, float]:
        return {
            "C-P": self.class_precision,
            "C-R": self.class_recall,
            "C-F1": self.class_f1,
            "O-P": self.overall_precision,
            "O-R": self.overall_recall,
            "O-F1": self.overall_f1,
        }

    def as_dict(self) -> Dict[str, object]:
        row: Dict[str, object] = {"name": self.name or "", "top_k": self.top_k}
        row.update(self.coco_dict())
        row["mAP"] = self.mAP
        return row
