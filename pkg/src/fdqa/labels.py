"""Quality labels and stage roles shared across modules."""

from __future__ import annotations

import enum


class QualityLabel(enum.IntEnum):
    GOOD = 0
    USABLE = 1
    UNUSABLE = 2

    @classmethod
    def from_code(cls, code: int | str) -> "QualityLabel":
        try:
            return cls(int(code))
        except ValueError:
            raise ValueError(f"unknown quality code {code!r} (expected 0, 1 or 2)") from None

    @classmethod
    def parse(cls, text: str) -> "QualityLabel":
        t = text.strip().lower()
        if t.isdigit():
            return cls.from_code(t)
        try:
            return cls[t.upper()]
        except KeyError:
            raise ValueError(f"unknown quality label {text!r}") from None

    @property
    def title(self) -> str:
        return self.name.capitalize()


class StageRole(enum.Enum):
    HIGH_VS_LOW = "model1"
    GOOD_VS_USABLE = "model2"
    USABLE_VS_UNUSABLE = "model3"

    @property
    def model_name(self) -> str:
        return {"model1": "Model-1", "model2": "Model-2", "model3": "Model-3"}[self.value]


STAGES = (StageRole.HIGH_VS_LOW, StageRole.GOOD_VS_USABLE, StageRole.USABLE_VS_UNUSABLE)
