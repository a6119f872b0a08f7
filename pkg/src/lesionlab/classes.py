"""The seven-way lesion label space shared by every stage of the pipeline."""

from __future__ import annotations

from enum import Enum


class LesionClass(Enum):
    """Diagnostic categories, indexed alphabetically so reports stay stable."""

    AKIEC = "akiec"
    BCC = "bcc"
    BKL = "bkl"
    DF = "df"
    MEL = "mel"
    NV = "nv"
    VASC = "vasc"

    @property
    def code(self) -> str:
        return self.value

    @property
    def index(self) -> int:
        return CLASS_CODES.index(self.value)

    @classmethod
    def from_code(cls, code: str) -> "LesionClass":
        try:
            return cls(code)
        except ValueError:
            raise ValueError(
                f"unknown lesion class code {code!r}; expected one of {CLASS_CODES}"
            ) from None

    @classmethod
    def from_index(cls, index: int) -> "LesionClass":
        return cls(CLASS_CODES[index])


CLASS_CODES: tuple[str, ...] = ("akiec", "bcc", "bkl", "df", "mel", "nv", "vasc")
NUM_CLASSES = len(CLASS_CODES)
