"""Fixed edge-detection kernel bank and the 3x3 Gaussian smoothing kernel."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from .grid import InvalidInputError


@dataclass(frozen=True)
class Kernel:
    name: str
    coefficients: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.array(self.coefficients, dtype=np.float64)
        if c.ndim != 2:
            raise InvalidInputError(f"kernel {self.name} must be 2D")
        c.setflags(write=False)
        object.__setattr__(self, "coefficients", c)

    @property
    def height(self) -> int:
        return self.coefficients.shape[0]

    @property
    def width(self) -> int:
        return self.coefficients.shape[1]


@dataclass(frozen=True)
class FilterSet:
    name: str
    kernels: Tuple[Kernel, ...]

    @property
    def channels(self) -> int:
        return len(self.kernels)


SOBEL_X = Kernel("sobel_x", [[1, 0, -1], [2, 0, -2], [1, 0, -1]])
SOBEL_Y = Kernel("sobel_y", [[1, 2, 1], [0, 0, 0], [-1, -2, -1]])
LAPLACE = Kernel("laplace8", [[1, 1, 1], [1, -8, 1], [1, 1, 1]])
LAPLACE4 = Kernel("laplace4", [[0, 1, 0], [1, -4, 1], [0, 1, 0]])
PREWITT_X = Kernel("prewitt_x", [[1, 0, -1], [1, 0, -1], [1, 0, -1]])
PREWITT_Y = Kernel("prewitt_y", [[1, 1, 1], [0, 0, 0], [-1, -1, -1]])
KAYYALI_SE = Kernel("kayyali_se", [[6, 0, -6], [0, 0, 0], [-6, 0, 6]])
KAYYALI_NE = Kernel("kayyali_ne", [[-6, 0, 6], [0, 0, 0], [6, 0, -6]])
# 2x2 Roberts cross embedded top-left in a 3x3 so every bank kernel shares one shape
ROBERTS_1 = Kernel("roberts_1", [[1, 0, 0], [0, -1, 0], [0, 0, 0]])
ROBERTS_2 = Kernel("roberts_2", [[0, 1, 0], [-1, 0, 0], [0, 0, 0]])

_FILTER_SETS: Dict[str, Tuple[Kernel, ...]] = {
    "sobel": (SOBEL_X, SOBEL_Y),
    "prewitt": (PREWITT_X, PREWITT_Y),
    "kayyali": (KAYYALI_SE, KAYYALI_NE),
    "roberts": (ROBERTS_1, ROBERTS_2),
    "laplace": (LAPLACE,),
    "sobelandlaplace": (SOBEL_X, SOBEL_Y, LAPLACE),
    "laplace4": (LAPLACE4,),
}

# Display names, in the order used for the filter ablation.
FILTER_SET_NAMES: List[str] = ["Sobel", "Prewitt", "Kayyali", "Roberts", "Laplace", "SobelAndLaplace"]


def canonical_filter_name(name: str) -> str:
    key = str(name).replace("_", "").replace("&", "and").replace(" ", "").lower()
    if key == "s&l" or key == "sandl":
        key = "sobelandlaplace"
    if key not in _FILTER_SETS:
        raise InvalidInputError(f"unknown filter set {name!r}")
    return key


def get_filter_set(name: str) -> FilterSet:
    key = canonical_filter_name(name)
    display = {"sobelandlaplace": "SobelAndLaplace", "laplace4": "Laplace4"}.get(key, key.capitalize())
    return FilterSet(display, _FILTER_SETS[key])


def gaussian_kernel_3x3() -> Kernel:
    return Kernel("gaussian3x3", np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]]) / 16.0)
