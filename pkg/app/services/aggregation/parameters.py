import logging
from collections import OrderedDict
from typing import Dict, Iterable, Iterator, Optional, Tuple

import numpy as np

from app.core.errors import ShapeError
from app.services.autodiff.tape import Tape
from app.services.autodiff.tensor import Tensor

logger = logging.getLogger(__name__)


def uniform_init(
    rng: np.random.Generator, fan_in: int, shape: Tuple[int, ...], scale: float = 1.0
) -> np.ndarray:
    """Uniform in +-scale/sqrt(fan_in)."""
    bound = scale / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class ParameterStore:
    """
    Named parameter arrays, in insertion order.

    Names are stable dotted paths (``posterior.w_q``, ``heads.2.w1``) and are the
    keys used by checkpoints and the optimizer. Frozen parameters are bound as
    constants and never receive gradients.
    """

    def __init__(self):
        self._values: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._frozen: set = set()

    def add(self, name: str, value: np.ndarray, frozen: bool = False) -> None:
        if name in self._values:
            raise ValueError(f"Duplicate parameter name: {name}")
        self._values[name] = np.array(value, dtype=np.float64)
        if frozen:
            self._frozen.add(name)

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def items(self) -> Iterable[Tuple[str, np.ndarray]]:
        return self._values.items()

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    @property
    def frozen_names(self) -> Tuple[str, ...]:
        return tuple(n for n in self._values if n in self._frozen)

    @property
    def trainable_names(self) -> Tuple[str, ...]:
        return tuple(n for n in self._values if n not in self._frozen)

    def set(self, name: str, value: np.ndarray) -> None:
        """Replace a parameter's values; the shape must not change."""
        current = self._values[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != current.shape:
            raise ShapeError(f"Shape change for parameter '{name}'", [current.shape, value.shape])
        self._values[name] = np.array(value)

    def copy(self) -> "ParameterStore":
        clone = ParameterStore()
        for name, value in self._values.items():
            clone.add(name, value, frozen=name in self._frozen)
        return clone

    def bind(self, tape: Optional[Tape] = None) -> Dict[str, Tensor]:
        """
        Tensors for one forward pass.

        Trainable parameters are watched on ``tape`` (when given); frozen ones
        are detached constants.
        """
        bound = {}
        for name, value in self._values.items():
            if tape is not None and name not in self._frozen:
                bound[name] = tape.watch(value, name=name)
            else:
                bound[name] = Tensor(value)
        return bound

    def count(self, trainable_only: bool = True) -> int:
        names = self.trainable_names if trainable_only else tuple(self._values)
        return int(sum(self._values[n].size for n in names))
