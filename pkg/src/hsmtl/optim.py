"""AdaDelta optimizer and the two-phase learning-rate multiplier schedule."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def lr_schedule(epoch: int, shared_epochs: int = 100, finetune_epochs: int = 30,
                lr_shared: float = 1.0, lr_finetune: float = 0.1) -> float:
    """Multiplier for a 0-based epoch index: lr_shared for the first
    ``shared_epochs`` epochs, lr_finetune for the remaining ones."""
    total = shared_epochs + finetune_epochs
    if not 0 <= epoch < total:
        raise ValueError(f"epoch {epoch} outside schedule range [0, {total})")
    return lr_shared if epoch < shared_epochs else lr_finetune


class AdaDelta:
    """AdaDelta with per-parameter accumulators E[g^2] and E[dx^2].

    Per coordinate and step:
        E[g^2]  <- rho * E[g^2] + (1 - rho) * g^2
        delta    = -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
        E[dx^2] <- rho * E[dx^2] + (1 - rho) * delta^2
        x       <- x + lr_multiplier * delta

    The accumulators track the unscaled delta, so the applied update is
    exactly linear in the multiplier.
    """

    def __init__(self, params: list[Tensor], rho: float = 0.95, eps: float = 1e-6):
        self.rho = rho
        self.eps = eps
        self._params = list(params)
        self._state: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for p in self._params:
            if p.name is None:
                raise ValueError("optimizer parameters must be named")
            self._state[id(p)] = (np.zeros_like(p.data), np.zeros_like(p.data))

    def step(self, grads: dict[Tensor, np.ndarray], lr_multiplier: float = 1.0) -> None:
        """Apply one update to every parameter present in ``grads``.

        Parameters absent from ``grads`` are untouched (neither value nor
        accumulators change), which is what keeps per-task heads isolated.
        """
        for p, g in grads.items():
            st = self._state.get(id(p))
            if st is None:
                raise KeyError(f"parameter {p.name!r} is not managed by this optimizer")
            eg2, edx2 = st
            if g.shape != p.data.shape:
                raise ValueError(
                    f"gradient shape {g.shape} does not match parameter "
                    f"{p.name!r} of shape {p.data.shape}")
            eg2 *= self.rho
            eg2 += (1.0 - self.rho) * g * g
            delta = -np.sqrt(edx2 + self.eps) / np.sqrt(eg2 + self.eps) * g
            edx2 *= self.rho
            edx2 += (1.0 - self.rho) * delta * delta
            p.data += lr_multiplier * delta

    # -- serialization -----------------------------------------------------

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        arrays = []
        for p in self._params:
            eg2, edx2 = self._state[id(p)]
            arrays.append((f"adadelta.{p.name}.eg2", eg2))
            arrays.append((f"adadelta.{p.name}.edx2", edx2))
        return arrays

    def load_state_arrays(self, named: dict[str, np.ndarray]) -> None:
        for p in self._params:
            eg2 = named[f"adadelta.{p.name}.eg2"]
            edx2 = named[f"adadelta.{p.name}.edx2"]
            if eg2.shape != p.data.shape or edx2.shape != p.data.shape:
                raise ValueError(f"optimizer state shape mismatch for {p.name!r}")
            self._state[id(p)] = (eg2.astype(p.data.dtype, copy=True),
                                  edx2.astype(p.data.dtype, copy=True))

    def clone_state_for(self, params: list[Tensor], source_names: dict[str, Tensor]) -> "AdaDelta":
        """New optimizer over ``params`` whose accumulators copy this one's,
        matched by parameter name through ``source_names`` (fork semantics)."""
        fork = AdaDelta(params, rho=self.rho, eps=self.eps)
        for p in params:
            src = source_names.get(p.name)
            if src is None:
                continue
            eg2, edx2 = self._state[id(src)]
            fork._state[id(p)] = (eg2.copy(), edx2.copy())
        return fork
