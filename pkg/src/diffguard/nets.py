"""Small fully connected networks over the autodiff engine.

Both the denoiser and the guidance classifier are MLPs on flat float64
vectors.  Timestep conditioning enters as a sinusoidal embedding concatenated
to the input row, the standard trick for making one network serve every noise
level.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .rng import Rng

__all__ = ["time_embedding", "Mlp", "TIME_EMBED_DIM"]

# embedding width for timestep conditioning
TIME_EMBED_DIM = 32


def time_embedding(t, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    """Sinusoidal embedding of (possibly fractional) timesteps.

    Accepts a scalar or a 1-d array; returns (n, dim) float64.  Frequencies
    span 1 down to 1/10000 geometrically, half sine and half cosine.
    """
    if dim % 2 != 0:
        raise ValueError("embedding dimension must be even")
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = t_arr[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class Mlp:
    """Fully connected network: affine / activation blocks, linear head.

    Parameters are leaf tensors with `requires_grad=True`; weights start at
    He-scaled normal draws from the supplied Rng, biases at zero, so the
    initial state is a pure function of (seed, stream, architecture).
    """

    def __init__(
        self,
        in_dim: int,
        hidden_dims: tuple,
        out_dim: int,
        rng: Rng,
        activation: str = "silu",
    ):
        if activation not in ("silu", "relu"):
            raise ValueError(f"unknown activation '{activation}'")
        self.in_dim = int(in_dim)
        self.hidden_dims = tuple(int(h) for h in hidden_dims)
        self.out_dim = int(out_dim)
        self.activation = activation
        self._params: dict[str, ad.Tensor] = {}
        widths = [self.in_dim, *self.hidden_dims, self.out_dim]
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            w = rng.normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
            self._params[f"w{i}"] = ad.Tensor(w, requires_grad=True)
            self._params[f"b{i}"] = ad.Tensor(np.zeros(fan_out), requires_grad=True)
        self.layer_count = len(widths) - 1

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        x = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(
                f"expected input shape (batch, {self.in_dim}), got {x.shape}"
            )
        act = ad.silu if self.activation == "silu" else ad.relu
        h = x
        for i in range(self.layer_count):
            h = ad.affine(h, self._params[f"w{i}"], self._params[f"b{i}"])
            if i < self.layer_count - 1:
                h = act(h)
        return h

    def parameters(self) -> list:
        return list(self._params.values())

    def named_parameters(self) -> dict:
        return dict(self._params)

    def load_state(self, state: dict) -> None:
        """Overwrite parameter values from a name -> array mapping."""
        for name, tensor in self._params.items():
            if name not in state:
                raise KeyError(f"missing parameter '{name}'")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != tensor.shape:
                raise ValueError(
                    f"parameter '{name}' shape {arr.shape} does not match {tensor.shape}"
                )
            tensor.data = arr.copy()

    def state(self) -> dict:
        return {name: t.data.copy() for name, t in self._params.items()}
