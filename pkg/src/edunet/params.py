"""Named parameter storage and initialisers."""

from __future__ import annotations

from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Ordered ``name -> Tensor`` table plus non-trainable buffers.

    Scopes share the underlying tables, so ``store.scope("enc").add("w", ...)``
    registers ``"enc.w"`` on the root store. Iteration follows insertion
    order.
    """

    def __init__(self, prefix: str = "", _params=None, _buffers=None):
        self.prefix = prefix
        self.params: Dict[str, Tensor] = {} if _params is None else _params
        self.buffers: Dict[str, np.ndarray] = {} if _buffers is None else _buffers

    def _key(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def scope(self, name: str) -> "ParamStore":
        return ParamStore(self._key(name), self.params, self.buffers)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        key = self._key(name)
        if key in self.params or key in self.buffers:
            raise KeyError(f"duplicate parameter name {key!r}")
        t = Tensor(np.ascontiguousarray(value), requires_grad=True, name=key)
        self.params[key] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        key = self._key(name)
        if key in self.params or key in self.buffers:
            raise KeyError(f"duplicate buffer name {key!r}")
        self.buffers[key] = np.ascontiguousarray(value)
        return self.buffers[key]

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.params[self._key(name)]
        except KeyError:
            raise KeyError(f"missing parameter {self._key(name)!r}") from None

    def __contains__(self, name: str) -> bool:
        key = self._key(name)
        return key in self.params or key in self.buffers

    def buffer(self, name: str) -> np.ndarray:
        try:
            return self.buffers[self._key(name)]
        except KeyError:
            raise KeyError(f"missing buffer {self._key(name)!r}") from None

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        pre = self.prefix + "." if self.prefix else ""
        for k, v in self.params.items():
            if k.startswith(pre):
                yield k, v

    def __len__(self) -> int:
        return len(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def state(self) -> Dict[str, np.ndarray]:
        """Parameters followed by buffers, as plain arrays (not copied)."""
        out = {k: t.data for k, t in self.params.items()}
        out.update(self.buffers)
        return out

    def copy(self, dtype=None) -> "ParamStore":
        new = ParamStore()
        for k, t in self.params.items():
            new.params[k] = Tensor(t.data.astype(dtype or t.dtype, copy=True), requires_grad=True, name=k)
        for k, b in self.buffers.items():
            new.buffers[k] = b.astype(dtype or b.dtype, copy=True)
        return new

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        """Overwrite values in place; names and shapes must match exactly."""
        expected = set(self.params) | set(self.buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))[:5]
            extra = sorted(set(state) - expected)[:5]
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, arr in state.items():
            target = self.params[k].data if k in self.params else self.buffers[k]
            if target.shape != arr.shape:
                raise ValueError(f"shape mismatch for {k!r}: {arr.shape} vs {target.shape}")
            target[...] = arr


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_conv(
    store: ParamStore,
    name: str,
    cin: int,
    cout: int,
    k: int,
    rng: np.random.Generator,
    groups: int = 1,
    bias: bool = True,
) -> None:
    s = store.scope(name)
    fan_in = (cin // groups) * k * k
    s.add("weight", kaiming_uniform(rng, (cout, cin // groups, k, k), fan_in))
    if bias:
        s.add("bias", np.zeros(cout, dtype=np.float32))


def init_conv_transpose(store: ParamStore, name: str, cin: int, cout: int, k: int, rng, bias: bool = True) -> None:
    s = store.scope(name)
    s.add("weight", kaiming_uniform(rng, (cin, cout, k, k), cin * k * k))
    if bias:
        s.add("bias", np.zeros(cout, dtype=np.float32))


def init_linear(store: ParamStore, name: str, cin: int, cout: int, rng, bias: bool = True) -> None:
    s = store.scope(name)
    s.add("weight", kaiming_uniform(rng, (cout, cin), cin))
    if bias:
        s.add("bias", np.zeros(cout, dtype=np.float32))


def init_norm(store: ParamStore, name: str, c: int, running: bool = False) -> None:
    s = store.scope(name)
    s.add("gamma", np.ones(c, dtype=np.float32))
    s.add("beta", np.zeros(c, dtype=np.float32))
    if running:
        s.add_buffer("running_mean", np.zeros(c, dtype=np.float32))
        s.add_buffer("running_var", np.ones(c, dtype=np.float32))


def bias_or_none(store: ParamStore, name: str) -> Optional[Tensor]:
    key = f"{name}.bias"
    return store[key] if key in store else None
