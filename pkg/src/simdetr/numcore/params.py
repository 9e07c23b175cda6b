"""Named parameter collections and the JSON checkpoint format."""
from __future__ import annotations

import json
from typing import Iterator, Mapping

import numpy as np

from .tensor import Tensor

CKPT_FORMAT = "simdetr-ckpt-v1"


class ParamStore(Mapping[str, Tensor]):
    """Sorted mapping of dot-separated parameter names to leaf tensors."""

    def __init__(self, params: Mapping[str, Tensor] | None = None, rng_seed: int = 0):
        self._params: dict[str, Tensor] = {}
        self.rng_seed = int(rng_seed)
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name: {name}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"missing parameter: {name}") from None

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._params))

    def __len__(self) -> int:
        return len(self._params)

    def scope(self, prefix: str) -> dict[str, Tensor]:
        """Sub-mapping of names under ``prefix.`` with the prefix stripped."""
        head = prefix + "."
        return {k[len(head):]: v for k, v in self._params.items() if k.startswith(head)}

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def copy(self) -> ParamStore:
        return ParamStore({k: Tensor(v.data.copy()) for k, v in self._params.items()},
                          rng_seed=self.rng_seed)

    def state(self) -> dict[str, np.ndarray]:
        return {k: self._params[k].data.copy() for k in self}

    # -- serialisation -------------------------------------------------------
    def to_dict(self, **extra) -> dict:
        out = {"format": CKPT_FORMAT, "seed": self.rng_seed}
        out.update(extra)
        out["params"] = {
            k: {"shape": list(self._params[k].shape),
                "data": [float(x) for x in self._params[k].data.ravel()]}
            for k in self
        }
        return out

    def to_json(self, **extra) -> str:
        # float repr is shortest round-trip, so this is value-exact
        return json.dumps(self.to_dict(**extra), sort_keys=False)

    @classmethod
    def from_dict(cls, obj: Mapping) -> ParamStore:
        if obj.get("format") != CKPT_FORMAT:
            raise ValueError(f"unsupported checkpoint format: {obj.get('format')!r}")
        store = cls(rng_seed=int(obj.get("seed", 0)))
        for name, rec in obj["params"].items():
            shape = tuple(int(n) for n in rec["shape"])
            data = np.asarray(rec["data"], dtype=np.float64)
            if data.size != int(np.prod(shape, dtype=np.int64)):
                raise ValueError(f"parameter {name}: {data.size} values for shape {shape}")
            store.add(name, Tensor(data.reshape(shape)))
        return store

    @classmethod
    def from_json(cls, text: str) -> ParamStore:
        return cls.from_dict(json.loads(text))
