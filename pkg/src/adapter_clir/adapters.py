"""Bottleneck adapters, per-side adapter chains and the language-adapter catalog."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

from .core import (
    ConfigError,
    DimensionError,
    ParamRegistry,
    ParamTensor,
    Tensor,
    add,
    affine,
    load_checkpoint,
    relu,
    save_checkpoint,
)

Role = Literal["language", "task"]
LANGUAGE_REDUCTION = 2
TASK_REDUCTION = 16


@dataclass
class Adapter:
    down: ParamTensor
    down_bias: ParamTensor
    up: ParamTensor
    up_bias: ParamTensor
    reduction_factor: int
    role: Role
    language_tag: str | None = None

    @property
    def hidden(self) -> int:
        return self.down.shape[0]

    @property
    def bottleneck(self) -> int:
        return self.down.shape[1]

    def params(self) -> list[ParamTensor]:
        return [self.down, self.down_bias, self.up, self.up_bias]

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params())


def bottleneck_width(h: int, r: int) -> int:
    if r < 1 or h % r:
        raise ConfigError(f"hidden size {h} is not divisible by reduction factor {r}")
    return h // r


def init_adapter(h: int, r: int, role: Role, seed: int, prefix: str = "adapter", language_tag: str | None = None) -> Adapter:
    """Fresh adapter: seeded uniform down-projection, zero up-projection and biases.

    The zero up-projection makes a new adapter return its residual unchanged.
    """
    b = bottleneck_width(h, r)
    reg = ParamRegistry(seed)
    return Adapter(
        down=reg.create(f"{prefix}.down.weight", (h, b)),
        down_bias=reg.create(f"{prefix}.down.bias", (b,), init="zeros"),
        up=reg.create(f"{prefix}.up.weight", (b, h), init="zeros"),
        up_bias=reg.create(f"{prefix}.up.bias", (h,), init="zeros"),
        reduction_factor=r,
        role=role,
        language_tag=language_tag,
    )


def adapter_forward(a: Adapter, h_l, r_l) -> Tensor:
    """``up(relu(down(h_l))) + r_l``."""
    h_l = h_l if isinstance(h_l, Tensor) else Tensor(h_l)
    r_l = r_l if isinstance(r_l, Tensor) else Tensor(r_l)
    if h_l.shape != r_l.shape:
        raise DimensionError(f"hidden {h_l.shape} and residual {r_l.shape} differ")
    if h_l.shape[-1] != a.hidden:
        raise DimensionError(f"input width {h_l.shape[-1]} != adapter hidden size {a.hidden}")
    z = relu(affine(h_l, a.down, a.down_bias))
    return add(affine(z, a.up, a.up_bias), r_l)


def count_adapter_params(h: int, r: int, layers: int) -> int:
    b = bottleneck_width(h, r)
    return layers * (2 * h * b + b + h)


@dataclass
class LanguageAdapterSet:
    """One language adapter per backbone layer, for a single language."""

    language_tag: str
    adapters: list[Adapter]

    def params(self) -> list[ParamTensor]:
        return [p for a in self.adapters for p in a.params()]


def init_language_adapters(tag: str, h: int, layers: int, seed: int, r: int = LANGUAGE_REDUCTION) -> LanguageAdapterSet:
    return LanguageAdapterSet(
        tag, [init_adapter(h, r, "language", seed, f"lang.{tag}.layer.{i}", tag) for i in range(layers)]
    )


def init_task_adapters(name: str, h: int, layers: int, seed: int, r: int = TASK_REDUCTION) -> list[Adapter]:
    return [init_adapter(h, r, "task", seed, f"task.{name}.layer.{i}") for i in range(layers)]


@dataclass(frozen=True)
class AdapterChain:
    """Per-layer language adapter followed by task adapter for one encoder side.

    Either slot may be absent. Frozen dataclass: swapping builds a new chain.
    """

    side: str
    language: LanguageAdapterSet | None = None
    task: tuple[Adapter, ...] | None = None

    def has_adapters(self, layer: int) -> bool:
        return self.language is not None or self.task is not None

    def params(self) -> list[ParamTensor]:
        out = [] if self.language is None else self.language.params()
        if self.task is not None:
            out += [p for a in self.task for p in a.params()]
        return out

    @property
    def language_tag(self) -> str | None:
        return None if self.language is None else self.language.language_tag


def chain_forward(chain: AdapterChain, layer: int, h_l, r_l) -> Tensor:
    """Language adapter then task adapter, both fed the same residual ``r_l``.

    An empty chain is the bare residual add ``h_l + r_l``.
    """
    h_l = h_l if isinstance(h_l, Tensor) else Tensor(h_l)
    r_l = r_l if isinstance(r_l, Tensor) else Tensor(r_l)
    if chain.language is None and chain.task is None:
        return add(h_l, r_l)
    x = h_l
    if chain.language is not None:
        x = adapter_forward(chain.language.adapters[layer], x, r_l)
    if chain.task is not None:
        x = adapter_forward(chain.task[layer], x, r_l)
    return x


# ---------------------------------------------------------------------------
# serialization: checkpoint file + JSON sidecar


def save_adapter_set(path: str | Path, adapters: list[Adapter], meta: dict) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path / "params.ckpt", [p for a in adapters for p in a.params()])
    first = adapters[0]
    sidecar = {
        "role": first.role,
        "language_tag": first.language_tag,
        "reduction_factor": first.reduction_factor,
        "hidden": first.hidden,
        "layers": len(adapters),
        **meta,
    }
    (path / "adapter.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_adapter_set(path: str | Path) -> tuple[list[Adapter], dict]:
    path = Path(path)
    meta = json.loads((path / "adapter.json").read_text())
    params = load_checkpoint(path / "params.ckpt")
    if len(params) != 4 * meta["layers"]:
        raise ConfigError(f"{path}: expected {4 * meta['layers']} tensors, found {len(params)}")
    adapters = []
    for i in range(meta["layers"]):
        d, db, u, ub = params[4 * i : 4 * i + 4]
        for p in (d, db, u, ub):
            p.trainable = False
        adapters.append(Adapter(d, db, u, ub, meta["reduction_factor"], meta["role"], meta["language_tag"]))
    return adapters, meta


class AdapterCatalog:
    """Language adapters keyed by tag, optionally backed by a directory."""

    def __init__(self, entries: dict[str, LanguageAdapterSet] | None = None):
        self._entries: dict[str, LanguageAdapterSet] = dict(entries or {})

    def __contains__(self, tag: str) -> bool:
        return tag in self._entries

    def tags(self) -> list[str]:
        return sorted(self._entries)

    def add(self, entry: LanguageAdapterSet, layers: int | None = None) -> None:
        if layers is not None and len(entry.adapters) != layers:
            raise ConfigError(f"adapter set {entry.language_tag!r} covers {len(entry.adapters)} of {layers} layers")
        self._entries[entry.language_tag] = entry

    def get(self, tag: str) -> LanguageAdapterSet:
        try:
            return self._entries[tag]
        except KeyError:
            raise LookupError(f"no language adapter {tag!r}; available: {', '.join(self.tags()) or '(none)'}") from None

    def save(self, root: str | Path) -> None:
        root = Path(root)
        for tag, entry in sorted(self._entries.items()):
            save_adapter_set(root / tag, entry.adapters, {})

    @classmethod
    def load(cls, root: str | Path) -> "AdapterCatalog":
        cat = cls()
        for d in sorted(Path(root).iterdir()):
            if (d / "adapter.json").exists():
                adapters, meta = load_adapter_set(d)
                cat.add(LanguageAdapterSet(meta["language_tag"], adapters))
        return cat


def swap_language_adapter(model, side: str, language_tag: str):
    """Return a model view whose ``side`` chain uses the catalog's ``language_tag`` adapters.

    Task adapters, poolers and backbone are shared with the input model.
    """
    entry = model.catalog.get(language_tag)
    return model.with_chain(side, AdapterChain(side, entry, model.chain(side).task))
