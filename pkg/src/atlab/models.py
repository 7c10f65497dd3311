"""MLP classifier and its parameter container."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .seeding import stream
from .tensor import Tensor


class ArchitectureMismatch(ValueError):
    pass


@dataclass
class ModelParams:
    """Ordered ``(W, b)`` pairs, ``W`` shaped ``[d_in, d_out]``."""

    layers: list[tuple[Tensor, Tensor]]
    arch: list[int]
    seed: int = 0

    def __post_init__(self):
        if len(self.layers) != len(self.arch) - 1:
            raise ArchitectureMismatch(f"{len(self.layers)} layers for arch {self.arch}")
        for i, (w, b) in enumerate(self.layers):
            if w.shape != (self.arch[i], self.arch[i + 1]) or b.shape != (self.arch[i + 1],):
                raise ArchitectureMismatch(
                    f"layer {i}: W {w.shape}, b {b.shape} do not match arch {self.arch}"
                )

    @property
    def tensors(self) -> list[Tensor]:
        return [t for pair in self.layers for t in pair]

    def detached(self) -> "ModelParams":
        """Constant view: same arrays, nothing recorded for gradients."""
        return ModelParams([(w.detach(), b.detach()) for w, b in self.layers], list(self.arch), self.seed)

    def trainable(self) -> "ModelParams":
        """Fresh leaf tensors over the same values, ready to collect gradients."""
        return ModelParams(
            [(Tensor(w.data, requires_grad=True), Tensor(b.data, requires_grad=True)) for w, b in self.layers],
            list(self.arch),
            self.seed,
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self.tensors])

    @classmethod
    def from_arrays(cls, arrays, arch, seed=0, requires_grad=False) -> "ModelParams":
        it = iter(arrays)
        layers = [
            (Tensor(w, requires_grad=requires_grad), Tensor(b, requires_grad=requires_grad))
            for w, b in zip(it, it)
        ]
        return cls(layers, list(arch), seed)

    @classmethod
    def from_flat(cls, vec, arch, seed=0) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        arrays, pos = [], 0
        for d_in, d_out in zip(arch[:-1], arch[1:]):
            arrays.append(vec[pos:pos + d_in * d_out].reshape(d_in, d_out))
            pos += d_in * d_out
            arrays.append(vec[pos:pos + d_out])
            pos += d_out
        if pos != vec.size:
            raise ArchitectureMismatch(f"flat vector of {vec.size} values does not fit arch {arch}")
        return cls.from_arrays(arrays, arch, seed)

    def same_bytes(self, other: "ModelParams") -> bool:
        return self.arch == other.arch and all(
            a.data.tobytes() == b.data.tobytes() for a, b in zip(self.tensors, other.tensors)
        )


def mlp_init(arch: list[int], seed: int) -> ModelParams:
    if len(arch) < 2:
        raise ValueError(f"arch needs an input and an output size, got {arch}")
    if any(int(n) < 1 for n in arch):
        raise ValueError(f"layer sizes must be positive, got {arch}")
    rng = stream(seed, "init")
    arrays = []
    for d_in, d_out in zip(arch[:-1], arch[1:]):
        s = np.sqrt(6.0 / (d_in + d_out))
        arrays.append(rng.uniform(-s, s, size=(d_in, d_out)))
        arrays.append(np.zeros(d_out))
    return ModelParams.from_arrays(arrays, arch, seed)


def forward(params: ModelParams, x) -> Tensor:
    """Logits of the MLP: affine/relu pairs, last layer affine only."""
    x = T.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != params.arch[0]:
        raise T.ShapeError(f"input of shape {x.shape} for a model expecting [m, {params.arch[0]}]")
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = T.affine(h, w, b)
        if i < last:
            h = T.relu(h)
    return h


def predict(params: ModelParams, x) -> np.ndarray:
    return forward(params.detached(), x).data


def check_same_arch(a: ModelParams, b: ModelParams) -> None:
    if list(a.arch) != list(b.arch):
        raise ArchitectureMismatch(f"architectures differ: {a.arch} vs {b.arch}")


def param_linear_comb(a: ModelParams, b: ModelParams, c_a: float, c_b: float) -> ModelParams:
    """Elementwise ``c_a * a + c_b * b`` over every weight and bias."""
    check_same_arch(a, b)
    arrays = [c_a * ta.data + c_b * tb.data for ta, tb in zip(a.tensors, b.tensors)]
    return ModelParams.from_arrays(arrays, a.arch, a.seed)


# -- checkpoints -----------------------------------------------------------
def _num_list(values) -> str:
    return "[" + ",".join(format(float(v), ".17g") for v in values) + "]"


def checkpoint_text(params: ModelParams) -> str:
    layers = ",\n    ".join(
        '{"w":' + _num_list(w.data.reshape(-1)) + ',"b":' + _num_list(b.data) + "}"
        for w, b in params.layers
    )
    return (
        "{\n"
        f'  "arch": {json.dumps([int(n) for n in params.arch])},\n'
        f'  "seed": {int(params.seed)},\n'
        f'  "layers": [\n    {layers}\n  ]\n'
        "}\n"
    )


def save_checkpoint(params: ModelParams, path) -> None:
    Path(path).write_text(checkpoint_text(params))


def load_checkpoint(path) -> ModelParams:
    doc = json.loads(Path(path).read_text())
    arch = [int(n) for n in doc["arch"]]
    if len(doc["layers"]) != len(arch) - 1:
        raise ArchitectureMismatch(f"checkpoint has {len(doc['layers'])} layers for arch {arch}")
    arrays = []
    for (d_in, d_out), layer in zip(zip(arch[:-1], arch[1:]), doc["layers"]):
        arrays.append(np.asarray(layer["w"], dtype=np.float64).reshape(d_in, d_out))
        arrays.append(np.asarray(layer["b"], dtype=np.float64))
    return ModelParams.from_arrays(arrays, arch, int(doc.get("seed", 0)))
