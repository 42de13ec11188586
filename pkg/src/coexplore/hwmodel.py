"""Analytic Eyeriss-style accelerator cost model.

This is the ground-truth oracle: closed-form cycle counts, DRAM traffic,
energy and area for a list of conv layers mapped onto a PE array with a
given register-file size and dataflow. It also enumerates the hardware
design space and samples (architecture, hardware, metrics) datasets for
estimator pretraining.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from math import ceil
from pathlib import Path
from typing import IO, Iterator, Sequence

import numpy as np

PE_X = tuple(range(12, 21))
PE_Y = tuple(range(8, 25))
RF_BYTES = (16, 32, 64, 128, 256)
DATAFLOWS = ("WS", "OS", "RS")

# kernel x expand candidates, in candidate-index order
CANDIDATES: tuple[tuple[int, int], ...] = tuple(itertools.product((3, 5, 7), (3, 6)))

CLOCK_HZ = 200e6
E_MAC_PJ = 0.2
E_DRAM_PJ_PER_BYTE = 100.0
AREA_PE_MM2 = 0.01
AREA_RF_MM2_PER_BYTE = 2.0e-5

BASE_CHANNELS = 16
BASE_SIZE = 16


@dataclass(frozen=True)
class LayerShape:
    h_out: int
    w_out: int
    c_in: int
    c_out: int
    k: int
    depthwise: bool = False

    def __post_init__(self):
        if self.k not in (1, 3, 5, 7):
            raise ValueError(f"kernel size {self.k} not in {{1,3,5,7}}")
        if min(self.h_out, self.w_out, self.c_in, self.c_out) < 1:
            raise ValueError(f"non-positive dimension in {self}")
        if self.depthwise and self.c_in != self.c_out:
            raise ValueError("depthwise layer needs c_in == c_out")

    @property
    def macs(self) -> int:
        per_pixel = self.k * self.k * (self.c_out if self.depthwise else self.c_in * self.c_out)
        return self.h_out * self.w_out * per_pixel


@dataclass(frozen=True)
class HwConfig:
    pe_x: int
    pe_y: int
    rf_bytes: int
    dataflow: str

    def __post_init__(self):
        if self.pe_x not in PE_X or self.pe_y not in PE_Y:
            raise ValueError(f"PE array {self.pe_x}x{self.pe_y} outside 12..20 x 8..24")
        if self.rf_bytes not in RF_BYTES:
            raise ValueError(f"register file {self.rf_bytes}B not in {RF_BYTES}")
        if self.dataflow not in DATAFLOWS:
            raise ValueError(f"unknown dataflow {self.dataflow!r}")

    def to_json(self) -> dict:
        return {"pe_x": self.pe_x, "pe_y": self.pe_y, "rf": self.rf_bytes, "df": self.dataflow}

    @classmethod
    def from_json(cls, d: dict) -> "HwConfig":
        return cls(int(d["pe_x"]), int(d["pe_y"]), int(d["rf"]), str(d["df"]))


@dataclass(frozen=True)
class Metrics:
    latency_ms: float
    energy_mJ: float
    area_mm2: float

    NAMES = ("latency_ms", "energy_mJ", "area_mm2")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.latency_ms, self.energy_mJ, self.area_mm2)

    def to_json(self) -> dict:
        return dict(zip(self.NAMES, self.as_tuple()))

    @classmethod
    def from_json(cls, d: dict) -> "Metrics":
        return cls(float(d["latency_ms"]), float(d["energy_mJ"]), float(d["area_mm2"]))

    def __getitem__(self, name: str) -> float:
        if name not in self.NAMES:
            raise KeyError(name)
        return getattr(self, name)


METRIC_NAMES = Metrics.NAMES


@dataclass(frozen=True)
class CostConfig:
    """Weighted-sum hardware cost with per-metric normalization references."""

    c_energy: float = 2.9
    c_latency: float = 6.2
    c_area: float = 1.0
    ref_energy: float = 1.0
    ref_latency: float = 1.0
    ref_area: float = 1.0

    def __post_init__(self):
        coeffs = (self.c_energy, self.c_latency, self.c_area)
        if min(coeffs) < 0 or max(coeffs) <= 0:
            raise ValueError(f"cost coefficients must be >= 0 with one > 0, got {coeffs}")
        refs = (self.ref_energy, self.ref_latency, self.ref_area)
        if min(refs) <= 0:
            raise ValueError(f"normalization references must be positive, got {refs}")

    def weights(self) -> np.ndarray:
        """Per-metric multipliers in (latency, energy, area) order."""
        return np.array([
            self.c_latency / self.ref_latency,
            self.c_energy / self.ref_energy,
            self.c_area / self.ref_area,
        ])

    def with_refs(self, refs: dict) -> "CostConfig":
        return CostConfig(self.c_energy, self.c_latency, self.c_area,
                          ref_energy=refs["energy_mJ"], ref_latency=refs["latency_ms"],
                          ref_area=refs["area_mm2"])


STEM = LayerShape(BASE_SIZE, BASE_SIZE, 3, BASE_CHANNELS, 3)


def mbconv_expand(choices: Sequence[tuple[int, int]], stem: LayerShape = STEM) -> list[LayerShape]:
    """Expand per-block (kernel, expand) choices into conv layers, stem first."""
    layers = [stem]
    c, hw = BASE_CHANNELS, BASE_SIZE
    for choice in choices:
        k, e = tuple(choice)
        if (k, e) not in CANDIDATES:
            raise ValueError(f"invalid MBConv choice (K={k}, e={e})")
        mid = c * e
        layers += [
            LayerShape(hw, hw, c, mid, 1),
            LayerShape(hw, hw, mid, mid, k, depthwise=True),
            LayerShape(hw, hw, mid, c, 1),
        ]
    return layers


def _tiling(layer: LayerShape, dataflow: str) -> tuple[int, int, int]:
    k, h, w = layer.k, layer.h_out, layer.w_out
    c_out = layer.c_out
    c_in = 1 if layer.depthwise else layer.c_in
    if dataflow == "WS":
        return c_out, c_in, k * k * h * w
    if dataflow == "OS":
        return h, w, k * k * c_in * c_out
    return k * c_out, h, k * w * c_in


def layer_cycles(layer: LayerShape, hw: HwConfig) -> int:
    a, b, rest = _tiling(layer, hw.dataflow)
    return ceil(a / hw.pe_x) * ceil(b / hw.pe_y) * rest


def _tensor_bytes(layer: LayerShape) -> tuple[int, int, int]:
    k2 = layer.k * layer.k
    w_b = k2 * layer.c_out if layer.depthwise else k2 * layer.c_in * layer.c_out
    pixels = layer.h_out * layer.w_out
    return w_b, pixels * layer.c_in, pixels * layer.c_out


def layer_dram_bytes(layer: LayerShape, hw: HwConfig) -> int:
    w_b, i_b, o_b = _tensor_bytes(layer)
    q = hw.pe_x * hw.pe_y * hw.rf_bytes
    if hw.dataflow == "WS":
        return w_b + ceil(w_b / q) * (i_b + o_b)
    if hw.dataflow == "OS":
        return o_b + ceil(o_b / q) * (i_b + w_b)
    return w_b + i_b + ceil((w_b + i_b) / q) * o_b


def rf_energy_pj(rf_bytes: int) -> float:
    return 0.03 * (1.0 + rf_bytes / 128.0)


def chip_area(hw: HwConfig) -> float:
    return hw.pe_x * hw.pe_y * (AREA_PE_MM2 + AREA_RF_MM2_PER_BYTE * hw.rf_bytes)


def evaluate(layers: Sequence[LayerShape], hw: HwConfig) -> Metrics:
    if not layers:
        raise ValueError("cannot evaluate an empty network")
    cycles = 0
    energy_pj = 0.0
    e_rf = rf_energy_pj(hw.rf_bytes)
    for layer in layers:
        cycles += layer_cycles(layer, hw)
        m = layer.macs
        energy_pj += m * E_MAC_PJ + 3 * m * e_rf + layer_dram_bytes(layer, hw) * E_DRAM_PJ_PER_BYTE
    return Metrics(
        latency_ms=cycles / (CLOCK_HZ / 1e3),
        energy_mJ=1e-9 * energy_pj,
        area_mm2=chip_area(hw),
    )


def cost_hw(m: Metrics, cfg: CostConfig) -> float:
    return (cfg.c_energy * m.energy_mJ / cfg.ref_energy
            + cfg.c_latency * m.latency_ms / cfg.ref_latency
            + cfg.c_area * m.area_mm2 / cfg.ref_area)


def enumerate_space() -> Iterator[HwConfig]:
    for px, py, rf, df in itertools.product(PE_X, PE_Y, RF_BYTES, DATAFLOWS):
        yield HwConfig(px, py, rf, df)


def grid_search(layers: Sequence[LayerShape], cfg: CostConfig,
                limits: dict[str, float] | None = None) -> tuple[HwConfig, Metrics] | None:
    """Minimum-cost hardware for a fixed network, optionally under upper bounds.

    Ties resolve to the earliest config in :func:`enumerate_space` order.
    Returns ``None`` when no config satisfies ``limits``.
    """
    limits = limits or {}
    best = None
    for hw in enumerate_space():
        m = evaluate(layers, hw)
        if any(m[name] > bound for name, bound in limits.items()):
            continue
        c = cost_hw(m, cfg)
        if best is None or c < best[0]:
            best = (c, hw, m)
    return None if best is None else (best[1], best[2])


# -- dataset sampling -------------------------------------------------------

@dataclass(frozen=True)
class Record:
    arch: tuple[int, ...]  # candidate index per block
    hw: HwConfig
    metrics: Metrics

    def one_hot(self) -> list[list[int]]:
        return [[int(b == c) for b in range(len(CANDIDATES))] for c in self.arch]

    def to_json(self) -> dict:
        return {"arch": self.one_hot(), "hw": self.hw.to_json(), "metrics": self.metrics.to_json()}


_SPACE = None


def _space() -> list[HwConfig]:
    global _SPACE
    if _SPACE is None:
        _SPACE = list(enumerate_space())
    return _SPACE


def sample_record(index: int, seed: int, n_layers: int = 8) -> Record:
    """Record ``index`` of the stream for ``seed``; independent of other records."""
    rng = np.random.default_rng([seed, index])
    arch = tuple(int(c) for c in rng.integers(0, len(CANDIDATES), size=n_layers))
    hw = _space()[int(rng.integers(0, len(_space())))]
    layers = mbconv_expand([CANDIDATES[c] for c in arch])
    return Record(arch, hw, evaluate(layers, hw))


def sample_pairs(n: int, seed: int, n_layers: int = 8) -> list[Record]:
    if n < 1:
        raise ValueError("sample_pairs needs n >= 1")
    return [sample_record(i, seed, n_layers) for i in range(n)]


def write_jsonl(records: Sequence[Record], fh: IO[str]) -> None:
    for r in records:
        fh.write(json.dumps(r.to_json()) + "\n")


class DatasetError(ValueError):
    pass


def read_jsonl(path: str | Path) -> list[Record]:
    """Load a dataset, rejecting malformed lines with their line number."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                arch = []
                for row in d["arch"]:
                    if len(row) != len(CANDIDATES) or sorted(row) != [0] * (len(row) - 1) + [1]:
                        raise ValueError(f"arch row {row} is not one-hot over {len(CANDIDATES)}")
                    arch.append(row.index(1))
                rec = Record(tuple(arch), HwConfig.from_json(d["hw"]), Metrics.from_json(d["metrics"]))
                if min(rec.metrics.as_tuple()) <= 0:
                    raise ValueError("metrics must be positive")
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed record ({exc})") from exc
            records.append(rec)
    return records


def metric_means(records: Sequence[Record]) -> dict[str, float]:
    arr = np.array([r.metrics.as_tuple() for r in records])
    return dict(zip(METRIC_NAMES, (float(x) for x in arr.mean(axis=0))))
