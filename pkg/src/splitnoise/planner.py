"""Latency-driven choice of the edge/cloud cut point.

Given per-layer execution times on both devices plus link bandwidth and
latency, the planner prices every valid cut (edge compute + activation
transmission + cloud compute) and picks the cheapest one.  The raw input
is never a candidate, so even when shipping the input would be fastest
the chosen cut keeps at least one computational layer on the edge.
Ties break toward the deeper cut (more work stays on the edge).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .network import NetworkSpec, Split, make_split, valid_cuts
from .runtime import activation_frame_bytes


class ProfileError(Exception):
    pass


@dataclass(frozen=True)
class DeviceProfile:
    """Measured per-layer times (ms) and link characteristics."""

    edge_ms: Mapping[str, float]
    cloud_ms: Mapping[str, float]
    bandwidth_bytes_per_s: float
    latency_ms: float

    def __post_init__(self):
        if self.bandwidth_bytes_per_s <= 0:
            raise ProfileError("bandwidth must be positive")
        if self.latency_ms < 0:
            raise ProfileError("latency must be non-negative")
        for side, table in (("edge", self.edge_ms), ("cloud", self.cloud_ms)):
            for name, ms in table.items():
                if not math.isfinite(ms) or ms < 0:
                    raise ProfileError(f"{side} time for {name!r} must be finite and >= 0")

    def validate(self, net: NetworkSpec) -> None:
        for layer in net.layers:
            for side, table in (("edge", self.edge_ms), ("cloud", self.cloud_ms)):
                if layer.name not in table:
                    raise ProfileError(f"profile has no {side} time for layer {layer.name!r}")

    def scaled(self, c: float) -> "DeviceProfile":
        """All costs scaled by ``c``: times multiply, bandwidth divides."""
        if c <= 0:
            raise ProfileError("scale must be positive")
        return DeviceProfile(
            edge_ms={k: v * c for k, v in self.edge_ms.items()},
            cloud_ms={k: v * c for k, v in self.cloud_ms.items()},
            bandwidth_bytes_per_s=self.bandwidth_bytes_per_s / c,
            latency_ms=self.latency_ms * c,
        )


@dataclass(frozen=True)
class CostRow:
    cut: int
    edge_ms: float
    transmit_bytes: int
    transmit_ms: float
    cloud_ms: float
    total_ms: float


def parse_profile(text: str) -> DeviceProfile:
    """Parse the profile text format.

    Lines: ``bandwidth_bytes_per_s <float>``, ``latency_ms <float>``, and
    one ``edge <layer> <ms>`` / ``cloud <layer> <ms>`` pair per layer.
    """
    bandwidth = None
    latency = None
    edge: dict[str, float] = {}
    cloud: dict[str, float] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "bandwidth_bytes_per_s" and len(parts) == 2:
                bandwidth = float(parts[1])
            elif parts[0] == "latency_ms" and len(parts) == 2:
                latency = float(parts[1])
            elif parts[0] in ("edge", "cloud") and len(parts) == 3:
                table = edge if parts[0] == "edge" else cloud
                if parts[1] in table:
                    raise ProfileError(f"line {lineno}: duplicate entry for {parts[1]!r}")
                table[parts[1]] = float(parts[2])
            else:
                raise ProfileError(f"line {lineno}: cannot parse {line!r}")
        except ValueError:
            raise ProfileError(f"line {lineno}: bad number in {line!r}")
    if bandwidth is None or latency is None:
        raise ProfileError("profile needs bandwidth_bytes_per_s and latency_ms lines")
    return DeviceProfile(
        edge_ms=edge, cloud_ms=cloud, bandwidth_bytes_per_s=bandwidth, latency_ms=latency
    )


def render_profile(profile: DeviceProfile) -> str:
    out = [
        f"bandwidth_bytes_per_s {profile.bandwidth_bytes_per_s!r}",
        f"latency_ms {profile.latency_ms!r}",
    ]
    out += [f"edge {name} {ms!r}" for name, ms in profile.edge_ms.items()]
    out += [f"cloud {name} {ms!r}" for name, ms in profile.cloud_ms.items()]
    return "\n".join(out) + "\n"


def load_profile(path) -> DeviceProfile:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_profile(fh.read())


def build_cost_table(net: NetworkSpec, profile: DeviceProfile) -> list[CostRow]:
    """One row per valid cut; candidates are exactly the valid split points."""
    profile.validate(net)
    shapes = net.activation_shapes()
    rows = []
    for cut in valid_cuts(net):
        edge = sum(profile.edge_ms[l.name] for l in net.layers[: cut + 1])
        cloud = sum(profile.cloud_ms[l.name] for l in net.layers[cut + 1 :])
        nbytes = activation_frame_bytes(shapes[cut])
        transmit = nbytes / profile.bandwidth_bytes_per_s * 1000.0
        total = edge + transmit + profile.latency_ms + cloud
        rows.append(
            CostRow(
                cut=cut,
                edge_ms=edge,
                transmit_bytes=nbytes,
                transmit_ms=transmit,
                cloud_ms=cloud,
                total_ms=total,
            )
        )
    return rows


def choose_cut(table: list[CostRow]) -> CostRow:
    """Row with the minimum total; ties go to the deeper cut."""
    if not table:
        raise ProfileError("no valid cuts to choose from")
    best = table[0]
    for row in table[1:]:
        if row.total_ms <= best.total_ms:
            best = row
    return best


def choose_split(net: NetworkSpec, profile: DeviceProfile) -> Split:
    return make_split(net, choose_cut(build_cost_table(net, profile)).cut)
