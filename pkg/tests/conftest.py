from dataclasses import replace
from pathlib import Path
from typing import Callable, Iterable, List

import numpy as np
import pytest

from link import LinkKind, LinkModel, load_trace, write_trace

# Mean capacities of the synthetic trace set
TRACE_MEANS_BPS = (1.5e6, 2e6, 2.5e6, 3e6, 4e6)


@pytest.fixture
def trace_file(tmp_path: Path) -> Callable[..., Path]:
    "Writes the given timestamps, one per line, into a trace file"

    def write(timestamps: Iterable[int], name: str = "trace.up") -> Path:
        path = tmp_path / name
        path.write_text("".join(f"{t}\n" for t in timestamps))
        return path

    return write


@pytest.fixture
def fixed_link() -> Callable[..., LinkModel]:
    def build(rate_bps: float, **kwargs) -> LinkModel:
        return LinkModel(
            LinkKind.PIECEWISE_CONSTANT, segments=((1000.0, rate_bps),), **kwargs
        )

    return build


def random_link(rng: np.random.Generator, mean_bps: float, length_ms: float) -> LinkModel:
    """Segments of 200 ms to 1 s with lognormal rates around mean_bps"""
    durations = []  # type: List[float]
    while sum(durations) < length_ms:
        durations.append(float(rng.integers(200, 1001)))
    sigma = 0.5
    rates = mean_bps * rng.lognormal(-(sigma**2) / 2, sigma, len(durations))
    rates = np.clip(rates, 2e5, 12e6)
    return LinkModel(
        LinkKind.PIECEWISE_CONSTANT, segments=tuple(zip(durations, rates.tolist()))
    )


@pytest.fixture(scope="session")
def trace_set(tmp_path_factory) -> List[LinkModel]:
    """Five 30 s cellular-like Mahimahi traces rendered from random links and
    loaded back with opportunity sharing"""
    rng = np.random.default_rng(2024)
    directory = tmp_path_factory.mktemp("traces")
    links = []
    for index, mean in enumerate(TRACE_MEANS_BPS):
        model = random_link(rng, mean, 30_000.0)
        path = write_trace(directory / f"synthetic-{index}.up", model, 30_000.0)
        links.append(replace(load_trace(path), share_opportunities=True))
    return links
