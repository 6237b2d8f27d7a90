"""Load scenarios sampled from a piecewise-constant load-duration curve."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable

import numpy as np

from .grid import Network

HOURS_PER_YEAR = 8760.0


@dataclass(frozen=True)
class LdSegment:
    index: int
    weight: float  # percent of the year
    alpha: float  # mid loading level
    sigma: float  # relative standard deviation
    alpha_lo: float | None = None
    alpha_hi: float | None = None

    @classmethod
    def from_bounds(cls, index, weight, alpha_lo, alpha_hi):
        """Segment from its loading range; sigma = (hi - mid)/mid."""
        alpha = 0.5 * (alpha_lo + alpha_hi)
        return cls(index, weight, alpha, (alpha_hi - alpha) / alpha, alpha_lo, alpha_hi)

    def __post_init__(self):
        if self.alpha_lo is None:
            # reconstruct the bounds implied by sigma = (hi - mid)/mid
            object.__setattr__(self, "alpha_hi", self.alpha * (1 + self.sigma))
            object.__setattr__(self, "alpha_lo", self.alpha * (1 - self.sigma))
        if not 0 < self.alpha_lo <= self.alpha_hi:
            raise ValueError(f"segment {self.index}: invalid loading range")


@dataclass
class Scenario:
    p_load: np.ndarray  # pu per dense bus
    q_load: np.ndarray
    probability: float = 1.0
    hours_per_year: float = HOURS_PER_YEAR
    year: int = 0
    segment: int = 0
    seed_tag: str = ""

    @property
    def loads(self):
        return self.p_load, self.q_load

    @classmethod
    def base(cls, net: Network, scale: float = 1.0, **kw) -> "Scenario":
        return cls(net.pd * scale, net.qd * scale, **kw)

    def to_json(self) -> str:
        return json.dumps(
            {
                "year": self.year,
                "segment": self.segment,
                "probability": self.probability,
                "hours": self.hours_per_year,
                "seed_tag": self.seed_tag,
                "p_load": self.p_load.tolist(),
                "q_load": self.q_load.tolist(),
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "Scenario":
        d = json.loads(line)
        return cls(
            np.asarray(d["p_load"], float), np.asarray(d["q_load"], float), d["probability"], d["hours"],
            d["year"], d["segment"], d.get("seed_tag", ""),
        )


def default_ld_table() -> list[LdSegment]:
    """Six-segment LD curve: (weight %, loading level, relative sigma)."""
    rows = [
        (5.50, 0.940, 0.064),
        (19.50, 0.845, 0.041),
        (25.00, 0.775, 0.045),
        (25.00, 0.685, 0.080),
        (18.80, 0.590, 0.068),
        (6.20, 0.51, 0.078),
    ]
    return [LdSegment(i + 1, w, a, s) for i, (w, a, s) in enumerate(rows)]


def allocate_samples(segments: list[LdSegment], per_year: int) -> list[int]:
    """Split ``per_year`` samples over segments proportionally to weight (largest remainder, >= 1 each)."""
    m = len(segments)
    if per_year < m:
        raise ValueError(f"need at least one sample per segment ({m}), got {per_year}")
    w = np.array([s.weight for s in segments], float)
    share = per_year * w / w.sum()
    counts = np.floor(share).astype(int)
    short = per_year - counts.sum()
    order = np.argsort(-(share - counts), kind="stable")
    counts[order[:short]] += 1
    for k in np.flatnonzero(counts == 0):
        counts[int(np.argmax(counts))] -= 1
        counts[k] = 1
    return counts.tolist()


def merge_segments(segments: list[LdSegment], n: int) -> list[LdSegment]:
    """Reduce the curve to its ``n`` heaviest segments.

    Each dropped segment's weight goes to the kept segment with the closest
    loading level, so the year's probability mass is unchanged.
    """
    if n < 1:
        raise ValueError("need at least one segment")
    if n >= len(segments):
        return list(segments)
    w = np.array([s.weight for s in segments], float)
    keep = sorted(np.argsort(-w, kind="stable")[:n].tolist())
    alphas = np.array([segments[k].alpha for k in keep])
    extra = np.zeros(n)
    for i, seg in enumerate(segments):
        if i not in keep:
            extra[int(np.argmin(np.abs(alphas - seg.alpha)))] += seg.weight
    return [replace(segments[k], weight=segments[k].weight + extra[j]) for j, k in enumerate(keep)]


def _rng(seed: int, year: int, segment: int, sample: int) -> np.random.Generator:
    # counter-based: each (seed, year, segment, sample) key gets its own Philox stream
    ss = np.random.SeedSequence([seed, year, segment, sample])
    return np.random.Generator(np.random.Philox(ss))


def sample_segment(
    net: Network,
    seg: LdSegment,
    n_i: int,
    growth: float = 0.0,
    year: int = 0,
    seed: int = 0,
    base_loads=None,
) -> list[Scenario]:
    """Gaussian samples around the segment's scaled base load.

    ``base_loads`` (pu P and Q vectors) defaults to the network's loads.
    """
    if n_i < 1:
        raise ValueError("n_i must be >= 1")
    p0, q0 = (net.pd, net.qd) if base_loads is None else base_loads
    factor = seg.alpha * (1.0 + growth) ** year
    mean_p, mean_q = factor * np.asarray(p0, float), factor * np.asarray(q0, float)
    prob = seg.weight / (100.0 * n_i)
    out = []
    for j in range(n_i):
        rng = _rng(seed, year, seg.index, j)
        zp = rng.standard_normal(mean_p.size)
        zq = rng.standard_normal(mean_q.size)
        p = mean_p + seg.sigma * np.abs(mean_p) * zp
        q = mean_q + seg.sigma * np.abs(mean_q) * zq
        # clamp Gaussian tails; negative base loads (injections) stay as sampled
        p = np.where(mean_p >= 0, np.maximum(p, 0.0), p)
        q = np.where(mean_q >= 0, np.maximum(q, 0.0), q)
        out.append(Scenario(p, q, prob, HOURS_PER_YEAR * prob, year, seg.index, f"{seed}/{year}/{seg.index}/{j}"))
    return out


class Congestion(str, Enum):
    UNCONGESTED = "uncongested"
    CONGESTED = "congested"
    INFEASIBLE = "infeasible"


def congestion_filter(
    net: Network,
    segment_scenarios: list[Scenario],
    pf_oracle: Callable[[Network, Scenario], Congestion],
    base: Scenario | None = None,
) -> list[Scenario]:
    """Collapse an all-uncongested segment into its re-scaled base scenario.

    ``base`` is the unperturbed segment scenario (defaults to the first sample).
    Oracle exceptions count as ``infeasible``.
    """
    if not segment_scenarios:
        return []
    labels = []
    for sc in segment_scenarios:
        try:
            labels.append(pf_oracle(net, sc))
        except Exception:  # noqa: BLE001 - the oracle must never abort sampling
            labels.append(Congestion.INFEASIBLE)
    if any(lab != Congestion.UNCONGESTED for lab in labels):
        return list(segment_scenarios)
    mass = sum(sc.probability for sc in segment_scenarios)
    ref = base if base is not None else segment_scenarios[0]
    return [
        Scenario(
            ref.p_load.copy(), ref.q_load.copy(), mass, HOURS_PER_YEAR * mass, ref.year, ref.segment,
            f"{ref.seed_tag}|collapsed" if ref.seed_tag else "collapsed",
        )
    ]


@dataclass
class ScenarioSet:
    scenarios: list[Scenario] = field(default_factory=list)

    def __len__(self):
        return len(self.scenarios)

    def __iter__(self):
        return iter(self.scenarios)

    def __getitem__(self, k):
        return self.scenarios[k]

    @property
    def n_years(self) -> int:
        return max(1, len({s.year for s in self.scenarios}))

    def weights(self) -> np.ndarray:
        """Hours per year each scenario represents, averaged over the years in the set."""
        return np.array([s.hours_per_year for s in self.scenarios], float) / self.n_years

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            for s in self.scenarios:
                fh.write(s.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "ScenarioSet":
        with open(path) as fh:
            return cls([Scenario.from_json(line) for line in fh if line.strip()])


def generate(
    net: Network,
    years: int = 1,
    per_year: int = 16,
    growth: float = 0.0,
    seed: int = 0,
    segments: Iterable[LdSegment] | None = None,
    pf_oracle: Callable[[Network, Scenario], Congestion] | None = None,
    base_loads=None,
    sigma_scale: float = 1.0,
) -> ScenarioSet:
    """Sample ``per_year`` scenarios for each of ``years`` yearly LD curves.

    With ``pf_oracle`` each segment is passed through :func:`congestion_filter`.
    Fewer samples than segments merges the curve (:func:`merge_segments`);
    ``sigma_scale`` multiplies every segment's noise level.
    """
    segments = list(segments) if segments is not None else default_ld_table()
    segments = merge_segments(segments, per_year)
    if sigma_scale != 1.0:
        segments = [replace(s, sigma=s.sigma * sigma_scale, alpha_lo=None, alpha_hi=None) for s in segments]
    counts = allocate_samples(segments, per_year)
    p0, q0 = (net.pd, net.qd) if base_loads is None else base_loads
    out: list[Scenario] = []
    for year in range(years):
        for seg, n_i in zip(segments, counts):
            samples = sample_segment(net, seg, n_i, growth, year, seed, base_loads=(p0, q0))
            if pf_oracle is not None:
                factor = seg.alpha * (1.0 + growth) ** year
                base = Scenario(factor * np.asarray(p0), factor * np.asarray(q0), year=year, segment=seg.index,
                                seed_tag=f"{seed}/{year}/{seg.index}/base")
                samples = congestion_filter(net, samples, pf_oracle, base=base)
            out.extend(samples)
    return ScenarioSet(out)
