"""Comparison models: chain ladder with ODP bootstrap, and independent activation."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaincinv

from .bundle import FittedModelBundle
from .domain import Portfolio
from .errors import ConfigurationError, DegenerateDispersionError, UndefinedFactorError
from .glm import IndependentActivation
from .ingestion import LossTriangle, build_triangle
from .rng import StreamFamily
from .simulation import ReservePredictiveDistribution, SimulationConfig, run_reserving, value_at_risk


@dataclass(frozen=True, eq=False)
class ChainLadderResult:
    origin_years: tuple[int, ...]
    factors: np.ndarray  # f_d links column d to d + 1 (0-based)
    ultimates: np.ndarray
    point_by_origin: np.ndarray
    dispersion: float | None = None
    boot_by_origin: np.ndarray | None = None  # (n_boot, n_origins)
    coverage: str | None = None

    @property
    def point_reserve(self) -> float:
        return float(self.point_by_origin.sum())

    @property
    def boot_total(self) -> np.ndarray | None:
        return None if self.boot_by_origin is None else self.boot_by_origin.sum(axis=1)

    def summary(self, q: float = 0.95) -> dict:
        out = {"point": self.point_reserve, "factors": self.factors.tolist(), "dispersion": self.dispersion}
        if self.boot_by_origin is not None:
            t = self.boot_total
            out.update(mean=float(t.mean()), q=q, VaR=value_at_risk(t, q), n_boot=int(t.size))
        return out


def _latest(observed: np.ndarray) -> np.ndarray:
    idx = np.where(observed, np.arange(observed.shape[1]), -1)
    return idx.max(axis=1)


def _check_shape(tri: LossTriangle):
    obs = tri.observed
    # rows must be observed on a prefix of the development columns
    if np.any(obs[:, 1:] & ~obs[:, :-1]):
        raise ConfigurationError("triangle rows must be observed on a prefix of development years")


def _factors(cum: np.ndarray, observed: np.ndarray, strict: bool) -> np.ndarray:
    """Volume-weighted factors over rows observing both columns; ``cum`` may carry a leading batch axis."""
    both = observed[:, 1:] & observed[:, :-1]
    num = np.where(both, np.nan_to_num(cum[..., 1:]), 0.0).sum(axis=-2)
    den = np.where(both, np.nan_to_num(cum[..., :-1]), 0.0).sum(axis=-2)
    if strict:
        bad = np.flatnonzero((den <= 0) | ~both.any(axis=0))
        if bad.size:
            raise UndefinedFactorError(int(bad[0] + 1))
        return num / den
    # pseudo-triangles may degenerate; such links are taken as 1
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0)


def _project(latest_cum: np.ndarray, latest: np.ndarray, f: np.ndarray, n_dev: int) -> np.ndarray:
    """Projected cumulative values for every column past each row's latest one."""
    ones = np.ones(f.shape[:-1] + (1,))
    cumf = np.cumprod(np.concatenate([ones, f], axis=-1), axis=-1)  # cumf[d] = prod f[0:d]
    n_o = latest.shape[0]
    out = np.zeros(latest_cum.shape + (n_dev,))
    for o in range(n_o):
        lo = latest[o]
        if lo < 0:
            continue
        ratio = cumf[..., :] / cumf[..., lo:lo + 1]
        out[..., o, :] = latest_cum[..., o, None] * np.where(np.arange(n_dev) >= lo, ratio, np.nan)
    return out


def chain_ladder_point(triangle: LossTriangle) -> ChainLadderResult:
    """Deterministic chain ladder; rows with no observed cell get no reserve."""
    _check_shape(triangle)
    if triangle.n_origins < 2 or triangle.n_dev < 2 or not triangle.observed[:, 1].any():
        raise ConfigurationError("chain ladder needs at least two origin and two development years")
    cum = triangle.cumulative()
    f = _factors(cum, triangle.observed, strict=True)
    latest = _latest(triangle.observed)
    latest_cum = np.array([cum[o, l] if l >= 0 else 0.0 for o, l in enumerate(latest)])
    proj = _project(latest_cum, latest, f, triangle.n_dev)
    ult = np.where(latest >= 0, proj[:, -1], 0.0)
    return ChainLadderResult(tuple(triangle.origin_years), f, ult, ult - latest_cum, coverage=triangle.coverage)


# --- bootstrap draws -------------------------------------------------------------

class StreamBootstrapDraws:
    """Residual indices and Gamma process errors from counter-based streams.

    Replication ``b`` uses stream ``b`` whatever the chunking, so results do
    not depend on the worker count.
    """

    def __init__(self, seed: int | StreamFamily):
        self.family = seed if isinstance(seed, StreamFamily) else StreamFamily(seed)

    def residuals(self, reps: np.ndarray, pool: np.ndarray, n_cells: int) -> np.ndarray:
        u = self.family.uniforms(reps[:, None], np.arange(n_cells, dtype=np.uint64)[None, :], 0, 1)[..., 0]
        return pool[np.minimum((u * pool.size).astype(np.int64), pool.size - 1)]

    def process(self, reps: np.ndarray, mean: np.ndarray, phi: float) -> np.ndarray:
        """Gamma draws with the given means and variance ``phi * |mean|``, sign kept."""
        n = mean.shape[-1]
        u = self.family.uniforms(reps[:, None], np.arange(n, dtype=np.uint64)[None, :], 1, 1)[..., 0]
        m = np.abs(mean)
        shape = np.where(m > 0, m / phi, 1.0)
        draw = np.where(m > 0, gammaincinv(shape, u) * phi, 0.0)
        return np.sign(mean) * draw


class ZeroNoiseDraws:
    """Degenerate draws: zero residuals and process draws equal to their means."""

    def residuals(self, reps, pool, n_cells):
        return np.zeros((len(reps), n_cells))

    def process(self, reps, mean, phi):
        return np.array(mean, dtype=np.float64, copy=True)


def _as_draws(rng):
    if rng is None:
        return StreamBootstrapDraws(0)
    if isinstance(rng, (int, np.integer, StreamFamily)):
        return StreamBootstrapDraws(rng)
    if hasattr(rng, "residuals") and hasattr(rng, "process"):
        return rng
    raise ConfigurationError("rng must be a seed, a StreamFamily or a draws object")


def chain_ladder_odp_bootstrap(
    triangle: LossTriangle,
    n_boot: int,
    rng=None,
    *,
    workers: int = 1,
    chunk_size: int = 2000,
) -> ChainLadderResult:
    """Pearson-residual bootstrap of the over-dispersed Poisson chain ladder.

    Fitted increments come from back-projecting the latest diagonal with the
    point factors.  Residuals are scaled by ``sqrt(n / (n - p))`` and
    resampled onto every observed cell; pseudo increments are floored at 0,
    the factors refitted and the future increments drawn from Gamma laws with
    mean ``m`` and variance ``phi * m``.
    """
    if n_boot < 1:
        raise ConfigurationError("n_boot must be >= 1")
    point = chain_ladder_point(triangle)
    draws = _as_draws(rng)
    obs = triangle.observed
    n_o, n_d = obs.shape
    cum = triangle.cumulative()
    latest = _latest(obs)
    f = point.factors
    cumf = np.concatenate([[1.0], np.cumprod(f)])

    # fitted cumulative values back-projected from the latest diagonal
    fit_cum = np.zeros((n_o, n_d))
    for o in range(n_o):
        lo = latest[o]
        if lo >= 0:
            fit_cum[o, : lo + 1] = cum[o, lo] * cumf[: lo + 1] / cumf[lo]
    mu = np.where(obs, np.diff(fit_cum, axis=1, prepend=0.0), 0.0)
    cells = np.flatnonzero(obs.ravel())
    mu_c = mu.ravel()[cells]
    x_c = triangle.cells.ravel()[cells]
    pos = mu_c > 0
    resid = np.zeros_like(mu_c)
    resid[pos] = (x_c[pos] - mu_c[pos]) / np.sqrt(mu_c[pos])
    n = int(pos.sum())
    p = n_o + n_d - 1
    if n - p <= 0:
        raise DegenerateDispersionError(f"{n} positive cells cannot support {p} parameters")
    phi = float((resid[pos] ** 2).sum() / (n - p))
    if not phi > 0:
        raise DegenerateDispersionError("estimated dispersion is not positive")
    pool = resid[pos] * np.sqrt(n / (n - p))
    future = ~obs & (latest[:, None] >= 0) & (np.arange(n_d)[None, :] > latest[:, None])

    def future_means(pseudo: np.ndarray) -> np.ndarray:
        """Chain-ladder means of the future increments of pseudo-triangles ``(B, n_o, n_d)``."""
        pcum = np.where(obs, np.cumsum(pseudo, axis=2), np.nan)
        fb = _factors(pcum, obs, strict=False)
        pl = np.where(latest >= 0, np.nan_to_num(pcum[:, np.arange(n_o), np.maximum(latest, 0)]), 0.0)
        proj = _project(pl, latest, fb, n_d)
        inc = np.diff(np.nan_to_num(proj), axis=2, prepend=0.0)
        return np.where(future[None], inc, 0.0)

    # the same computation on the fitted triangle differs from the point
    # reserve only by rounding; that offset is removed from every replication
    fitted = np.zeros((1, n_o * n_d))
    fitted[:, cells] = np.where(pos, mu_c, 0.0)
    offset = point.point_by_origin - future_means(fitted.reshape(1, n_o, n_d)).sum(axis=2)[0]

    def run(reps: np.ndarray) -> np.ndarray:
        B = reps.size
        r = draws.residuals(reps, pool, cells.size)
        pseudo = np.zeros((B, n_o * n_d))
        pseudo[:, cells] = np.where(pos, np.maximum(mu_c + r * np.sqrt(np.where(pos, mu_c, 0.0)), 0.0), 0.0)
        m = future_means(pseudo.reshape(B, n_o, n_d))
        sims = draws.process(reps, m.reshape(B, -1), phi).reshape(B, n_o, n_d)
        by_origin = np.where(future[None], sims, 0.0).sum(axis=2) + offset
        return np.maximum(by_origin, 0.0)

    starts = list(range(0, n_boot, chunk_size))
    chunks = [np.arange(s, min(s + chunk_size, n_boot), dtype=np.int64) for s in starts]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return ChainLadderResult(
        point.origin_years, f, point.ultimates, point.point_by_origin, phi, np.concatenate(parts), triangle.coverage
    )


def odp_reserves(portfolio: Portfolio, eval_date, n_boot: int, seed: int = 0, workers: int = 1) -> dict[str, ChainLadderResult]:
    """One bootstrap per coverage triangle plus one on the total triangle."""
    out = {}
    fam = StreamFamily(seed)
    keys = list(portfolio.coverages) + ["total"]
    for k, name in enumerate(keys):
        tri = build_triangle(portfolio, eval_date, None if name == "total" else name)
        # distinct key per triangle: replication ordinals are shifted by 2^32 * k
        draws = _ShiftedDraws(StreamBootstrapDraws(fam), k << 32)
        out[name] = chain_ladder_odp_bootstrap(tri, n_boot, draws, workers=workers)
    return out


class _ShiftedDraws:
    def __init__(self, inner, offset: int):
        self.inner, self.offset = inner, offset

    def residuals(self, reps, pool, n_cells):
        return self.inner.residuals(reps + self.offset, pool, n_cells)

    def process(self, reps, mean, phi):
        return self.inner.process(reps + self.offset, mean, phi)


def independence_reserving(
    portfolio: Portfolio, bundle: FittedModelBundle, config: SimulationConfig, source=None
) -> ReservePredictiveDistribution:
    """Reserve simulation with independently activated coverages.

    The engine is the one of :func:`~covreserve.simulation.run_reserving`;
    only the activation transition table differs.
    """
    if not all(isinstance(a, IndependentActivation) for a in bundle.activation):
        raise ConfigurationError("independence_reserving needs a bundle from fit_independence_bundle")
    return run_reserving(portfolio, bundle, config, source)
