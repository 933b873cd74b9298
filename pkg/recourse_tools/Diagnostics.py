# recourse_tools/Diagnostics.py
"""
Convergence diagnostics and posterior summaries.

All functions take draws shaped (chains, draws). R-hat is the rank-normalized
split statistic, so any strictly monotone transform of the draws leaves it
unchanged. ESS is the bulk ESS (split, rank-normalized) with Geyer's
initial positive and monotone sequence truncation.
"""
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import stats

from recourse_tools.errors import InsufficientChains, InsufficientDraws, EmptyBatch

logger = logging.getLogger('Diagnostics')

RHAT_THRESHOLD = 1.1
RANK_BINS = 20
MIN_DRAWS = 4


def _as_chains(draws):
    draws = np.asarray(draws, dtype=float)
    if draws.ndim == 1:
        draws = draws[None, :]
    if draws.ndim != 2:
        raise ValueError(f"draws must be (chains, draws), got shape {draws.shape}")
    return draws


def split_chains(draws):
    half = draws.shape[1] // 2
    return np.vstack((draws[:, :half], draws[:, -half:]))


def z_scale(draws):
    """Average ranks mapped to standard-normal quantiles."""
    rank = stats.rankdata(draws, method='average').reshape(draws.shape)
    return stats.norm.ppf((rank - 0.5) / draws.size)


def _rhat(draws):
    n = draws.shape[1]
    chain_mean = draws.mean(axis=1)
    within = np.mean(draws.var(axis=1, ddof=1))
    between = n * np.var(chain_mean, ddof=1)
    if within == 0:
        return np.nan
    return float(np.sqrt((between / within + n - 1) / n))


def is_constant(draws):
    return bool(np.ptp(np.asarray(draws)) == 0)


def split_rhat(draws):
    """Rank-normalized split R-hat. Constant draws give 1.0 (see is_constant)."""
    draws = _as_chains(draws)
    if draws.shape[0] < 2:
        raise InsufficientChains(f"R-hat needs at least 2 chains, got {draws.shape[0]}")
    if draws.shape[1] < MIN_DRAWS:
        raise InsufficientDraws(f"R-hat needs at least {MIN_DRAWS} draws per chain, got {draws.shape[1]}")
    if is_constant(draws):
        return 1.0
    return _rhat(z_scale(split_chains(draws)))


def autocov(x):
    """Autocovariance of a 1-D series via FFT (biased, lag 0..n-1)."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    centered = x - x.mean()
    spectrum = np.fft.rfft(centered, n=size)
    acov = np.fft.irfft(spectrum * np.conjugate(spectrum), n=size)[:n]
    return acov / n


def _ess(draws):
    n_chain, n_draw = draws.shape
    acov = np.asarray([autocov(chain) for chain in draws])
    chain_mean = draws.mean(axis=1)
    mean_var = np.mean(acov[:, 0]) * n_draw / (n_draw - 1.0)
    var_plus = mean_var * (n_draw - 1.0) / n_draw
    if n_chain > 1:
        var_plus += np.var(chain_mean, ddof=1)

    rho = np.zeros(n_draw)
    rho_even = 1.0
    rho[0] = rho_even
    rho_odd = 1.0 - (mean_var - np.mean(acov[:, 1])) / var_plus
    rho[1] = rho_odd

    # Initial positive sequence.
    t = 1
    while t < n_draw - 2 and rho_even + rho_odd >= 0.0:
        rho_even = 1.0 - (mean_var - np.mean(acov[:, t + 1])) / var_plus
        rho_odd = 1.0 - (mean_var - np.mean(acov[:, t + 2])) / var_plus
        rho[t + 1] = rho_even
        if rho_even + rho_odd >= 0:
            rho[t + 2] = rho_odd
        t += 2
    max_t = t

    # Initial monotone sequence.
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0
            rho[t + 2] = rho[t + 1]
        t += 2

    tau = -1.0 + 2.0 * np.sum(rho[:max_t]) + np.sum(rho[max_t + 1:max_t + 2])
    return float(n_chain * n_draw / tau)


def ess(draws):
    """Bulk effective sample size over all chains."""
    draws = _as_chains(draws)
    if draws.shape[1] < MIN_DRAWS:
        raise InsufficientDraws(f"ESS needs at least {MIN_DRAWS} draws per chain, got {draws.shape[1]}")
    if is_constant(draws):
        raise InsufficientDraws("ESS is undefined for constant draws")
    return _ess(z_scale(split_chains(draws)))


def rank_histogram(draws, bins=RANK_BINS):
    """Per-chain counts of pooled ranks in `bins` equal-width bins -> (chains, bins)."""
    draws = _as_chains(draws)
    ranks = stats.rankdata(draws, method='average').reshape(draws.shape)
    edges = np.linspace(0.5, draws.size + 0.5, bins + 1)
    return np.array([np.histogram(r, bins=edges)[0] for r in ranks], dtype=int)


@dataclass(frozen=True)
class ParamSummary:
    name: str
    median: float
    mean: float
    sd: float
    iqr: float
    lower: float
    upper: float
    rhat: float
    ess: float
    rank_counts: np.ndarray
    degenerate: bool = False
    note: str = ''

    @property
    def rhat_available(self):
        return not np.isnan(self.rhat)

    @property
    def converged(self):
        return self.rhat_available and self.rhat < RHAT_THRESHOLD

    def to_dict(self):
        return {'parameter': self.name, 'median': self.median, 'mean': self.mean, 'sd': self.sd,
                'iqr': self.iqr, 'lower': self.lower, 'upper': self.upper, 'rhat': self.rhat,
                'ess_bulk': self.ess, 'rhat_available': self.rhat_available,
                'degenerate': self.degenerate, 'note': self.note}


def summarize_one(name, draws, level=0.9, bins=RANK_BINS):
    draws = _as_chains(draws)
    pooled = draws.ravel()
    tail = (1.0 - level) / 2.0
    q = np.quantile(pooled, [tail, 0.25, 0.5, 0.75, 1.0 - tail])
    degenerate = is_constant(draws)
    notes = []
    try:
        rhat = split_rhat(draws)
    except (InsufficientChains, InsufficientDraws) as e:
        rhat = np.nan
        notes.append(f"{type(e).__name__}: {e}")
    try:
        ess_value = ess(draws)
    except InsufficientDraws as e:
        ess_value = np.nan
        if not degenerate:
            notes.append(f"{type(e).__name__}: {e}")
    return ParamSummary(
        name=name, median=float(q[2]), mean=float(pooled.mean()),
        sd=float(pooled.std(ddof=1)) if len(pooled) > 1 else 0.0,
        iqr=float(q[3] - q[1]), lower=float(q[0]), upper=float(q[4]),
        rhat=rhat, ess=ess_value, rank_counts=rank_histogram(draws, bins), degenerate=degenerate,
        note='; '.join(notes),
    )


def summarize(draws, names, level=0.9, bins=RANK_BINS):
    """ParamSummary per parameter of a (chains, draws, params) array."""
    draws = np.asarray(draws, dtype=float)
    if draws.size == 0:
        raise EmptyBatch("no draws to summarize")
    if draws.ndim != 3 or draws.shape[2] != len(names):
        raise ValueError(f"draws shape {draws.shape} does not match {len(names)} names")
    summaries = [summarize_one(name, draws[:, :, j], level, bins) for j, name in enumerate(names)]
    if draws.shape[0] < 2:
        logger.warning("Single chain: rank R-hat unavailable")
    else:
        bad = [s.name for s in summaries if s.rhat_available and not s.converged]
        if bad:
            logger.warning(f"{len(bad)} parameter(s) with R-hat >= {RHAT_THRESHOLD}: {', '.join(bad[:5])}")
    return summaries


def draws_from_frame(frame, columns):
    """(chains, draws, params) array from a samples frame with 'chain' and 'draw' columns."""
    if len(frame) == 0:
        raise EmptyBatch("samples frame is empty")
    ordered = frame.sort_values(['chain', 'draw'])
    chains = ordered['chain'].unique()
    counts = ordered.groupby('chain').size()
    n = int(counts.min())
    if counts.max() != n:
        logger.warning(f"Chains have unequal lengths; truncating to {n} draws each")
    return np.stack([ordered.loc[ordered['chain'] == c, columns].to_numpy(dtype=float)[:n] for c in chains])


def summary_frame(summaries):
    return pd.DataFrame([s.to_dict() for s in summaries])


def rank_histogram_frame(summaries, chain_ids=None):
    """Plot-ready long form: parameter, chain, bin, count."""
    records = []
    for s in summaries:
        ids = chain_ids if chain_ids is not None else range(s.rank_counts.shape[0])
        for chain, counts in zip(ids, s.rank_counts):
            records.extend({'parameter': s.name, 'chain': chain, 'bin': b, 'count': int(c)}
                           for b, c in enumerate(counts))
    return pd.DataFrame.from_records(records, columns=['parameter', 'chain', 'bin', 'count'])
