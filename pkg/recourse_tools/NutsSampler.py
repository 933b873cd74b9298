# recourse_tools/NutsSampler.py
"""
No-U-Turn Hamiltonian Monte Carlo over a flat unconstrained vector.

The target is any callable theta -> (log density, gradient) that raises
NonFinite where it cannot be evaluated. Each chain owns a Philox stream
keyed by (master seed + chain index), so draws do not depend on how chains
are scheduled across threads.

Warm-up:
    dual averaging of the step size toward `target_accept` over the whole
    burn-in; with mass_matrix = diagonal, draws from the second half of the
    burn-in are used for the inverse mass and step-size averaging restarts
    for the last eighth, unless the window closes on the final warm-up
    iteration. Everything is frozen after burn-in.
"""
import logging
import queue
import threading
import time
from dataclasses import dataclass

import numpy as np
import pandas as pd

from recourse_tools.errors import NonFinite, AdaptationDiverged, AllChainsDiverged, SchemaError

logger = logging.getLogger('NutsSampler')

MIN_STEP_SIZE = 1e-10
INIT_ATTEMPTS = 100
MASS_MATRIX_MODES = ('identity', 'diagonal')


@dataclass(frozen=True)
class NutsConfig:
    burn_in: int = 5000
    n_samples: int = 1000
    n_chains: int = 4
    target_accept: float = 0.8
    max_depth: int = 10
    step_size: float = 0.1
    mass_matrix: str = 'identity'
    seed: int = 0
    max_energy_error: float = 1000.0
    init_radius: float = 2.0

    def __post_init__(self):
        if self.burn_in < 0 or self.n_samples < 1 or self.n_chains < 1:
            raise SchemaError("need burn_in >= 0, n_samples >= 1 and n_chains >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise SchemaError(f"target_accept {self.target_accept} outside (0, 1)")
        if not 1 <= self.max_depth <= 15:
            raise SchemaError(f"max_depth {self.max_depth} outside [1, 15]")
        if self.step_size <= 0:
            raise SchemaError("step_size must be positive")
        if self.mass_matrix not in MASS_MATRIX_MODES:
            raise SchemaError(f"mass_matrix must be one of {MASS_MATRIX_MODES}")

    def replace(self, **changes):
        values = {key: getattr(self, key) for key in self.__dataclass_fields__}
        values.update({k: v for k, v in changes.items() if v is not None})
        return NutsConfig(**values)

    def to_dict(self):
        return {key: getattr(self, key) for key in self.__dataclass_fields__}

    @classmethod
    def from_config(cls, config, section='sampler'):
        if not config.has_section(section):
            return cls()
        values = {}
        casts = {'burn_in': int, 'n_samples': int, 'n_chains': int, 'max_depth': int, 'seed': int,
                 'target_accept': float, 'step_size': float, 'max_energy_error': float,
                 'init_radius': float, 'mass_matrix': str}
        for key, cast in casts.items():
            if config.has_option(section, key):
                raw = config.get(section, key).strip()
                try:
                    values[key] = cast(raw)
                except ValueError:
                    raise SchemaError(f"[{section}] {key}: cannot parse '{raw}'") from None
        return cls(**values)


# ---------------------------------------------------------------------------
# Integrator and tree building
# ---------------------------------------------------------------------------

def leapfrog(q, p, step_size, grad_fn, inv_mass=1.0, grad=None):
    """Half kick, drift, half kick.

    Returns (q', p', log density at q', gradient at q'). `grad` is the
    gradient at q when already known.
    """
    if grad is None:
        grad = grad_fn(q)[1]
    p_half = p + 0.5 * step_size * grad
    q_new = q + step_size * inv_mass * p_half
    logp_new, grad_new = grad_fn(q_new)
    p_new = p_half + 0.5 * step_size * grad_new
    return q_new, p_new, logp_new, grad_new


@dataclass
class _Tree:
    q_minus: np.ndarray
    p_minus: np.ndarray
    g_minus: np.ndarray
    q_plus: np.ndarray
    p_plus: np.ndarray
    g_plus: np.ndarray
    q_prop: np.ndarray
    logp_prop: float
    g_prop: np.ndarray
    n_valid: int
    keep_going: bool
    sum_accept: float
    n_steps: int
    divergent: bool


def _kinetic(p, inv_mass):
    return 0.5 * float(np.dot(p * inv_mass, p))


def _no_u_turn(q_minus, q_plus, p_minus, p_plus, inv_mass):
    dq = q_plus - q_minus
    return np.dot(dq, inv_mass * p_minus) >= 0 and np.dot(dq, inv_mass * p_plus) >= 0


class Chain:
    """One NUTS chain: its RNG, adapted step size and mass, and its draws."""

    def __init__(self, index, target, dim, config, init=None):
        self.index = index
        self.target = target
        self.dim = dim
        self.config = config
        self.rng = np.random.Generator(np.random.Philox(config.seed + index))
        self.step_size = config.step_size
        self.inv_mass = np.ones(dim)
        self.warmup_divergences = 0
        self.q, self.logp, self.grad = self._initial_point(init)

        n = config.n_samples
        self.draws = np.empty((n, dim))
        self.log_posterior = np.empty(n)
        self.divergent = np.zeros(n, dtype=bool)
        self.accept_stat = np.empty(n)
        self.tree_depth = np.empty(n, dtype=int)
        self.step_size_trace = np.empty(n)
        self.elapsed = 0.0

    def _initial_point(self, init):
        if init is not None:
            q = np.array(init, dtype=float)
            logp, grad = self.target(q)
            return q, logp, grad
        radius = self.config.init_radius
        for _ in range(INIT_ATTEMPTS):
            q = self.rng.uniform(-radius, radius, size=self.dim)
            try:
                logp, grad = self.target(q)
            except NonFinite:
                continue
            return q, logp, grad
        raise NonFinite(f"chain {self.index}: no finite starting point in {INIT_ATTEMPTS} attempts")

    def _evaluate(self, q, p, g, step):
        try:
            return leapfrog(q, p, step, self.target, self.inv_mass, grad=g)
        except NonFinite:
            return None

    def _build_tree(self, q, p, g, log_u, direction, depth, joint0):
        if depth == 0:
            step = direction * self.step_size
            result = self._evaluate(q, p, g, step)
            if result is None:
                return _Tree(q, p, g, q, p, g, q, -np.inf, g, 0, False, 0.0, 1, True)
            q1, p1, logp1, g1 = result
            joint1 = logp1 - _kinetic(p1, self.inv_mass)
            divergent = not np.isfinite(joint1) or joint0 - joint1 > self.config.max_energy_error
            accept = 0.0 if not np.isfinite(joint1) else min(1.0, float(np.exp(joint1 - joint0)))
            return _Tree(q1, p1, g1, q1, p1, g1, q1, logp1, g1,
                         int(log_u <= joint1), not divergent, accept, 1, divergent)

        tree = self._build_tree(q, p, g, log_u, direction, depth - 1, joint0)
        if not tree.keep_going:
            return tree
        if direction == -1:
            other = self._build_tree(tree.q_minus, tree.p_minus, tree.g_minus, log_u, direction, depth - 1, joint0)
            tree.q_minus, tree.p_minus, tree.g_minus = other.q_minus, other.p_minus, other.g_minus
        else:
            other = self._build_tree(tree.q_plus, tree.p_plus, tree.g_plus, log_u, direction, depth - 1, joint0)
            tree.q_plus, tree.p_plus, tree.g_plus = other.q_plus, other.p_plus, other.g_plus
        total = tree.n_valid + other.n_valid
        if total > 0 and self.rng.uniform() < other.n_valid / total:
            tree.q_prop, tree.logp_prop, tree.g_prop = other.q_prop, other.logp_prop, other.g_prop
        tree.n_valid = total
        tree.sum_accept += other.sum_accept
        tree.n_steps += other.n_steps
        tree.divergent = tree.divergent or other.divergent
        tree.keep_going = other.keep_going and _no_u_turn(
            tree.q_minus, tree.q_plus, tree.p_minus, tree.p_plus, self.inv_mass)
        return tree

    def nuts_step(self):
        """One transition. Returns (mean acceptance statistic, divergent, depth)."""
        p0 = self.rng.standard_normal(self.dim) / np.sqrt(self.inv_mass)
        joint0 = self.logp - _kinetic(p0, self.inv_mass)
        log_u = joint0 + np.log(self.rng.uniform())

        q_minus = q_plus = self.q
        p_minus = p_plus = p0
        g_minus = g_plus = self.grad
        n_valid, depth = 1, 0
        keep_going, divergent = True, False
        sum_accept, n_steps = 0.0, 0
        while keep_going and depth < self.config.max_depth:
            direction = -1 if self.rng.uniform() < 0.5 else 1
            if direction == -1:
                tree = self._build_tree(q_minus, p_minus, g_minus, log_u, direction, depth, joint0)
                q_minus, p_minus, g_minus = tree.q_minus, tree.p_minus, tree.g_minus
            else:
                tree = self._build_tree(q_plus, p_plus, g_plus, log_u, direction, depth, joint0)
                q_plus, p_plus, g_plus = tree.q_plus, tree.p_plus, tree.g_plus
            if tree.keep_going and self.rng.uniform() < min(1.0, tree.n_valid / n_valid):
                self.q, self.logp, self.grad = tree.q_prop, tree.logp_prop, tree.g_prop
            n_valid += tree.n_valid
            sum_accept += tree.sum_accept
            n_steps += tree.n_steps
            divergent = divergent or tree.divergent
            keep_going = tree.keep_going and _no_u_turn(q_minus, q_plus, p_minus, p_plus, self.inv_mass)
            depth += 1
        return sum_accept / max(n_steps, 1), divergent, depth

    # ------------------------------------------------------------------
    # Warm-up and sampling
    # ------------------------------------------------------------------

    def adapt(self):
        """Burn-in with dual-averaging step size (and diagonal mass) adaptation."""
        burn_in = self.config.burn_in
        if burn_in == 0:
            return self.step_size
        diagonal = self.config.mass_matrix == 'diagonal'
        window_start, window_end = burn_in // 2, burn_in - burn_in // 8
        window = []
        averager = DualAveraging(self.step_size, self.config.target_accept)
        for i in range(burn_in):
            accept, divergent, _ = self.nuts_step()
            self.warmup_divergences += int(divergent)
            self.step_size = averager.update(accept)
            if self.step_size < MIN_STEP_SIZE:
                raise AdaptationDiverged(f"chain {self.index}: step size {self.step_size:.3g} "
                                         f"underflowed at warm-up iteration {i}")
            if diagonal and window_start <= i < window_end:
                window.append(self.q.copy())
            if diagonal and i == window_end - 1 and len(window) > 2:
                self.inv_mass = regularized_variance(np.array(window))
                if i < burn_in - 1:
                    averager = DualAveraging(self.step_size, self.config.target_accept)
        self.step_size = averager.final()
        if self.step_size < MIN_STEP_SIZE:
            raise AdaptationDiverged(f"chain {self.index}: adapted step size {self.step_size:.3g} underflowed")
        logger.debug(f"Chain {self.index}: adapted step size {self.step_size:.4g}, "
                     f"{self.warmup_divergences} warm-up divergences")
        return self.step_size

    def sample(self):
        for i in range(self.config.n_samples):
            accept, divergent, depth = self.nuts_step()
            self.draws[i] = self.q
            self.log_posterior[i] = self.logp
            self.divergent[i] = divergent
            self.accept_stat[i] = accept
            self.tree_depth[i] = depth
            self.step_size_trace[i] = self.step_size

    def run(self):
        start = time.time()
        self.adapt()
        self.sample()
        self.elapsed = time.time() - start
        logger.info(f"Chain {self.index} done in {self.elapsed:.1f}s: step {self.step_size:.4g}, "
                    f"mean accept {self.accept_stat.mean():.3f}, {int(self.divergent.sum())} divergent")
        return self


class DualAveraging:
    """Nesterov dual averaging of log step size (gamma 0.05, t0 10, kappa 0.75)."""

    def __init__(self, step_size, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = np.log(10.0 * step_size)
        self.target = target
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.h_bar = 0.0
        self.log_step_bar = 0.0
        self.m = 0

    def update(self, accept):
        self.m += 1
        m = self.m
        w = 1.0 / (m + self.t0)
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept)
        log_step = self.mu - np.sqrt(m) / self.gamma * self.h_bar
        eta = m ** -self.kappa
        self.log_step_bar = eta * log_step + (1.0 - eta) * self.log_step_bar
        return float(np.exp(log_step))

    def final(self):
        return float(np.exp(self.log_step_bar))


def regularized_variance(window):
    """Sample variance shrunk toward 1e-3, as the usual windowed adaptation does."""
    n = len(window)
    var = window.var(axis=0, ddof=1)
    return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


# ---------------------------------------------------------------------------
# Multi-chain runs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleBatch:
    """Post-warm-up draws of all surviving chains, chain identity preserved."""
    draws: np.ndarray            # (chains, n_samples, dim)
    log_posterior: np.ndarray    # (chains, n_samples)
    divergent: np.ndarray
    accept_stat: np.ndarray
    tree_depth: np.ndarray
    step_sizes: np.ndarray       # (chains, n_samples)
    inv_mass: np.ndarray         # (chains, dim)
    chain_ids: tuple
    warmup_divergences: tuple
    elapsed: tuple
    config: NutsConfig
    failed_chains: tuple = ()

    @property
    def n_chains(self):
        return self.draws.shape[0]

    @property
    def n_samples(self):
        return self.draws.shape[1]

    @property
    def dim(self):
        return self.draws.shape[2]

    @property
    def divergence_rate(self):
        return float(self.divergent.mean())

    def iter_draws(self):
        for c, chain_id in enumerate(self.chain_ids):
            for i in range(self.n_samples):
                yield chain_id, i, self.draws[c, i], self.log_posterior[c, i], self.divergent[c, i]

    def to_frame(self, names=None):
        """Columnar form: chain, draw, one column per coordinate, log posterior, divergence flag."""
        names = names or [f'theta[{j}]' for j in range(self.dim)]
        flat = self.draws.reshape(-1, self.dim)
        frame = pd.DataFrame(flat, columns=names)
        frame.insert(0, 'draw', np.tile(np.arange(self.n_samples), self.n_chains))
        frame.insert(0, 'chain', np.repeat(np.array(self.chain_ids), self.n_samples))
        frame['log_posterior'] = self.log_posterior.ravel()
        frame['divergent'] = self.divergent.ravel()
        return frame

    def summary(self):
        return {
            'n_chains': self.n_chains,
            'n_samples': self.n_samples,
            'chain_ids': list(self.chain_ids),
            'failed_chains': list(self.failed_chains),
            'step_sizes': [float(s) for s in self.step_sizes[:, -1]],
            'mean_accept': [float(a) for a in self.accept_stat.mean(axis=1)],
            'divergences': [int(d) for d in self.divergent.sum(axis=1)],
            'warmup_divergences': list(self.warmup_divergences),
            'divergence_rate': self.divergence_rate,
            'elapsed_seconds': list(self.elapsed),
        }


def init_rng(seed, index):
    """Generator for a chain's starting point, spawned apart from its sampling stream."""
    child = np.random.SeedSequence(seed + index).spawn(1)[0]
    return np.random.Generator(np.random.Philox(child))


def run_chains(config, target, dim, init=None, threads=1):
    """Run `config.n_chains` independent chains and merge them.

    `init` is None (uniform jitter in [-init_radius, init_radius]), an array
    of shape (n_chains, dim), or a callable (chain index, rng) -> vector.
    Chains that fail adaptation are dropped with a warning; AllChainsDiverged
    when none survive or every kept transition diverged.
    """
    results = [None] * config.n_chains
    errors = {}
    lock = threading.Lock()
    jobs = queue.Queue()
    for index in range(config.n_chains):
        jobs.put(index)

    def worker():
        while True:
            try:
                index = jobs.get_nowait()
            except queue.Empty:
                return
            try:
                start_point = None
                if callable(init):
                    start_point = init(index, init_rng(config.seed, index))
                elif init is not None:
                    start_point = np.asarray(init)[index]
                chain = Chain(index, target, dim, config, init=start_point).run()
                with lock:
                    results[index] = chain
            except (AdaptationDiverged, NonFinite) as e:
                logger.warning(f"Chain {index} failed: {e}")
                with lock:
                    errors[index] = e

    n_threads = max(1, min(threads, config.n_chains))
    logger.info(f"Running {config.n_chains} chain(s) on {n_threads} thread(s): "
                f"{config.burn_in} warm-up + {config.n_samples} draws, dim {dim}")
    workers = [threading.Thread(target=worker, name=f'nuts-{i}', daemon=True) for i in range(n_threads)]
    for t in workers:
        t.start()
    for t in workers:
        t.join()

    chains = [c for c in results if c is not None]
    failed = sorted(errors)
    for c in list(chains):
        if c.divergent.all():
            logger.warning(f"Chain {c.index}: every transition diverged, dropping it")
            chains.remove(c)
            failed.append(c.index)
    if not chains:
        raise AllChainsDiverged(f"all {config.n_chains} chain(s) failed or diverged")

    batch = SampleBatch(
        draws=np.stack([c.draws for c in chains]),
        log_posterior=np.stack([c.log_posterior for c in chains]),
        divergent=np.stack([c.divergent for c in chains]),
        accept_stat=np.stack([c.accept_stat for c in chains]),
        tree_depth=np.stack([c.tree_depth for c in chains]),
        step_sizes=np.stack([c.step_size_trace for c in chains]),
        inv_mass=np.stack([c.inv_mass for c in chains]),
        chain_ids=tuple(c.index for c in chains),
        warmup_divergences=tuple(c.warmup_divergences for c in chains),
        elapsed=tuple(c.elapsed for c in chains),
        config=config,
        failed_chains=tuple(sorted(failed)),
    )
    if batch.divergence_rate > 0.05:
        logger.warning(f"Divergence rate {batch.divergence_rate:.1%} exceeds 5%")
    return batch
