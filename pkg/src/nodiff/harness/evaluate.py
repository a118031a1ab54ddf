"""Closed-loop evaluation and latency benchmarking."""

from __future__ import annotations

import csv
import io
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigError, NoDiffError
from ..ndmath import RngStream
from ..policy import ObservationWindow, Policy
from ..toyworld import DEFAULT_ENV, EnvConfig, WorldState, episode_seed, expert_action, observe, reset, step

# -- planners -------------------------------------------------------------
#
# A planner maps (observation window, true state, K, rng) to a chunk of
# actions. Only the diffusion policy uses the window; the baselines exist to
# calibrate the harness.


class PolicyPlanner:
    def __init__(self, policy: Policy):
        self.policy = policy
        self.T_o = policy.config.T_o
        self.T_p = policy.config.T_p
        self.name = policy.setup

    def check_K(self, K: int) -> None:
        if not (1 <= K <= self.policy.schedule.K_m):
            raise ConfigError(f"K={K} outside [1, K_m={self.policy.schedule.K_m}]", component="harness")

    def plan(self, window: ObservationWindow, state: WorldState, K: int, rng: RngStream, env: EnvConfig) -> np.ndarray:
        return self.policy.infer(window, K, rng)


class ExpertPlanner:
    """Scripted expert simulated forward for a full horizon."""

    name = "expert"

    def __init__(self, T_o: int = 2, T_p: int = 16):
        self.T_o, self.T_p = T_o, T_p

    def check_K(self, K: int) -> None:
        pass

    def plan(self, window, state, K, rng, env):
        actions = []
        for _ in range(self.T_p):
            a = expert_action(state, env=env)
            actions.append(a)
            if state.steps >= env.episode_cap:
                break
            state, _ = step(state, a, env)
        while len(actions) < self.T_p:
            actions.append(actions[-1])
        return np.array(actions)


class RandomPlanner:
    """Uniform random actions.

    Without ``norm`` displacements are uniform in the clamp range and the
    gripper command in ``[-1, 1]``. With ``norm`` (a checkpoint's
    :class:`NormStats`) actions are uniform in the dataset's action box,
    which is the range an untrained policy can reach.
    """

    name = "random"

    def __init__(self, T_o: int = 2, T_p: int = 16, norm=None):
        self.T_o, self.T_p, self.norm = T_o, T_p, norm

    def check_K(self, K: int) -> None:
        pass

    def plan(self, window, state, K, rng, env):
        u = 2.0 * rng.uniform(self.T_p * 3).reshape(self.T_p, 3) - 1.0
        if self.norm is not None:
            return self.norm.denormalize_actions(u)
        u[:, :2] *= env.delta_max
        return u


# -- rollouts -------------------------------------------------------------


@dataclass
class EpisodeOutcome:
    index: int
    seed: int
    success: bool
    length: int
    infer_calls: int
    chunk_sizes: list[int] = field(default_factory=list)
    path: np.ndarray | None = None  # (length + 1, 2) robot positions
    error: str | None = None


def run_episode(planner, task: str, index: int, K: int, seed: int, T_a: int, env: EnvConfig = DEFAULT_ENV):
    """One closed-loop episode with receding-horizon execution.

    The world is reset from the ``eval`` per-episode seed; planner noise comes
    from the ``eval-noise`` stream specialised by the episode index, so
    outcomes do not depend on which other episodes run or in what order.
    """
    ep_seed = episode_seed(seed, index, "eval")
    rng = RngStream.named(seed, "eval-noise", index)
    state, (s, img) = reset(task, ep_seed, env)
    frames = [(s, img)] * planner.T_o
    path = [state.robot]
    success = False
    chunks = []
    try:
        while state.steps < env.episode_cap and not success:
            window = ObservationWindow(np.stack([f[0] for f in frames]), np.stack([f[1] for f in frames]))
            motion = planner.plan(window, state, K, rng, env)
            n = min(T_a, env.episode_cap - state.steps)
            executed = 0
            for a in motion[:n]:
                state, success = step(state, a, env)
                frames = frames[1:] + [observe(state, env)]
                path.append(state.robot)
                executed += 1
                if success:
                    break
            chunks.append(executed)
    except NoDiffError as exc:
        return EpisodeOutcome(index, ep_seed, False, state.steps, len(chunks), chunks, np.array(path), str(exc))
    return EpisodeOutcome(index, ep_seed, success, state.steps, len(chunks), chunks, np.array(path))


@dataclass
class SuccessReport:
    task: str
    setup: str
    K: int
    episodes: int
    successes: int
    success_rate: float
    mean_length: float
    seed: int
    outcomes: list[EpisodeOutcome] = field(default_factory=list, repr=False, compare=False)

    @property
    def errors(self) -> list[EpisodeOutcome]:
        return [o for o in self.outcomes if o.error]

    def row(self) -> dict:
        d = asdict(self)
        d.pop("outcomes")
        return d


REPORT_FIELDS = ("task", "setup", "K", "episodes", "successes", "success_rate", "mean_length", "seed")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(fields, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r[f]) for f in fields])
    return buf.getvalue()


def reports_to_csv(reports: list[SuccessReport]) -> str:
    return write_csv(REPORT_FIELDS, [r.row() for r in reports])


def read_reports_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    for r in rows:
        for k in ("K", "episodes", "successes", "seed"):
            r[k] = int(r[k])
        for k in ("success_rate", "mean_length"):
            r[k] = float(r[k])
    return rows


def _episode_chunk(args):
    planner, task, indices, K, seed, T_a, env = args
    return [run_episode(planner, task, i, K, seed, T_a, env) for i in indices]


def aggregate(task: str, setup: str, K: int, seed: int, outcomes: list[EpisodeOutcome]) -> SuccessReport:
    outcomes = sorted(outcomes, key=lambda o: o.index)
    n = len(outcomes)
    wins = sum(o.success for o in outcomes)
    mean_len = float(np.mean([o.length for o in outcomes])) if n else 0.0
    return SuccessReport(task, setup, K, n, wins, 100.0 * wins / n if n else 0.0, mean_len, seed, outcomes)


def rollout_eval(
    planner,
    task: str,
    n_episodes: int,
    K: int,
    seed: int,
    *,
    T_a: int = 8,
    env: EnvConfig = DEFAULT_ENV,
    jobs: int = 1,
) -> SuccessReport:
    """Success rate of ``planner`` (a :class:`Policy` or planner object) over ``n_episodes``.

    Episode failures inside the policy (for example a non-finite output) are
    recorded on the outcome and counted as unsuccessful; the sweep continues.
    """
    if isinstance(planner, Policy):
        planner = PolicyPlanner(planner)
    planner.check_K(K)
    if n_episodes < 1:
        raise ConfigError(f"n_episodes must be >= 1, got {n_episodes}", component="harness")
    if not (1 <= T_a <= planner.T_p):
        raise ConfigError(f"need 1 <= T_a <= T_p={planner.T_p}, got {T_a}", component="harness")
    indices = list(range(n_episodes))
    if jobs <= 1:
        outcomes = _episode_chunk((planner, task, indices, K, seed, T_a, env))
    else:
        parts = [indices[j::jobs] for j in range(jobs)]
        with ProcessPoolExecutor(jobs) as ex:
            outcomes = [o for part in ex.map(_episode_chunk, [(planner, task, p, K, seed, T_a, env) for p in parts]) for o in part]
    return aggregate(task, getattr(planner, "name", "?"), K, seed, outcomes)


# -- latency --------------------------------------------------------------


@dataclass
class TimingRow:
    K: int
    mean_s: float
    std_s: float
    calls: int


@dataclass
class TimingReport:
    rows: list[TimingRow]
    hardware: str
    warmup: int
    denoise_calls: int

    def to_csv(self) -> str:
        return write_csv(("K", "mean_s", "std_s", "calls"), [asdict(r) for r in self.rows])


def hardware_note() -> str:
    return (
        f"{platform.machine()} {platform.processor() or 'cpu'}; {os.cpu_count()} logical cores; "
        f"python {platform.python_version()}; numpy {np.__version__}; single BLAS thread"
    )


def synthetic_window(policy: Policy, task: str = "reach", seed: int = 0, env: EnvConfig = DEFAULT_ENV):
    _, (s, img) = reset(task, seed, env)
    T_o = policy.config.T_o
    return ObservationWindow(np.stack([s] * T_o), np.stack([img] * T_o))


def bench(
    policy: Policy,
    K_list,
    n_predictions: int = 30,
    *,
    warmup: int = 3,
    window: ObservationWindow | None = None,
    seed: int = 0,
) -> TimingReport:
    """Wall time per ``infer`` call for each K.

    Each timed call covers encoding, the initial-distribution heads and all
    denoiser calls. ``warmup`` untimed calls per K precede the timed ones
    and are excluded from both the statistics and the returned call count.
    BLAS is pinned to one thread for the duration.
    """
    from threadpoolctl import threadpool_limits

    if n_predictions < 30:
        raise ConfigError(f"n_predictions must be >= 30, got {n_predictions}", component="harness")
    for K in K_list:
        if not (1 <= K <= policy.schedule.K_m):
            raise ConfigError(f"K={K} outside [1, K_m={policy.schedule.K_m}]", component="harness")
    window = window or synthetic_window(policy)
    rows = []
    counted = 0
    with threadpool_limits(limits=1):
        for K in K_list:
            rng = RngStream.named(seed, "bench", K)
            for _ in range(warmup):
                policy.infer(window, K, rng)
            before = policy.denoise_calls
            times = np.empty(n_predictions)
            for i in range(n_predictions):
                t0 = time.perf_counter()
                policy.infer(window, K, rng)
                times[i] = time.perf_counter() - t0
            counted += policy.denoise_calls - before
            rows.append(TimingRow(int(K), float(times.mean()), float(times.std()), n_predictions))
    return TimingReport(rows, hardware_note(), warmup, counted)


__all__ = [
    "PolicyPlanner",
    "ExpertPlanner",
    "RandomPlanner",
    "EpisodeOutcome",
    "run_episode",
    "SuccessReport",
    "REPORT_FIELDS",
    "reports_to_csv",
    "read_reports_csv",
    "write_csv",
    "aggregate",
    "rollout_eval",
    "TimingRow",
    "TimingReport",
    "bench",
    "hardware_note",
    "synthetic_window",
]
