"""
Monte-Carlo experiment orchestration.

Each run index builds one environment and runs every selected policy on it.
Runs execute in a process pool driven from an asyncio loop; the parent
process alone writes outputs.
"""
import asyncio
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import pandas as pd

from agent import EpisodeTrace, Policy, run_policy
from artifacts import ArtifactWriter, load_environment
from config import ENVIRONMENT_STREAM, ExperimentConfig, derive_seed
from env import GridWorld, generate_random_env, load_terrain_files
from evaluation import RunMetrics, aggregate_runs, evaluate_run

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunTask:
    config: ExperimentConfig
    base_seed: int
    run_index: int


@dataclass
class RunOutcome:
    run_index: int
    world: Optional[GridWorld] = None
    traces: List[EpisodeTrace] = field(default_factory=list)
    metrics: List[RunMetrics] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class ExperimentResult:
    summary: Optional[pd.DataFrame]
    metrics: List[RunMetrics]
    failures: List[str]

    @property
    def partial(self) -> bool:
        return bool(self.failures)


def build_environment(config: ExperimentConfig, base_seed: int, run_index: int) -> GridWorld:
    """Environment of one run index; random worlds use the environment seed stream."""
    env = config.environment
    if env.kind == 'random':
        seed = derive_seed(base_seed, run_index, ENVIRONMENT_STREAM)
        return generate_random_env(env.gen_spec(seed=seed, horizon=config.horizon))
    if env.kind == 'terrain':
        grid = tuple(env.grid) if env.grid else None
        return load_terrain_files(env.resolved_frames(config.base_dir), env.steps or config.horizon,
                                  env.h, env.noise_std, grid)
    return load_environment(env.resolved_path(config.base_dir))


def _check_lipschitz(world: GridWorld, config: ExperimentConfig, run_index: int) -> None:
    """Log when the agents' Lipschitz constants understate the true safety function."""
    true_s, true_t = world.lipschitz_constants()
    agent = config.agent
    if true_s <= agent.l_s and true_t <= agent.l_t:
        return
    message = (f"Run {run_index}: safety changes by up to {true_s:.3f} per cell and {true_t:.3f} per step, "
               f"above l_s={agent.l_s} / l_t={agent.l_t}")
    if agent.own_bound:
        logger.debug(message)
    else:
        logger.warning(f"{message}; Lipschitz spread alone can certify unsafe states")


def execute_run(task: RunTask) -> RunOutcome:
    """Run every selected policy for one run index. Errors are captured, not raised."""
    outcome = RunOutcome(run_index=task.run_index)
    try:
        world = build_environment(task.config, task.base_seed, task.run_index)
        outcome.world = world
        _check_lipschitz(world, task.config, task.run_index)
        for policy in task.config.policy_list:
            cfg = task.config.agent_config(policy, task.base_seed, task.run_index)
            trace = run_policy(world, cfg, task.config.horizon)
            outcome.traces.append(trace)
            outcome.metrics.append(evaluate_run(trace, world, task.run_index))
    except Exception as e:
        logger.error(f"Run {task.run_index} failed: {e}")
        outcome.error = f"run {task.run_index}: {type(e).__name__}: {e}"
        outcome.traces.clear()
        outcome.metrics.clear()
    return outcome


class ExperimentRunner:
    """Runs all (policy, run index) episodes of a config and writes the outputs."""

    def __init__(self, config: ExperimentConfig, base_seed: int, output_dir: Optional[Path] = None,
                 workers: Optional[int] = None):
        """
        Initialize experiment runner.

        Args:
            config: Validated experiment configuration
            base_seed: Seed every random stream is derived from
            output_dir: Overrides config.output_dir
            workers: Overrides config.workers
        """
        self.config = config
        self.base_seed = base_seed
        self.output_dir = Path(output_dir or config.output_dir)
        self.workers = workers or config.workers
        self.writer: Optional[ArtifactWriter] = None

    def tasks(self) -> List[RunTask]:
        return [RunTask(self.config, self.base_seed, i) for i in range(self.config.runs)]

    def _run_serial(self, tasks: Sequence[RunTask]) -> List[RunOutcome]:
        return [execute_run(task) for task in tasks]

    async def _run_async(self, tasks: Sequence[RunTask]) -> List[RunOutcome]:
        loop = asyncio.get_running_loop()
        with ProcessPoolExecutor(max_workers=self.workers) as pool:
            futures = [loop.run_in_executor(pool, execute_run, task) for task in tasks]
            results = await asyncio.gather(*futures, return_exceptions=True)
        outcomes = []
        for task, result in zip(tasks, results):
            if isinstance(result, BaseException):
                logger.error(f"Worker for run {task.run_index} crashed: {result}")
                result = RunOutcome(run_index=task.run_index,
                                    error=f"run {task.run_index}: worker crashed: {result}")
            outcomes.append(result)
        return outcomes

    def run(self) -> ExperimentResult:
        """Execute every run, then write traces, metrics and the summary."""
        tasks = self.tasks()
        policies = ', '.join(p.value for p in self.config.policy_list)
        logger.info(f"🚀 {len(tasks)} run(s) x [{policies}], horizon {self.config.horizon}, "
                    f"seed {self.base_seed}, {self.workers} worker(s)")
        start = time.time()
        if self.workers == 1:
            outcomes = self._run_serial(tasks)
        else:
            outcomes = asyncio.run(self._run_async(tasks))
        logger.info(f"Episodes finished in {time.time() - start:.1f}s")
        return self._collect(sorted(outcomes, key=lambda o: o.run_index))

    def _collect(self, outcomes: Sequence[RunOutcome]) -> ExperimentResult:
        self.writer = ArtifactWriter(self.output_dir, self.config.export_snapshots)
        self.config.save(self.output_dir / 'config.json')
        metrics: List[RunMetrics] = []
        failures: List[str] = []
        for outcome in outcomes:
            if not outcome.ok:
                failures.append(outcome.error)
                continue
            for trace in outcome.traces:
                self.writer.write_trace(trace, outcome.world, outcome.run_index)
            metrics.extend(outcome.metrics)

        summary = None
        if metrics:
            self.writer.write_metrics(metrics)
            reference = Policy.ST_SAFEMDP
            summary = aggregate_runs(metrics, reference)
            self.writer.write_summary(summary)
        if failures:
            self.writer.mark_partial(failures)
        return ExperimentResult(summary=summary, metrics=metrics, failures=failures)
