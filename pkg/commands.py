"""
Operator commands behind the ``mindskill`` CLI.

Each ``cmd_*`` function returns an exit status and prints through
``click.echo``; the click wrappers in main.py only translate flags into
config overrides. Tests call these functions directly with a scripted
provider.
"""
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from statistics import fmean
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar, Union

import click

from config import AppConfig, ConfigError
from models import DeductionConfig, EvalResult, LibraryEntry, MindSkillError, RetrievalConfig, RunConfig, TaskSpec
from schemas.responses import error_line, eval_result_record, format_table, mine_summary_row
from services.agents import load_deduction_prompt, load_induction_prompt
from services.dataset import load_tasks, select_tasks, source_trajectory
from services.demo import demo_config, demo_script, prepare_workdir
from services.evaluation import aggregate, evaluate_baseline, evaluate_task, net_contribution, over_budget
from services.library import SkillLibrary, materialize_snapshot
from services.provider import AuditLog, ChatProvider, ScriptedProvider, create_provider
from services.run_store import RunStore
from services.skilldoc import serialize_skill
from services.textgrad import LoopPrompts, RunAborted, best_iteration, best_triple_of, optimize_skill
from utils.storage import write_jsonl

logger = logging.getLogger(__name__)

RESULTS_FILE = "results.jsonl"
BASELINE_RESULTS_FILE = "results.baseline.jsonl"
MINE_COLUMNS = ("task", "status", "best", "best_iter", "iterations", "prompt_versions")
EVAL_COLUMNS = ("task", "result", "loss", "tokens", "retrieved")

T = TypeVar("T")
R = TypeVar("R")


class UnknownTarget(MindSkillError):
    pass


def _deduction_config(config: AppConfig) -> DeductionConfig:
    return DeductionConfig(max_steps=config.max_steps, stop_marker=config.stop_marker)


def _map_tasks(fn: Callable[[T], R], items: Sequence[T], parallel: int) -> List[R]:
    """Apply ``fn`` to every item; results keep input order whatever the parallelism."""
    if parallel <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=parallel) as pool:
        return list(pool.map(fn, items))


def _provider_or_error(config: AppConfig, provider: Optional[ChatProvider]) -> Optional[ChatProvider]:
    if provider is not None:
        return provider
    try:
        return create_provider(config.provider)
    except (ConfigError, MindSkillError) as e:
        click.echo(f"ERROR: {e}", err=True)
        return None


# ---------------------------------------------------------------- mine

def cmd_mine(
    config: AppConfig,
    task_ids: Optional[Sequence[str]] = None,
    provider: Optional[ChatProvider] = None,
    tasks: Optional[Dict[str, TaskSpec]] = None,
) -> int:
    """Optimize one skill per training task and store the best ones in the library."""
    try:
        tasks = tasks if tasks is not None else load_tasks(config)
        selected = select_tasks(tasks, task_ids, "train")
    except (ConfigError, MindSkillError) as e:
        click.echo(f"ERROR: {e}", err=True)
        return 1
    provider = _provider_or_error(config, provider)
    if provider is None:
        return 1

    run_cfg = RunConfig(max_iterations=config.max_iterations, deduction=_deduction_config(config))
    prompts = LoopPrompts.from_config(config)
    prompt_I0 = load_induction_prompt(config)
    prompt_D = load_deduction_prompt(config)
    run_store = RunStore(config.paths.runs_dir)
    library = SkillLibrary(config.paths.library_dir)
    logger.info(f"Mining {len(selected)} task(s) with Q={config.max_iterations}")

    def mine_one(task: TaskSpec) -> Tuple[Dict[str, str], Optional[str]]:
        try:
            traj = source_trajectory(task, config.paths.trajectories_dir)
            best, records = optimize_skill(
                task, traj, prompt_I0, prompt_D, run_cfg.model_copy(update={"task_id": task.task_id}),
                task.env_id, provider, prompts, run_store,
            )
        except RunAborted as e:
            return mine_summary_row(task.task_id, "aborted", iterations=len(e.records)), error_line(task.task_id, e)
        except MindSkillError as e:
            return mine_summary_row(task.task_id, "failed"), error_line(task.task_id, e)
        except Exception as e:
            logger.error(f"{task.task_id}: unexpected failure while mining", exc_info=True)
            return mine_summary_row(task.task_id, "failed"), error_line(task.task_id, e)

        index = best_iteration(records)
        triple = best_triple_of(records)
        versions = sorted({r.prompt_version_before for r in records} | {records[-1].prompt_version_after})
        _, message = library.add_or_replace(
            LibraryEntry(skill=best, source_task_id=task.task_id, best_triple=triple, created_iteration=index or 0)
        )
        logger.info(message)
        return mine_summary_row(task.task_id, "ok", triple, len(records), versions, index), None

    outcomes = _map_tasks(mine_one, selected, config.parallel)
    click.echo(format_table([row for row, _ in outcomes], MINE_COLUMNS))
    errors = [error for _, error in outcomes if error]
    for error in errors:
        click.echo(error, err=True)
    click.echo(f"library: {len(library)} skill(s) in {library.root}")
    return 1 if errors else 0


# ---------------------------------------------------------------- eval

def _eval_rows(results: Sequence[EvalResult], baseline: Dict[str, EvalResult]) -> List[Dict[str, str]]:
    rows = []
    for result in results:
        row = {
            "task": result.task_id,
            "result": "pass" if result.passed else "fail",
            "loss": f"{result.loss:g}",
            "tokens": str(result.injected_tokens),
            "retrieved": ",".join(result.retrieved_ids) or "-",
        }
        if result.task_id in baseline:
            row["baseline"] = "pass" if baseline[result.task_id].passed else "fail"
        rows.append(row)
    return rows


def cmd_eval(
    config: AppConfig,
    task_ids: Optional[Sequence[str]] = None,
    provider: Optional[ChatProvider] = None,
    tasks: Optional[Dict[str, TaskSpec]] = None,
    baseline: bool = False,
    snapshot: Optional[int] = None,
) -> int:
    """Retrieve, inject and re-run held-out tasks; task failures are results, not errors."""
    try:
        tasks = tasks if tasks is not None else load_tasks(config)
        selected = select_tasks(tasks, task_ids, "heldout")
    except (ConfigError, MindSkillError) as e:
        click.echo(f"ERROR: {e}", err=True)
        return 1

    results_dir = Path(config.paths.results_dir)
    if snapshot is None:
        library = SkillLibrary(config.paths.library_dir)
        results_name = RESULTS_FILE
    else:
        run_store = RunStore(config.paths.runs_dir)
        library = materialize_snapshot(run_store, run_store.task_ids(), snapshot, results_dir / f"snapshot_{snapshot}")
        results_name = f"results.snapshot_{snapshot}.jsonl"
    if len(library) == 0:
        click.echo(f"ERROR: library empty: {library.root}", err=True)
        return 1

    provider = _provider_or_error(config, provider)
    if provider is None:
        return 1

    retrieval = RetrievalConfig(k=config.retrieval.k, mode=config.retrieval.mode)
    deduction = _deduction_config(config)
    prompt_D = load_deduction_prompt(config)
    template = config.read_prompt("deduction_template")
    retrieval_prompt = config.read_prompt("retrieval")

    def eval_one(task: TaskSpec) -> Tuple[Optional[EvalResult], Optional[EvalResult], Optional[str]]:
        try:
            result, _ = evaluate_task(task, library, retrieval, provider, prompt_D, deduction, template, retrieval_prompt)
            base = evaluate_baseline(task, provider, prompt_D, deduction, template) if baseline else None
            return result, base, None
        except MindSkillError as e:
            return None, None, error_line(task.task_id, e)
        except Exception as e:
            logger.error(f"{task.task_id}: unexpected failure while evaluating", exc_info=True)
            return None, None, error_line(task.task_id, e)

    outcomes = _map_tasks(eval_one, selected, config.parallel)
    results = sorted((r for r, _, _ in outcomes if r is not None), key=lambda r: r.task_id)
    baseline_results = sorted((b for _, b, _ in outcomes if b is not None), key=lambda r: r.task_id)
    errors = [error for _, _, error in outcomes if error]

    write_jsonl(results_dir / results_name, (eval_result_record(r) for r in results))
    columns = EVAL_COLUMNS
    if baseline:
        write_jsonl(results_dir / BASELINE_RESULTS_FILE, (eval_result_record(r) for r in baseline_results))
        columns = EVAL_COLUMNS + ("baseline",)

    click.echo(format_table(_eval_rows(results, {r.task_id: r for r in baseline_results}), columns))
    summary = aggregate(results)
    click.echo(
        f"pass rate: {summary['passed']}/{summary['tasks']} ({summary['pass_rate']:.2f}) | "
        f"injected tokens: {summary['total_injected_tokens']} total, {summary['mean_injected_tokens']:.1f} mean"
    )
    if baseline:
        base_summary = aggregate(baseline_results)
        click.echo(f"baseline pass rate: {base_summary['passed']}/{base_summary['tasks']} ({base_summary['pass_rate']:.2f})")
        contributions = net_contribution(results, baseline_results)
        if contributions:
            click.echo("net contribution per skill:")
            for skill_id, score in contributions.items():
                click.echo(f"  {skill_id}: {score:+d}")
    for result in over_budget(results, config.injection_token_budget):
        click.echo(
            f"WARNING: {result.task_id} injected {result.injected_tokens} tokens "
            f"(budget {config.injection_token_budget})",
            err=True,
        )
    for error in errors:
        click.echo(error, err=True)
    return 1 if errors else 0


# ---------------------------------------------------------------- inspect

def _inspect_library(config: AppConfig) -> None:
    library = SkillLibrary(config.paths.library_dir)
    rows = [
        {
            "task": entry.source_task_id,
            "name": entry.skill.name,
            "best": str(entry.best_triple),
            "iteration": str(entry.created_iteration),
        }
        for entry in library.entries()
    ]
    click.echo(format_table(rows, ("task", "name", "best", "iteration")))


def _inspect_run(config: AppConfig, task_id: str) -> None:
    records = RunStore(config.paths.runs_dir).load_index(task_id)
    if not records:
        raise UnknownTarget(f"no recorded run for {task_id}")
    rows = [
        {
            "iter": str(record["iteration"]),
            "triple": f"({record['outcome']:g}, {record['recon']:g}, {record['rubric']:g})",
            "best": "*" if record["is_best"] else "",
            "prompt": f"v{record['prompt_version_before']}->v{record['prompt_version_after']}",
            "skill": record["skill_name"] or "-",
            "failures": str(len(record["failures"])),
        }
        for record in records
    ]
    click.echo(format_table(rows, ("iter", "triple", "best", "prompt", "skill", "failures")))


def _inspect_skill(config: AppConfig, task_id: str) -> None:
    entry = SkillLibrary(config.paths.library_dir).get(task_id)
    if entry is None:
        raise UnknownTarget(f"no library skill for {task_id}")
    click.echo(serialize_skill(entry.skill), nl=False)


def _inspect_losses(config: AppConfig) -> None:
    """Mean loss triple per iteration over every recorded run."""
    run_store = RunStore(config.paths.runs_dir)
    per_iteration: Dict[int, List[Tuple[float, float, float]]] = defaultdict(list)
    for task_id in run_store.task_ids():
        for record in run_store.load_index(task_id):
            per_iteration[record["iteration"]].append((record["outcome"], record["recon"], record["rubric"]))
    if not per_iteration:
        raise UnknownTarget(f"no recorded runs under {run_store.root}")
    rows = [
        {
            "iter": str(q),
            "runs": str(len(triples)),
            "outcome": f"{fmean(t[0] for t in triples):.3f}",
            "recon": f"{fmean(t[1] for t in triples):.3f}",
            "rubric": f"{fmean(t[2] for t in triples):.3f}",
        }
        for q, triples in sorted(per_iteration.items())
    ]
    click.echo(format_table(rows, ("iter", "runs", "outcome", "recon", "rubric")))


def cmd_inspect(config: AppConfig, target: str) -> int:
    """``library``, ``losses``, ``run:<task_id>`` or ``skill:<task_id>``."""
    kind, _, task_id = target.partition(":")
    try:
        if target == "library":
            _inspect_library(config)
        elif target == "losses":
            _inspect_losses(config)
        elif kind == "run" and task_id:
            _inspect_run(config, task_id)
        elif kind == "skill" and task_id:
            _inspect_skill(config, task_id)
        else:
            raise UnknownTarget(f"unknown inspect target '{target}' (library, losses, run:<task>, skill:<task>)")
    except UnknownTarget as e:
        click.echo(f"ERROR: UnknownTarget: {e}", err=True)
        return 1
    return 0


# ---------------------------------------------------------------- demo

def cmd_demo(workdir: Union[str, Path]) -> int:
    """Scripted mine + eval of the bundled ToyWorld tasks; no network, no credentials."""
    try:
        workdir = prepare_workdir(workdir)
    except ConfigError as e:
        click.echo(f"ERROR: {e}", err=True)
        return 1
    config = demo_config(workdir)
    tasks = load_tasks(config)
    audit = AuditLog()
    provider = ScriptedProvider(demo_script(list(tasks.values()), config.stop_marker), settings=config.provider, audit=audit)

    click.echo(f"== mine (Q={config.max_iterations}) ==")
    status = cmd_mine(config, provider=provider, tasks=tasks)
    if status == 0:
        click.echo(f"== eval (K={config.retrieval.k}) ==")
        status = cmd_eval(config, provider=provider, tasks=tasks, baseline=True)
    audit.dump(workdir / "audit.jsonl")
    click.echo(f"demo output in {workdir}")
    return status
