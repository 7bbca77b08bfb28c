"""Run-configuration flags shared by the subcommands."""
import functools
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple

import click

from ..lib.config import RunConfig, apply_overrides, load_config, parse_assignments

CANDIDATE_SETS = click.Choice(["R", "E", "E+R"])


def config_options(func: Callable[..., Any]) -> Callable[..., Any]:
    """
    Adds --config, --set, --seed and the flags mirroring the most used keys.
    """
    decorators = [
        click.option("--config", "config_path", type=click.Path(path_type=Path), default=None, help="JSON run config."),
        click.option("--set", "assignments", multiple=True, metavar="KEY=VALUE", help="Override any config key."),
        click.option("--seed", type=int, default=None, help="Run seed (config value, 0 by default)."),
        click.option("--tracker", type=click.Choice(["ebt", "ncc_eb"]), default=None),
        click.option("--proposals", type=int, default=None, help="Proposals kept after re-ranking (H)."),
        click.option("--no-smoothness", is_flag=True, default=False, help="Drop the smoothness term."),
        click.option("--no-rerank", is_flag=True, default=False, help="Rank proposals by objectness only."),
        click.option("--test-set", type=CANDIDATE_SETS, default=None),
        click.option("--update-set", type=CANDIDATE_SETS, default=None),
    ]
    return functools.reduce(lambda f, d: d(f), reversed(decorators), func)


def build_config(
    config_path: Optional[Path],
    assignments: Tuple[str, ...],
    seed: Optional[int] = None,
    tracker: Optional[str] = None,
    proposals: Optional[int] = None,
    no_smoothness: bool = False,
    no_rerank: bool = False,
    test_set: Optional[str] = None,
    update_set: Optional[str] = None,
    **paths: Optional[str],
) -> RunConfig:
    """
    Config file, then --set pairs, then the dedicated flags; the result is
    validated once more as a whole.
    """
    cfg = apply_overrides(load_config(config_path), parse_assignments(assignments))
    flags: Dict[str, Any] = {
        "seed": seed,
        "tracker": tracker,
        "max_proposals": proposals,
        "test_set": test_set,
        "update_set": update_set,
        **paths,
    }
    overrides = {k: v for k, v in flags.items() if v is not None}
    if no_smoothness:
        overrides["use_smoothness"] = False
    if no_rerank:
        overrides["rerank_enabled"] = False
    return apply_overrides(cfg, overrides)
