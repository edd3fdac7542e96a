import functools
import sys
from typing import Callable, List

from omegaconf import DictConfig, ListConfig, OmegaConf
from omegaconf.errors import ConfigKeyError, ValidationError

from activeda.error import ConfigCheck, ConfigError, InvalidInputError
from activeda.logging import CORE_LOG

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, InvalidInputError):
        return EXIT_INVALID
    return EXIT_RUNTIME


def with_exit_codes(fn: Callable[[DictConfig], object]) -> Callable[[DictConfig], None]:
    """0 on success, 1 on invalid input or config, 2 on numeric or any other failure."""

    @functools.wraps(fn)
    def wrapper(cfg: DictConfig):
        try:
            fn(cfg)
        except Exception as e:
            code = exit_code(e)
            if code == EXIT_INVALID:
                CORE_LOG.error(f"{type(e).__name__}: {e}")
            else:
                CORE_LOG.exception(f"{type(e).__name__}: {e}")
            sys.exit(code)

    return wrapper


def load_run_config(cfg: DictConfig) -> DictConfig:
    """Merge the structured file named by `run.config` onto the defaults.

    The file is JSON or YAML; keys that are not in the defaults are rejected with their path.
    """
    path = cfg["run"]["config"]
    if not path:
        return cfg
    try:
        overrides = OmegaConf.load(path)
    except FileNotFoundError as e:
        raise ConfigError(f"run.config: no such file {path}") from e
    if not isinstance(overrides, DictConfig):
        raise ConfigError(f"run.config: {path} must hold a mapping")
    base = OmegaConf.create(OmegaConf.to_container(cfg, resolve=False))
    OmegaConf.set_struct(base, True)
    try:
        merged = OmegaConf.merge(base, overrides)
    except (ConfigKeyError, ValidationError) as e:
        raise ConfigError(f"{e.full_key}: {e.msg.splitlines()[0]}") from e
    CORE_LOG.info(f"Merged run config from {path}")
    return merged


def parse_seeds(seeds) -> List[int]:
    """Seeds from an int, a list or a comma string.

    On the command line `run.seeds=[1,2,3]` gives a list. An unquoted `run.seeds=1,2,3` is Hydra
    sweep syntax and is rejected without `--multirun`; `'run.seeds="1,2,3"'` passes the string.
    """
    if isinstance(seeds, int):
        seeds = [seeds]
    elif isinstance(seeds, str):
        seeds = [s for s in seeds.split(",") if s.strip()]
    elif not isinstance(seeds, (list, tuple, ListConfig)):
        raise ConfigError(f"run.seeds: expected a list of integers, got {seeds!r}")
    try:
        seeds = [int(s) for s in seeds]
    except (TypeError, ValueError) as e:
        raise ConfigError(f"run.seeds: {e}") from e
    ConfigCheck.true(len(seeds) > 0, "run.seeds: at least one seed")
    ConfigCheck.eq(len(set(seeds)), len(seeds), "run.seeds: seeds must be distinct")
    return seeds
