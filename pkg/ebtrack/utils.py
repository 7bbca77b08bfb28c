"""
Logging and error handling utilities for the ebtrack toolkit.
"""
import asyncio
import functools
import logging
from contextlib import contextmanager
from time import perf_counter
from typing import (
    Awaitable,
    Callable,
    Dict,
    Generator,
    Iterator,
    Optional,
    Sequence,
    TypeVar,
)

import click
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.pretty import install
from rich.traceback import install as ins
from tenacity import retry as retry_
from tenacity import retry_if_exception_type, stop_after_attempt, wait_exponential
from typing_extensions import ParamSpec

T = TypeVar("T")
P = ParamSpec("P")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


class EbtrackError(Exception):
    """Base class of every error raised on purpose by the toolkit."""

    exit_code = EXIT_RUNTIME


class ConfigError(EbtrackError):
    """Invalid configuration, synthetic spec or command-line value."""

    exit_code = EXIT_CONFIG


class DataError(EbtrackError):
    """Missing, unreadable or inconsistent input data."""

    exit_code = EXIT_DATA


class TrackingError(EbtrackError):
    """A pipeline stage failed on a given frame."""

    exit_code = EXIT_RUNTIME

    def __init__(self, message: str, *, frame: int, stage: str):
        super().__init__(f"frame {frame}, stage {stage}: {message}")
        self.frame = frame
        self.stage = stage


RETRY_EXCEPTIONS = (
    InterruptedError,
    BlockingIOError,
    TimeoutError,
)

RUNTIME_ERRORS = (
    ArithmeticError,
    IndexError,
    KeyError,
    MemoryError,
    RuntimeError,
    TypeError,
    ValueError,
)


def setup_logging(name: str) -> logging.Logger:
    """
    Module logger writing through a rich handler on stderr, so command
    output on stdout stays machine-readable.

    Arguments:
    name -- Logger name, normally the calling module's __name__.
    """
    install()
    ins()
    console = Console(record=True, stderr=True)
    console_handler = RichHandler(
        console=console,
        show_time=True,
        show_path=True,
        markup=True,
        rich_tracebacks=True,
        tracebacks_show_locals=True,
        tracebacks_extra_lines=2,
        tracebacks_theme="monokai",
        show_level=False,
    )
    console_handler.setFormatter(logging.Formatter("%(message)s"))
    console_handler.setLevel(logging.INFO)
    logging.basicConfig(level=logging.INFO, handlers=[console_handler])
    logger_ = logging.getLogger(name)
    logger_.setLevel(logging.INFO)
    return logger_


logger = setup_logging(__name__)


def describe_validation_error(exc: ValidationError) -> str:
    """
    Flattens a pydantic validation error into "field: message" pairs.
    """
    parts = []
    for error in exc.errors():
        field = ".".join(str(loc) for loc in error["loc"]) or "<root>"
        parts.append(f"{field}: {error['msg']}")
    return "; ".join(parts)


def process_time(func: Callable[P, T]) -> Callable[P, T]:
    """
    Logs the wall-clock seconds a command took.

    Arguments:
    func -- The command to time.
    """

    @functools.wraps(func)
    def wrapper(*args: P.args, **kwargs: P.kwargs) -> T:
        start = perf_counter()
        result = func(*args, **kwargs)
        end = perf_counter()
        logger.info("%s finished in %.3f s", func.__name__, end - start)
        return result

    return wrapper


def handle_errors(func: Callable[P, T]) -> Callable[P, T]:
    """
    A decorator that turns toolkit errors into logged messages and exit codes.

    Arguments:
    func -- The command whose errors are to be handled.
    """

    @functools.wraps(func)
    def wrapper(*args: P.args, **kwargs: P.kwargs) -> T:
        try:
            logger.debug("Calling %s with %s", func.__name__, kwargs)
            return func(*args, **kwargs)
        except click.exceptions.Exit:
            raise
        except ValidationError as exc:
            logger.error("ConfigError: %s", describe_validation_error(exc))
            raise click.exceptions.Exit(EXIT_CONFIG) from exc
        except EbtrackError as exc:
            logger.error("%s: %s", exc.__class__.__name__, exc)
            raise click.exceptions.Exit(exc.exit_code) from exc
        except OSError as exc:
            logger.error("DataError: %s", exc)
            raise click.exceptions.Exit(EXIT_DATA) from exc
        except RUNTIME_ERRORS as exc:
            logger.exception("Runtime failure: %s %s", exc.__class__.__name__, exc)
            raise click.exceptions.Exit(EXIT_RUNTIME) from exc

    return wrapper


def handle(func: Callable[P, T]) -> Callable[P, T]:
    """
    A decorator to apply all command decorators to a function.

    Arguments:

    func -- The command to decorate.
    """
    return functools.reduce(
        lambda f, g: g(f),  # type: ignore
        [handle_errors, process_time],
        func,
    )


@contextmanager
def stage_timer(stage: str, timings: Dict[str, float]) -> Iterator[None]:
    """
    Records the wall-clock seconds spent in a pipeline stage into `timings`.
    """
    start = perf_counter()
    try:
        yield
    finally:
        timings[stage] = timings.get(stage, 0.0) + perf_counter() - start


def chunker(seq: Sequence[T], size: int) -> Generator[Sequence[T], None, None]:
    """
    Consecutive slices of at most `size` items; the candidate scorer walks
    box arrays this way.
    """
    return (seq[pos : pos + size] for pos in range(0, len(seq), size))


def async_cpu(func: Callable[P, T]) -> Callable[P, Awaitable[T]]:
    """
    Runs a CPU-bound function in the default executor so independent
    sequences can be awaited together.
    """

    @functools.wraps(func)
    async def wrapper(*args: P.args, **kwargs: P.kwargs) -> T:
        return await asyncio.get_running_loop().run_in_executor(
            None, functools.partial(func, *args, **kwargs)
        )

    return wrapper


def retry(
    retries: int = 5, wait: float = 0.1, max_wait: float = 2.0
) -> Callable[[Callable[P, T]], Callable[P, T]]:
    """Wrap a blocking IO function with exponential backoff on transient errors."""

    def decorator(func: Callable[P, T]) -> Callable[P, T]:
        @functools.wraps(func)
        @retry_(
            stop=stop_after_attempt(retries),
            wait=wait_exponential(multiplier=wait, max=max_wait),
            retry=retry_if_exception_type(RETRY_EXCEPTIONS),
            reraise=True,
        )
        def wrapper(*args: P.args, **kwargs: P.kwargs) -> T:
            return func(*args, **kwargs)

        return wrapper

    return decorator


def parse_box(text: Optional[str]) -> Optional[tuple]:
    """
    Parses "x,y,w,h" into a float tuple, None passes through.
    """
    if text is None:
        return None
    parts = [p for p in text.replace("\t", ",").replace(" ", ",").split(",") if p]
    if len(parts) != 4:
        raise ConfigError(f"expected x,y,w,h but got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"non-numeric box {text!r}") from exc
