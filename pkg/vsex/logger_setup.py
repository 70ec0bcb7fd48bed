"""
Logger setup module for vsex.
Routes the root logger, and Python warnings raised by numpy or torch,
through Rich's RichHandler. Library modules log with a bracketed
component tag such as [TRAIN] or [PF] in front of the message.
"""

import logging

from rich.logging import RichHandler


def setup_logger(verbose: bool = False) -> logging.Logger:
    """
    Configures the logging for one vsex run.

    Args:
        verbose (bool): If True, the logger is set to DEBUG level for
        per-epoch and per-step detail, and failures print rich tracebacks.

        Otherwise, it defaults to INFO level.

    Returns:
        logging.Logger: The configured root logger.
    """
    handler = RichHandler(
        show_path=False, rich_tracebacks=verbose, markup=False
    )
    # force: main() may run several times in one process (tests, sweeps).
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[handler],
        force=True,
    )
    logging.captureWarnings(True)
    return logging.getLogger()
