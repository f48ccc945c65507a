"""Epoch-progress heartbeat registry shared by the training loops.

A full pipeline run is silent on stdout until a stage finishes, and a sweep
of ten learning rates over a hundred epochs can take a while. Each training
loop reports per-epoch progress through the callback registered here, and
the CLI prints it as ``HEARTBEAT:<stage>:<done>/<total>`` lines on stderr
when ``--progress`` is passed.

Lives in its own module so ``src.training`` and the stage modules can
import it at module level without pulling in the pipeline.

A heartbeat must never break training: ``_emit_heartbeat`` swallows any
exception the callback raises.
"""

from __future__ import annotations

import logging
from typing import Callable, Optional

logger = logging.getLogger(__name__)

_callback: Optional[Callable[[str, int, int], None]] = None


def set_epoch_heartbeat(callback: Optional[Callable[[str, int, int], None]]) -> None:
    """Register (or clear, with ``None``) the progress callback.

    The callback receives ``(stage, done, total)``; ``total`` is the epoch
    budget, so early stopping ends a stage before ``done == total``.
    """
    global _callback
    _callback = callback


def _emit_heartbeat(stage: str, done: int, total: int) -> None:
    """Invoke the registered callback, swallowing any exception it raises."""
    cb = _callback
    if cb is None:
        return
    try:
        cb(stage, done, total)
    except Exception:
        logger.debug("epoch heartbeat callback raised; ignoring", exc_info=True)
