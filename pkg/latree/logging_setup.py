"""Logging for the pipeline: one ``latree`` logger, text or JSON lines on stderr.

Library modules log through ``logging.getLogger("latree.<module>")`` and
``event()``; only the CLI calls ``configure_logging``.
"""

import json
import logging
import logging.handlers
import os
from contextvars import ContextVar
from datetime import datetime, timezone

from latree.config import LOG_BACKUP_COUNT, LOG_DIR, LOG_FORMAT, LOG_LEVEL, LOG_MAX_BYTES

run_id_var: ContextVar[str] = ContextVar("run_id", default="-")

# Attributes every LogRecord carries, plus the two the formatter adds.
_RESERVED_LOG_ATTRS: frozenset[str] = frozenset(
    logging.LogRecord("", logging.INFO, "", 0, "", None, None).__dict__
) | {"message", "asctime", "taskName"}

_TEXT_FORMAT = "%(asctime)s %(levelname)-7s [%(run_id)s] %(name)s: %(message)s"


class RunIdFilter(logging.Filter):
    """Stamps the current run id on records that do not carry one."""

    def filter(self, record: logging.LogRecord) -> bool:
        if not hasattr(record, "run_id"):
            record.run_id = run_id_var.get()
        return True


class JsonFormatter(logging.Formatter):
    """One JSON object per line; ``extra=`` fields are lifted to the top level."""

    def format(self, record: logging.LogRecord) -> str:
        created = datetime.fromtimestamp(record.created, tz=timezone.utc)
        payload: dict[str, object] = {
            "ts": created.isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "run_id": getattr(record, "run_id", "-"),
            "message": record.getMessage(),
        }
        extras = {
            key: value
            for key, value in vars(record).items()
            if key not in _RESERVED_LOG_ATTRS and not key.startswith("_") and key not in payload
        }
        payload.update(extras)
        if record.exc_info:
            payload["exc"] = self.formatException(record.exc_info)
        return json.dumps(payload, default=str, ensure_ascii=False)


logger: logging.Logger = logging.getLogger("latree")
logger.setLevel(logging.DEBUG)
logger.addHandler(logging.NullHandler())

_configured_handlers: list[logging.Handler] = []


def _handler(handler: logging.Handler, level: int, formatter: logging.Formatter) -> logging.Handler:
    handler.setLevel(level)
    handler.setFormatter(formatter)
    handler.addFilter(RunIdFilter())
    return handler


def configure_logging(level: str | None = None, fmt: str | None = None) -> None:
    """Attach a stderr handler, and a rotating file handler when LOG_DIR is set.

    Calling it again replaces the handlers it attached before. stdout is left
    alone: the CLI writes its JSON result there.
    """
    for handler in _configured_handlers:
        logger.removeHandler(handler)
        handler.close()
    _configured_handlers.clear()

    json_mode = (fmt or LOG_FORMAT).lower() == "json"
    formatter = JsonFormatter() if json_mode else logging.Formatter(_TEXT_FORMAT)
    console_level = logging.getLevelName((level or LOG_LEVEL).upper())
    if not isinstance(console_level, int):
        console_level = logging.WARNING

    _configured_handlers.append(_handler(logging.StreamHandler(), console_level, formatter))
    if LOG_DIR:
        os.makedirs(LOG_DIR, exist_ok=True)
        rotating = logging.handlers.RotatingFileHandler(
            os.path.join(LOG_DIR, "latree.log"),
            maxBytes=LOG_MAX_BYTES,
            backupCount=LOG_BACKUP_COUNT,
        )
        _configured_handlers.append(_handler(rotating, logging.INFO, formatter))
    for handler in _configured_handlers:
        logger.addHandler(handler)


def _render(value: object) -> str:
    text = str(value)
    if any(char.isspace() or char in '"=\\' for char in text):
        return json.dumps(text, ensure_ascii=False)
    return text


def event(name: str, level: int = logging.INFO, **fields: object) -> None:
    """Log a stage event as ``event=<name> key=value ...``.

    ``None`` fields are dropped and floats rounded to 6 places. Keys that
    clash with LogRecord attributes get an ``x_`` prefix so they reach the
    JSON output.
    """
    clean: dict[str, object] = {}
    for key, value in fields.items():
        if value is None:
            continue
        if isinstance(value, float):
            value = round(value, 6)
        clean[f"x_{key}" if key in _RESERVED_LOG_ATTRS else key] = value
    text = " ".join([f"event={name}", *(f"{k}={_render(v)}" for k, v in clean.items())])
    logger.log(level, text, extra={"event": name, **clean})
