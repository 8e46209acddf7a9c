import sys
from datetime import datetime, timezone
from typing import Any, Optional

import config


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def log_event(event: str, session: Optional[int] = None, mode: Optional[str] = None,
              err: Optional[BaseException] = None, **fields: Any) -> None:
    ts = datetime.now(timezone.utc).strftime("%Y-%m-%d %H:%M:%S UTC")
    sid = str(session) if session is not None else "-"
    m = mode or "-"
    extra = " ".join(f"{k}={_fmt(v)}" for k, v in fields.items())
    e = repr(err) if err is not None else ""
    line = " ".join(x for x in [f"[{ts}] {event} session={sid} mode={m}", extra, e] if x).strip()
    try:
        with open(config.LOG_FILE_PATH, "a", encoding="utf-8") as f:
            f.write(line + "\n")
    except Exception:
        pass
    print(line, file=sys.stderr)


def init_logging() -> None:
    if config.LOG_TRUNCATE_ON_START:
        try:
            with open(config.LOG_FILE_PATH, "w", encoding="utf-8") as f:
                f.write("")
        except Exception:
            pass
