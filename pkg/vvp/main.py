# trunk-ignore-all(ruff/E402)

import os
import sys
from typing import TextIO

base_path = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, base_path)

from cli import dispatch
from dotenv import load_dotenv


def setup_environment() -> TextIO | None:
    """Load .env and point stdout at LOG_FILE; returns the log handle it opened."""
    # A .env next to the working directory is optional, unlike on device
    env_file = os.path.join(os.getcwd(), ".env")
    if os.path.exists(env_file):
        load_dotenv(env_file)

    # Set up logging
    log_file = os.environ.get("LOG_FILE")
    if not log_file:
        return None
    os.makedirs(os.path.dirname(os.path.abspath(log_file)), exist_ok=True)
    handle = open(log_file, "a", buffering=1)
    sys.stdout = handle
    return handle


def main(argv: list[str] | None = None) -> int:
    previous = sys.stdout
    log = setup_environment()
    try:
        result = dispatch(sys.argv[1:] if argv is None else argv)
    finally:
        if log is not None:
            sys.stdout = previous
            log.close()
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
