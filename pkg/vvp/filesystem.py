import json
import os
import re
from typing import Optional


class Filesystem:
    _instance: Optional["Filesystem"] = None

    # Default roots, relative to the working directory unless overridden
    _data_path: str
    _runs_path: str

    def __new__(cls):
        if not cls._instance:
            cls._instance = super(Filesystem, cls).__new__(cls)
        return cls._instance

    def __init__(self) -> None:
        self._data_path = os.path.abspath(
            os.environ.get("VVP_DATA_PATH", os.path.join(os.getcwd(), "data"))
        )
        self._runs_path = os.path.abspath(
            os.environ.get("VVP_RUNS_PATH", os.path.join(os.getcwd(), "runs"))
        )

    ###
    # PRIVATE METHODS
    ###

    def _resolve(self, root: str, path: str) -> str:
        """Absolute paths pass through; relative ones hang off root."""
        if os.path.isabs(path):
            return path
        # Paths the user spelled from the working directory stay there
        if os.path.exists(path) or path.startswith(("./", "../")):
            return os.path.abspath(path)
        return os.path.join(root, path)

    ###
    # PUBLIC METHODS
    ###

    def get_data_path(self, path: str = "") -> str:
        return self._resolve(self._data_path, path) if path else self._data_path

    def get_runs_path(self, path: str = "") -> str:
        return self._resolve(self._runs_path, path) if path else self._runs_path

    def split_path(self, data_dir: str, split: str) -> str:
        """Directory of one split, or data_dir itself when it is already a store."""
        base = self.get_data_path(data_dir)
        candidate = os.path.join(base, split)
        if os.path.isdir(candidate):
            return candidate
        return base

    def ensure_dir(self, path: str) -> str:
        os.makedirs(path, exist_ok=True)
        return path

    def checkpoint_path(self, out_dir: str, epoch: int) -> str:
        return os.path.join(out_dir, f"ckpt_epoch{epoch:04d}.pt")

    def latest_checkpoint(self, out_dir: str) -> str | None:
        if not os.path.isdir(out_dir):
            return None
        found = [
            (int(match.group(1)), name)
            for name in os.listdir(out_dir)
            if (match := re.fullmatch(r"ckpt_epoch(\d+)\.pt", name))
        ]
        if not found:
            return None
        return os.path.join(out_dir, max(found)[1])

    def write_json(self, path: str, payload: dict) -> str:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True, default=_json_default)
            f.write("\n")
        return path

    def append_jsonl(self, path: str, record: dict) -> None:
        with open(path, "a") as f:
            f.write(json.dumps(record, sort_keys=True, default=_json_default) + "\n")


def _json_default(value):
    # numpy scalars/arrays and tuples that json cannot encode
    if hasattr(value, "tolist"):
        return value.tolist()
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")
