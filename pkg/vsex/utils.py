"""
Utilities module for vsex.
Provides helper functions for:
  - Writing files atomically through a temporary file in the target
    directory, so a crash never leaves half a dataset or checkpoint.
  - Writing CSV tables with a fixed header row.
  - Writing and reading JSON documents (sidecars, resolved configs).
  - Removing temporary files.
"""

import csv
import json
import logging
import os
import tempfile
from typing import Dict, Iterable, List, Sequence


def atomic_write(path: str, data: bytes) -> None:
    """
    Write data to path via a temporary file and an atomic rename.

    Raises:
        RuntimeError: If the file cannot be written.
    """
    directory = os.path.dirname(os.path.abspath(path))
    temp_files = []
    try:
        with tempfile.NamedTemporaryFile(
            dir=directory, delete=False, suffix=".tmp"
        ) as fh:
            temp_files.append(fh.name)
            fh.write(data)
        os.replace(fh.name, path)
        logging.debug(f"[IO] Wrote {len(data)} bytes to {path}")
    except OSError as e:
        logging.error(f"[IO] Error writing {path}: {e}")
        cleanup_temp_files(temp_files)
        raise RuntimeError(f"Failed to write {path}") from e


def write_json(obj, path: str) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    atomic_write(path, text.encode("utf-8"))


def read_json(path: str):
    with open(path) as fh:
        return json.load(fh)


def write_csv(
    rows: Iterable[Dict], path: str, fieldnames: Sequence[str]
) -> None:
    """
    Write rows as CSV with the given column order as the header.

    Args:
        rows: Dicts keyed by column name; extra keys are ignored.
        path: Destination file.
        fieldnames: Column order, written as the first line.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=list(fieldnames), extrasaction="ignore",
            lineterminator="\n",
        )
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    logging.info(f"[IO] Wrote table {path}")


def read_csv(path: str) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def resolved_config_path(output_path: str) -> str:
    return output_path + ".config.json"


def cleanup_temp_files(file_paths: List[str]) -> None:
    """
    Remove temporary files specified in the file_paths list.

    Logs warnings for any files that cannot be removed.
    """
    for file_path in file_paths:
        try:
            os.remove(file_path)
            logging.debug(f"[Cleanup] Removed temporary file: {file_path}")
        except OSError as e:
            logging.warning(
                f"[Cleanup] Failed to remove temporary file {file_path}: {e}"
            )
