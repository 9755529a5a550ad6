#!/usr/bin/env python3
import os
import csv
import json
import hashlib
from datetime import datetime
from typing import Any, Dict, Iterable, List, Optional, Sequence

from pydantic import BaseModel

from evroad import __version__
from evroad.core.errors import DataFormatError
from evroad.core.logger import get_logger

logger = get_logger(__name__)

MANIFEST_NAME = "manifest.json"


class RunManifest(BaseModel):
    command: str
    argv: List[str]
    config: Dict[str, Any]
    seed: Optional[int] = None
    inputs: Dict[str, str] = {}
    tool_version: str = __version__
    created: str = ""


def file_digest(path: str) -> str:
    """SHA-256 of a file's bytes.

    Args:
        path: File to hash

    Returns:
        str: Hex digest
    """
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 16), b''):
            digest.update(chunk)
    return digest.hexdigest()


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> int:
    """Write rows under a header line, returning the number of data rows."""
    count = 0
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format_cell(v) for v in row])
            count += 1
    logger.debug(f"Wrote {count} rows to {path}")
    return count


def _format_cell(value: Any) -> Any:
    if isinstance(value, float):
        return repr(value)
    return value


def write_manifest(out_dir: str, command: str, argv: List[str], config: Dict[str, Any],
                   seed: Optional[int] = None, inputs: Optional[List[str]] = None) -> str:
    """Write manifest.json describing a run next to its outputs.

    Args:
        out_dir: Directory receiving the manifest
        command: Subcommand name
        argv: Full argument vector, replayable by ``run_app.py replay``
        config: Effective configuration snapshot
        seed: Seed that drove the run, if any
        inputs: Input files to fingerprint

    Returns:
        str: Path of the manifest file
    """
    digests = {}
    for path in inputs or []:
        if path and os.path.isfile(path):
            digests[os.path.abspath(path)] = file_digest(path)

    manifest = RunManifest(
        command=command,
        argv=list(argv),
        config=config,
        seed=seed,
        inputs=digests,
        created=datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
    )
    os.makedirs(out_dir or '.', exist_ok=True)
    manifest_path = os.path.join(out_dir or '.', MANIFEST_NAME)
    with open(manifest_path, 'w', encoding='utf-8') as f:
        json.dump(manifest.model_dump(), f, indent=2, ensure_ascii=False)
    logger.info(f"Run manifest written to {manifest_path}")
    return manifest_path


def read_manifest(path: str) -> RunManifest:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return RunManifest.model_validate(json.load(f))
    except (OSError, ValueError) as e:
        raise DataFormatError(f"Cannot read manifest {path}: {e}") from e


def verify_inputs(manifest: RunManifest) -> List[str]:
    """Return the inputs whose current digest differs from the manifest."""
    changed = []
    for path, digest in manifest.inputs.items():
        if not os.path.isfile(path) or file_digest(path) != digest:
            changed.append(path)
    return changed
