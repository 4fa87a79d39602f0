import asyncio
import csv
import hashlib
import io
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Literal, Optional, Sequence

import numpy as np

from ..config import FLOAT_FORMAT, SCHEMA_VERSION
from ..errors import SchemaMismatchError
from ..experiment_harness import EpisodeLog
from ..gp_learning import GPDataset, load_dataset, save_dataset
from ..interfaces import EpisodeStore
from ..models import RunManifest, UpdateRecord

logger = logging.getLogger(__name__)

LogFormat = Literal["csv", "json"]

MANIFEST_FILE = "manifest.json"
TICKS_SCHEMA = "ticks"
UPDATES_SCHEMA = "updates"
_EPISODE_KEYS = ("name", "seed", "dt", "compensate", "learning")


def format_value(value: Any) -> str:
    """Text form of a cell; floats keep 17 significant digits."""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), FLOAT_FORMAT)
    return str(value)


def blob_digest(path: str) -> str:
    """Git-style blob SHA-1 of a file's contents."""
    with open(path, "rb") as fh:
        data = fh.read()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def atomic_write(path: str, text: str) -> None:
    """Write ``text`` to a temporary sibling and rename it over ``path``."""
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


@dataclass
class CsvTable:
    """A parsed versioned CSV file.

    Attributes:
        schema: Schema name from the first row.
        version: Schema version from the first row.
        meta: Extra ``#``-prefixed row following the schema row, if any.
        header: Column names.
        rows: Data rows as text.
    """

    schema: str
    version: int
    header: List[str]
    rows: List[List[str]] = field(default_factory=list)
    meta: List[str] = field(default_factory=list)

    def column(self, name: str) -> List[str]:
        idx = self.header.index(name)
        return [row[idx] for row in self.rows]

    def float_columns(self) -> Dict[str, np.ndarray]:
        values = np.array(self.rows, dtype=np.float64).reshape(-1, len(self.header))
        return {name: values[:, i].copy() for i, name in enumerate(self.header)}


def render_csv(
    schema: str,
    header: Sequence[str],
    rows: Iterable[Sequence[Any]],
    meta: Optional[Sequence[Any]] = None,
    version: int = SCHEMA_VERSION,
) -> str:
    """CSV text starting with ``#schema,<name>,<version>``."""
    lines: List[List[str]] = [["#schema", schema, str(version)]]
    if meta is not None:
        lines.append(["#meta", *[format_value(v) for v in meta]])
    lines.append(list(header))
    lines.extend([format_value(v) for v in row] for row in rows)
    buffer = io.StringIO()
    csv.writer(buffer, lineterminator="\n").writerows(lines)
    return buffer.getvalue()


def write_csv(
    path: str,
    schema: str,
    header: Sequence[str],
    rows: Iterable[Sequence[Any]],
    meta: Optional[Sequence[Any]] = None,
) -> None:
    atomic_write(path, render_csv(schema, header, rows, meta))


def read_csv(path: str, expected_schema: Optional[str] = None) -> CsvTable:
    """Parse a file written by :func:`write_csv`.

    Raises:
        SchemaMismatchError: If the schema row is missing, names another
            schema, or carries another version.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        lines = list(csv.reader(fh))
    if not lines or len(lines[0]) != 3 or lines[0][0] != "#schema":
        raise SchemaMismatchError(f"{path} has no schema header row")
    _, schema, version_text = lines[0]
    version = int(version_text)
    if expected_schema is not None and schema != expected_schema:
        raise SchemaMismatchError(
            f"{path} holds schema '{schema}', expected '{expected_schema}'"
        )
    if version != SCHEMA_VERSION:
        raise SchemaMismatchError(
            f"{path} has schema version {version}, this build reads version "
            f"{SCHEMA_VERSION}"
        )
    body = lines[1:]
    meta: List[str] = []
    if body and body[0] and body[0][0] == "#meta":
        meta = body[0][1:]
        body = body[1:]
    if not body:
        raise SchemaMismatchError(f"{path} has no column header")
    return CsvTable(
        schema=schema, version=version, header=body[0], rows=body[1:], meta=meta
    )


def _update_value(name: str, text: str) -> Any:
    if UpdateRecord.model_fields[name].annotation is int:
        return int(text)
    return float(text)


class CsvEpisodeStore(EpisodeStore):
    """
    Run-directory implementation of the EpisodeStore protocol.

    Layout: ``manifest.json``, ``seed-XXXX/ticks.{csv,json}``,
    ``seed-XXXX/updates.{csv,json}`` and ``datasets/<name>.npz``. File IO runs
    in worker threads so the event loop stays free.
    """

    def __init__(self, root: str, log_format: LogFormat = "csv") -> None:
        self.root = root
        self.log_format: LogFormat = log_format
        self._initialized: bool = False

    async def initialize(self) -> None:
        """Creates the run directory if needed."""
        if self._initialized:
            return
        await asyncio.to_thread(os.makedirs, self.root, exist_ok=True)
        self._initialized = True
        logger.info(f"CsvEpisodeStore initialized for {self.root}")

    async def close(self) -> None:
        if self._initialized:
            self._initialized = False
            logger.info(f"CsvEpisodeStore closed for {self.root}")

    async def _ensure_initialized(self) -> None:
        if not self._initialized:
            raise RuntimeError(
                "Store not initialized or closed. "
                "Call await store.initialize() first."
            )

    @staticmethod
    def seed_dir(seed: int) -> str:
        return f"seed-{seed:04d}"

    def _path(self, *parts: str) -> str:
        return os.path.join(self.root, *parts)

    # -- episodes ----------------------------------------------------------

    def _write_episode(self, log: EpisodeLog) -> List[str]:
        directory = self.seed_dir(log.seed)
        ext = self.log_format
        ticks_rel = f"{directory}/ticks.{ext}"
        updates_rel = f"{directory}/updates.{ext}"
        header = list(log.ticks.keys())
        update_header = list(UpdateRecord.model_fields.keys())
        meta = [log.name, log.seed, log.dt, log.compensate, log.learning]
        if ext == "csv":
            matrix = np.column_stack([log.ticks[name] for name in header])
            write_csv(
                self._path(ticks_rel), TICKS_SCHEMA, header, matrix.tolist(), meta
            )
            write_csv(
                self._path(updates_rel),
                UPDATES_SCHEMA,
                update_header,
                (
                    [getattr(rec, name) for name in update_header]
                    for rec in log.updates
                ),
            )
        else:
            ticks_doc = {
                "schema": {"name": TICKS_SCHEMA, "version": SCHEMA_VERSION},
                "episode": dict(zip(_EPISODE_KEYS, meta)),
                "columns": {name: log.ticks[name].tolist() for name in header},
            }
            updates_doc = {
                "schema": {"name": UPDATES_SCHEMA, "version": SCHEMA_VERSION},
                "rows": [rec.model_dump() for rec in log.updates],
            }
            atomic_write(self._path(ticks_rel), json.dumps(ticks_doc))
            atomic_write(self._path(updates_rel), json.dumps(updates_doc))
        return [ticks_rel, updates_rel]

    async def save_episode(self, log: EpisodeLog) -> List[str]:
        await self._ensure_initialized()
        paths = await asyncio.to_thread(self._write_episode, log)
        logger.info(f"Saved episode seed {log.seed} to {self.root}")
        return paths

    def _find(self, seed: int, stem: str) -> str:
        for ext in ("csv", "json"):
            path = self._path(self.seed_dir(seed), f"{stem}.{ext}")
            if os.path.exists(path):
                return path
        raise FileNotFoundError(f"No {stem} log for seed {seed} in {self.root}")

    @staticmethod
    def _check_json_schema(path: str, doc: Dict[str, Any], name: str) -> None:
        schema = doc.get("schema", {})
        if schema.get("name") != name:
            raise SchemaMismatchError(f"{path} does not hold a '{name}' log")
        if schema.get("version") != SCHEMA_VERSION:
            raise SchemaMismatchError(
                f"{path} has schema version {schema.get('version')}, this build "
                f"reads version {SCHEMA_VERSION}"
            )

    def _read_episode(self, seed: int) -> EpisodeLog:
        ticks_path = self._find(seed, "ticks")
        updates_path = self._find(seed, "updates")
        if ticks_path.endswith(".csv"):
            table = read_csv(ticks_path, TICKS_SCHEMA)
            name, seed_text, dt_text, comp_text, learn_text = table.meta
            episode = {
                "name": name,
                "seed": int(seed_text),
                "dt": float(dt_text),
                "compensate": comp_text == "1",
                "learning": learn_text == "1",
            }
            ticks = table.float_columns()
            updates_table = read_csv(updates_path, UPDATES_SCHEMA)
            updates = [
                UpdateRecord(
                    **{
                        k: _update_value(k, v)
                        for k, v in zip(updates_table.header, row)
                    }
                )
                for row in updates_table.rows
            ]
        else:
            with open(ticks_path, encoding="utf-8") as fh:
                ticks_doc = json.load(fh)
            self._check_json_schema(ticks_path, ticks_doc, TICKS_SCHEMA)
            with open(updates_path, encoding="utf-8") as fh:
                updates_doc = json.load(fh)
            self._check_json_schema(updates_path, updates_doc, UPDATES_SCHEMA)
            episode = ticks_doc["episode"]
            ticks = {
                name: np.asarray(values, dtype=np.float64)
                for name, values in ticks_doc["columns"].items()
            }
            updates = [UpdateRecord(**row) for row in updates_doc["rows"]]
        return EpisodeLog(ticks=ticks, updates=updates, **episode)

    async def load_episode(self, seed: int) -> EpisodeLog:
        await self._ensure_initialized()
        return await asyncio.to_thread(self._read_episode, seed)

    def _scan_seeds(self) -> List[int]:
        seeds = []
        for entry in os.listdir(self.root):
            if entry.startswith("seed-") and os.path.isdir(self._path(entry)):
                try:
                    seeds.append(int(entry[len("seed-") :]))
                except ValueError:
                    logger.warning(f"Ignoring unexpected directory {entry}")
        return sorted(seeds)

    async def list_episodes(self) -> List[int]:
        await self._ensure_initialized()
        return await asyncio.to_thread(self._scan_seeds)

    # -- manifest ----------------------------------------------------------

    async def save_manifest(self, manifest: RunManifest) -> str:
        await self._ensure_initialized()
        path = self._path(MANIFEST_FILE)
        await asyncio.to_thread(atomic_write, path, manifest.model_dump_json(indent=2))
        logger.info(f"Wrote manifest {path}")
        return path

    def _read_manifest(self) -> RunManifest:
        path = self._path(MANIFEST_FILE)
        if not os.path.exists(path):
            raise FileNotFoundError(f"No manifest in {self.root}")
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        version = raw.get("schema_version")
        if version != SCHEMA_VERSION:
            raise SchemaMismatchError(
                f"{path} has schema version {version}, this build reads version "
                f"{SCHEMA_VERSION}"
            )
        return RunManifest.model_validate(raw)

    async def load_manifest(self) -> RunManifest:
        await self._ensure_initialized()
        return await asyncio.to_thread(self._read_manifest)

    def digests(self, relative_paths: Iterable[str]) -> Dict[str, str]:
        return {rel: blob_digest(self._path(rel)) for rel in relative_paths}

    # -- datasets ----------------------------------------------------------

    def _write_dataset(self, name: str, data: GPDataset) -> str:
        path = self._path("datasets", f"{name}.npz")
        directory = os.path.dirname(path)
        os.makedirs(directory, exist_ok=True)
        fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".npz")
        os.close(fd)
        try:
            save_dataset(data, tmp_path)
            os.replace(tmp_path, path)
        except BaseException:
            if os.path.exists(tmp_path):
                os.unlink(tmp_path)
            raise
        return path

    async def save_dataset(self, name: str, data: GPDataset) -> str:
        await self._ensure_initialized()
        return await asyncio.to_thread(self._write_dataset, name, data)

    async def load_dataset(self, name: str) -> GPDataset:
        await self._ensure_initialized()
        path = self._path("datasets", f"{name}.npz")
        if not os.path.exists(path):
            raise FileNotFoundError(f"No dataset '{name}' in {self.root}")
        return await asyncio.to_thread(load_dataset, path)
