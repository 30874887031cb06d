##################################################################################################
#                                        SCRIPT OVERVIEW                                         #
#                                                                                                #
# This module handles the run's output directory and provides helper methods for reading and    #
# writing pipeline artifacts (JSON reports, CSV tables). It uses a context manager pattern to    #
# open the directory once per stage and to log when the stage is done with it.                   #
#                                                                                                #
# Every JSON report carries:                                                                     #
# - schema / schema_version: what the document is, and the layout revision it was written with. #
# - inputs: sha256 digest of every file the report was computed from (provenance).               #
# Documents are written with sorted keys and no timestamps, so identical runs give identical     #
# bytes.                                                                                         #
##################################################################################################

##################################################################################################
#                                            IMPORTS                                             #
##################################################################################################

import csv
import hashlib
import json
from pathlib import Path

from fitkit.errors import ValidationError
from utils.logs_config import logger    # Logs and events

##################################################################################################
#                                        CONFIGURATION                                           #
##################################################################################################

SCHEMA_VERSION = 1
DIGEST_CHUNK = 1 << 20      # Bytes read per hashing step

##################################################################################################
#                                        IMPLEMENTATION                                          #
##################################################################################################

def file_digest(path):
    """sha256 hex digest of a file's contents."""

    h = hashlib.sha256()
    try:
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(DIGEST_CHUNK), b""):
                h.update(chunk)
    except OSError as e:
        raise ValidationError(f"Cannot read input artifact {path}: {e}") from None
    return h.hexdigest()


class ArtifactStore:
    """
    Context-managed access to a run's output directory.

    Attributes:
        root (Path): Directory every artifact is written to (created on enter).
    """

    def __init__(self, output_dir):
        self.root = Path(output_dir)

    def __enter__(self):
        self.root.mkdir(parents=True, exist_ok=True)
        logger.info(f"🔗 Artifact store opened at {self.root}.")
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if exc_type is not None:
            logger.warning(f"⚠️ Artifact store closed after an error: {exc_val}")
        else:
            logger.info("Artifact store closed.")

    def path(self, name):
        return self.root / name

    def save_document(self, name, schema, payload, inputs=None):
        """
        Writes a schema-tagged JSON report.

        Args:
            name (str): File name inside the store.
            schema (str): Document kind (e.g. "trace_report").
            payload (dict): Report body; must not use the reserved keys.
            inputs (dict[str, str | Path], optional): Role -> input file; each is hashed.

        Returns:
            Path: Location of the written document.
        """

        reserved = {"schema", "schema_version", "inputs"} & set(payload)
        if reserved:
            raise ValidationError(f"Report payload uses reserved keys: {sorted(reserved)}.")
        document = {
            "schema": schema,
            "schema_version": SCHEMA_VERSION,
            "inputs": {
                role: {"file": Path(path).name, "sha256": file_digest(path)}
                for role, path in sorted((inputs or {}).items())
            },
        }
        document.update(payload)
        target = self.path(name)
        with open(target, "w", encoding="utf-8") as f:
            json.dump(document, f, indent=2, sort_keys=True, allow_nan=True)
            f.write("\n")
        logger.info(f"✅ Saved {schema} to {target}.")
        return target

    @staticmethod
    def load_document(path, schema=None):
        """
        Reads a JSON report written by `save_document`.

        Raises:
            ValidationError: Missing or unreadable file, wrong schema, or a schema_version other
                than the current one.
        """

        try:
            with open(path, "r", encoding="utf-8") as f:
                document = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ValidationError(f"Cannot read artifact {path}: {e}") from None
        if not isinstance(document, dict) or "schema_version" not in document:
            raise ValidationError(f"{path} is not a FITKit report.")
        if document["schema_version"] != SCHEMA_VERSION:
            raise ValidationError(
                f"{path} has schema_version {document['schema_version']}, expected {SCHEMA_VERSION}."
            )
        if schema is not None and document.get("schema") != schema:
            raise ValidationError(f"{path} holds a '{document.get('schema')}' document, expected '{schema}'.")
        return document

    def write_csv(self, name, rows, fieldnames=None):
        """
        Writes rows (dicts) as CSV. Columns default to the keys in order of first appearance.

        Returns:
            Path: Location of the written table.
        """

        if fieldnames is None:
            fieldnames = []
            for row in rows:
                fieldnames.extend(k for k in row if k not in fieldnames)
        target = self.path(name)
        with open(target, "w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
        logger.info(f"📊 Wrote {len(rows)} rows to {target}.")
        return target

    @staticmethod
    def read_csv(path):
        try:
            with open(path, "r", encoding="utf-8", newline="") as f:
                return list(csv.DictReader(f))
        except OSError as e:
            raise ValidationError(f"Cannot read table {path}: {e}") from None
