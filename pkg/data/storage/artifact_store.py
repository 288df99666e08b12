import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import pandas as pd

from src.qnmh import __version__
from src.qnmh.utils import sanitize_obj

FLOAT_FORMAT = "%.17g"


class ArtifactStore:
    """
    Output directory helper. Every file gets a ``<name>.meta.json`` sidecar with
    the config hash, seed, code version and any extra provenance.
    """

    def __init__(self, out_dir: Union[str, Path], config_hash: Optional[str] = None):
        self.out_dir = Path(out_dir)
        self.config_hash = config_hash
        self.logger = logging.getLogger(self.__class__.__name__)
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create output directory {self.out_dir}: {exc}") from exc

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def _write_sidecar(self, target: Path, seed: Optional[int], provenance: Optional[Dict[str, Any]]) -> None:
        meta = {
            "file": target.name,
            "config_hash": self.config_hash,
            "seed": seed,
            "code_version": __version__,
        }
        if provenance:
            meta["provenance"] = provenance
        sidecar = target.with_name(target.name + ".meta.json")
        sidecar.write_text(json.dumps(sanitize_obj(meta), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def write_frame(
        self,
        name: str,
        frame: pd.DataFrame,
        seed: Optional[int] = None,
        provenance: Optional[Dict[str, Any]] = None,
    ) -> Path:
        """CSV with full float precision; identical frames give identical bytes."""
        target = self.path(name)
        target.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(target, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        self._write_sidecar(target, seed, provenance)
        self.logger.info("Wrote %s (%d rows)", target, len(frame))
        return target

    def write_json(
        self,
        name: str,
        payload: Any,
        seed: Optional[int] = None,
        provenance: Optional[Dict[str, Any]] = None,
    ) -> Path:
        target = self.path(name)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(sanitize_obj(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        self._write_sidecar(target, seed, provenance)
        self.logger.info("Wrote %s", target)
        return target

    def write_text(self, name: str, text: str, provenance: Optional[Dict[str, Any]] = None) -> Path:
        target = self.path(name)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(text, encoding="utf-8")
        self._write_sidecar(target, None, provenance)
        return target
