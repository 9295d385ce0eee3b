import json
import logging
from pathlib import Path
from typing import Iterable, List

from app.schemas.artifacts import MetricRecord

logger = logging.getLogger(__name__)


class MetricsRepository:
    """Newline-delimited JSON metric stream, one object per evaluation"""

    @staticmethod
    def serialize(record: MetricRecord) -> str:
        return json.dumps(record.model_dump(mode="json"))

    @staticmethod
    def write(records: Iterable[MetricRecord], path: str) -> None:
        """Replace the stream at ``path`` with ``records``."""
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        lines = [MetricsRepository.serialize(r) + "\n" for r in records]
        target.write_text("".join(lines), encoding="utf-8")
        logger.info(f"Wrote {len(lines)} metric records to {path}")

    @staticmethod
    def read(path: str) -> List[MetricRecord]:
        with Path(path).open(encoding="utf-8") as fh:
            return [MetricRecord.model_validate_json(line) for line in fh if line.strip()]
