# Import application modules
from backend.data import parse_annotation_file
from backend.errors import DataContractError
from backend.metrics import MetricsReport, confusion_from_predictions, read_predictions
from backend.plugin_base import ActionBase

# Import python modules
import argparse
import logging
from pathlib import Path
from typing import List, Tuple

logger = logging.getLogger(__name__)


class ComputeMetrics(ActionBase):
    HELP = "Score a predictions file against annotations"

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("--predictions", required=True, help="'<video_id> <frame_index> <class>' lines")
        parser.add_argument("--annotations", required=True, help="Annotations directory")

    def on_run(self, args: argparse.Namespace, overrides: List[Tuple[str, str]]) -> int:
        root = Path(args.annotations)
        if not root.is_dir():
            raise DataContractError(f"annotations directory {root} does not exist")
        annotations = {path.stem: parse_annotation_file(path) for path in sorted(root.glob("*.txt"))}
        cm = confusion_from_predictions(read_predictions(args.predictions), annotations)
        print(MetricsReport.from_confusion(cm).format())
        return 0
