# Import application modules
from backend.plugin_base import ActionHolder, PluginBase

# Import actions
from actions.SynthCorpus.SynthCorpus import SynthCorpus
from actions.TrainModel.TrainModel import TrainModel
from actions.EvaluateModel.EvaluateModel import EvaluateModel
from actions.PredictFrames.PredictFrames import PredictFrames
from actions.ComputeMetrics.ComputeMetrics import ComputeMetrics

# Import python modules
import sys
from typing import Optional, Sequence


class ClipNetApp(PluginBase):
    def __init__(self):
        super().__init__()

        ## Register actions
        for action_base, command, name in (
            (SynthCorpus, "synth", "Synthesize Corpus"),
            (TrainModel, "train", "Train Model"),
            (EvaluateModel, "eval", "Evaluate Checkpoint"),
            (PredictFrames, "predict", "Predict Frames"),
            (ComputeMetrics, "metrics", "Compute Metrics"),
        ):
            self.add_action_holder(ActionHolder(
                plugin_base = self,
                action_base = action_base,
                action_id = f"clipnet::{command}",
                action_name = name,
            ))

        # Register application
        self.register(
            plugin_name = "clipnet",
            plugin_version = "1.0.0",
        )


def main(argv: Optional[Sequence[str]] = None) -> int:
    return ClipNetApp().run(argv)


if __name__ == "__main__":
    sys.exit(main())
