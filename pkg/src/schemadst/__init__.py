"""Schema-guided dialogue state tracking with a small built-in encoder."""

from .assembly import AssemblyConfig, assemble_input, derive_labels, make_examples
from .encoder import EncoderConfig
from .evaluation import build_report, joint_goal_accuracy, average_goal_accuracy
from .model import Model
from .schema import Dialogue, DialogueState, ServiceSchema, load_dialogues, load_schemas
from .synth import SynthConfig, synth_dialogues, synth_schemas
from .tracker import DecodingConfig, OraclePredictor, track_dialogue
from .training import TrainConfig, train

__version__ = "0.1.0"
