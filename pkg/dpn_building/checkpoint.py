"""JSON checkpoints for both zone model kinds."""

import json
import logging
from pathlib import Path

from dpn_building.nn import ShapeError, TrainConfig
from dpn_building.rssm import RssmModel
from dpn_building.ssm import SsmModel

logger = logging.getLogger(__name__)

Model = SsmModel | RssmModel

MODEL_KINDS: dict[str, type[SsmModel] | type[RssmModel]] = {"ssm": SsmModel, "rssm": RssmModel}


class CheckpointError(Exception):
    """Raised when a checkpoint cannot be read back into a model."""

    pass


def save_checkpoint(model: Model, path: Path, train_config: TrainConfig | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(model.to_document(train_config)))
    logger.debug("wrote %s checkpoint to %s", type(model).__name__, path)


def load_checkpoint(path: Path) -> Model:
    """Read a checkpoint written by save_checkpoint().

    Raises:
        FileNotFoundError: If the file does not exist
        CheckpointError: If the document is not a valid checkpoint
    """
    path = Path(path)
    try:
        document = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path.name}: not JSON") from e
    kind = document.get("kind") if isinstance(document, dict) else None
    if kind not in MODEL_KINDS:
        raise CheckpointError(f"{path.name}: unknown model kind {kind!r}")
    try:
        return MODEL_KINDS[kind].from_document(document)
    except (KeyError, TypeError, ValueError, ShapeError) as e:
        raise CheckpointError(f"{path.name}: {e}") from e


def checkpoint_train_config(path: Path) -> TrainConfig | None:
    """The training configuration stored alongside the weights, if any."""
    document = json.loads(Path(path).read_text())
    stored = document.get("train_config")
    return TrainConfig.from_dict(stored) if stored else None
