"""World snapshots: a ``CDMS-WORLD <version>`` header line followed by a pickle."""
import pickle
from pathlib import Path
from typing import Union

from cdms.core import SnapshotError
from cdms.simnet import SimWorld
from cdms.utils.logging import getLogger

logger = getLogger(__name__)

MAGIC = b"CDMS-WORLD"
VERSION = 1


def save_world(world: SimWorld, path: Union[str, Path]) -> Path:
    """Write ``world`` without its event loop; pending events are dropped."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC + b" " + str(VERSION).encode() + b"\n")
        pickle.dump(world, f, protocol=pickle.HIGHEST_PROTOCOL)
    logger.info(f"💾 Saving {path}")
    return path


def load_world(path: Union[str, Path]) -> SimWorld:
    path = Path(path)
    try:
        f = open(path, "rb")
    except OSError as e:
        raise SnapshotError(f"Cannot open world snapshot {path}: {e}")
    with f:
        header = f.readline().rstrip(b"\n").split(b" ")
        if len(header) != 2 or header[0] != MAGIC:
            raise SnapshotError(f"{path} is not a world snapshot")
        if header[1] != str(VERSION).encode():
            raise SnapshotError(
                f"{path} has snapshot version {header[1].decode(errors='replace')}, expected {VERSION}"
            )
        try:
            world = pickle.load(f)
        except Exception as e:
            raise SnapshotError(f"Corrupt world snapshot {path}: {e}")
    if not isinstance(world, SimWorld):
        raise SnapshotError(f"{path} does not hold a world")
    world.rebind()
    logger.debug(f"Loaded world from {path} at t={world.now:.0f}")
    return world
