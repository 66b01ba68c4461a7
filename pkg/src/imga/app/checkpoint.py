"""Restart files: flow state, octree, configuration digest and timing metadata."""
import json
import time
from dataclasses import dataclass

import numpy as np

from .. import octree as octree_mod


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    state: np.ndarray
    time: float
    step: int
    tree: object
    config_digest: str
    meta: dict

    def matches(self, tree, digest=None):
        same = (np.array_equal(self.tree.anchors, tree.anchors)
                and np.array_equal(self.tree.levels, tree.levels))
        return same and (digest is None or digest == self.config_digest)


def save_checkpoint(path, state, t, step, tree, config_digest="", wall_time=None, **meta):
    info = dict(meta, wall_time=time.time() if wall_time is None else wall_time)
    with open(path, "wb") as fh:
        np.savez(fh, state=np.asarray(state, float), time=np.float64(t), step=np.int64(step),
                 tree=np.array(octree_mod.dumps(tree)), digest=np.array(config_digest),
                 meta=np.array(json.dumps(info, sort_keys=True)))
    return path


def load_checkpoint(path):
    try:
        with np.load(path, allow_pickle=False) as z:
            return Checkpoint(z["state"].copy(), float(z["time"]), int(z["step"]),
                              octree_mod.loads(str(z["tree"])), str(z["digest"]),
                              json.loads(str(z["meta"])))
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
