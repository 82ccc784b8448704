"""CSV outputs of the command line tools."""

from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd


def _write(df: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False)
    return path


def score_frame(scores: dict[int, np.ndarray], labels: Optional[np.ndarray] = None, column: str = "loss") -> pd.DataFrame:
    """Long table with one row per (sample, cGMM layer)."""
    frames = []
    for layer, values in scores.items():
        df = pd.DataFrame({"sample": np.arange(len(values)), "layer": layer, column: values})
        if labels is not None:
            df.insert(1, "label", labels)
        frames.append(df)
    return pd.concat(frames, ignore_index=True)


def write_scores(scores: dict[int, np.ndarray], path, labels: Optional[np.ndarray] = None, column: str = "loss") -> Path:
    return _write(score_frame(scores, labels, column), path)


def write_frame(df: pd.DataFrame, path) -> Path:
    return _write(df, path)


def layer_means(scores: dict[int, np.ndarray]) -> pd.DataFrame:
    return pd.DataFrame({"layer": list(scores), "mean_loss": [float(np.mean(v)) for v in scores.values()]})
