import csv
import os
import re
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Union

import numpy as np
import yaml


def is_nonempty_file(path: Union[str, Path]) -> bool:
    return os.path.isfile(path) and os.path.getsize(path) > 0


def bump_version(path: Union[str, Path]) -> Path:
    """Next free ``<stem>_<n><suffix>`` for a path that already exists.

    Example::

        bump_version("out/summary.yaml") == Path("out/summary.yaml")      # nothing saved yet
        bump_version("out/summary.yaml") == Path("out/summary_1.yaml")    # summary.yaml exists
        bump_version("out/summary_1.yaml") == Path("out/summary_2.yaml")
    """
    path = Path(path)
    if not path.exists():
        return path

    base = re.sub(r"_\d+$", "", path.stem)
    pattern = re.compile(rf"{re.escape(base)}_(\d+){re.escape(path.suffix)}")
    versions = [int(m.group(1)) for f in path.parent.iterdir() if (m := pattern.fullmatch(f.name))]
    return path.parent / f"{base}_{max(versions, default=0) + 1}{path.suffix}"


def dump_yaml(path: Path, data: Any):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(str(path), "w") as f:
        yaml.dump(data, f, sort_keys=True)


def load_yaml(path: Path) -> Any:
    with open(path, "r") as f:
        data = yaml.load(f, Loader=yaml.FullLoader)
    return data


def dump_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]):
    """Write a CSV artifact with ``\\n`` line endings so reruns compare byte-equal."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(str(path), "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def load_csv(path: Path) -> List[Dict[str, str]]:
    with open(str(path), "r", newline="") as f:
        return list(csv.DictReader(f))


def float_representer(dumper: yaml.Dumper, value: float):
    text = "{0:.9f}".format(value)
    return dumper.represent_scalar("tag:yaml.org,2002:float", text)


def np_float_representer(dumper: yaml.Dumper, value: np.floating):
    return float_representer(dumper, float(value))


yaml.add_representer(float, float_representer)
yaml.add_representer(np.float64, np_float_representer)
