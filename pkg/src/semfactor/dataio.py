"""File formats: line-delimited feature records, versioned checkpoints
with checksums, heat-map exports and per-image state dumps.

Feature files are UTF-8 JSON lines, one image per record:

    {"image_id": ..., "width": W, "height": H,
     "patches": [{"id": j, "rle_mask": [[start, run], ...], "feature": [...]}],
     "adjacency": [[a, b], ...],
     "labels": {"mode": "strong"|"weak"|"none", "weak": [...],
                "strong": [[...]], "fg": [...]},
     "attributes": [names]}          # optional, names the label columns

Pixel masks are run-length lists over row-major flat indices. All floats
serialise through repr and round-trip bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .core import (
    DataFormatError,
    FeatureBag,
    Hyperparams,
    AppearanceModel,
    Patch,
    SupervisionLabels,
    validate_bag,
)
from .heatmaps import HeatMapStack

CHECKPOINT_VERSION = 1


def rle_encode(flat_indices: np.ndarray) -> list[list[int]]:
    idx = np.sort(np.asarray(flat_indices, dtype=np.int64))
    runs: list[list[int]] = []
    for v in idx:
        v = int(v)
        if runs and runs[-1][0] + runs[-1][1] == v:
            runs[-1][1] += 1
        else:
            runs.append([v, 1])
    return runs


def rle_decode(runs: list[list[int]]) -> np.ndarray:
    parts = [np.arange(start, start + length, dtype=np.int64) for start, length in runs]
    if not parts:
        return np.empty(0, dtype=np.int64)
    return np.concatenate(parts)


def bag_to_record(bag: FeatureBag, labels: SupervisionLabels | None = None) -> dict:
    rec = {
        "image_id": bag.image_id,
        "width": bag.width,
        "height": bag.height,
        "patches": [
            {
                "id": p.patch_id,
                "rle_mask": rle_encode(p.pixel_mask),
                "feature": [float(v) for v in p.feature],
            }
            for p in bag.patches
        ],
        "adjacency": [[int(a), int(b)] for a, b in bag.adjacency],
    }
    if labels is not None and labels.mode != "none":
        lab: dict = {"mode": labels.mode}
        if labels.mode == "weak":
            lab["weak"] = [int(v) for v in labels.weak_labels]
        else:
            lab["strong"] = [[int(v) for v in row] for row in labels.strong_labels]
        if labels.foreground_mask is not None:
            lab["fg"] = [bool(v) for v in labels.foreground_mask]
        rec["labels"] = lab
        if labels.attribute_names is not None:
            rec["attributes"] = list(labels.attribute_names)
    elif labels is not None and labels.foreground_mask is not None:
        rec["labels"] = {"mode": "none", "fg": [bool(v) for v in labels.foreground_mask]}
    return rec


def _need(rec: dict, key: str, where: str):
    if key not in rec:
        raise DataFormatError(f"{where}: missing field {key!r}")
    return rec[key]


def record_to_bag(rec: dict, where: str = "record") -> tuple[FeatureBag, SupervisionLabels]:
    image_id = str(_need(rec, "image_id", where))
    where = f"{where} (image {image_id})"
    width = int(_need(rec, "width", where))
    height = int(_need(rec, "height", where))
    patches = []
    for p in _need(rec, "patches", where):
        patches.append(
            Patch(
                patch_id=int(_need(p, "id", where)),
                pixel_mask=rle_decode(_need(p, "rle_mask", where)),
                feature=np.asarray(_need(p, "feature", where), dtype=np.float64),
            )
        )
    adjacency = [(int(a), int(b)) for a, b in _need(rec, "adjacency", where)]
    bag = FeatureBag(image_id=image_id, width=width, height=height, patches=patches, adjacency=adjacency)

    lab = rec.get("labels") or {}
    mode = lab.get("mode", "none")
    names = rec.get("attributes")
    fg = np.asarray(lab["fg"], dtype=bool) if "fg" in lab else None
    if fg is not None and fg.shape[0] != bag.n_patches:
        raise DataFormatError(f"{where}: field fg has {fg.shape[0]} entries for {bag.n_patches} patches")
    if mode == "none":
        labels = SupervisionLabels(mode="none", foreground_mask=fg, attribute_names=names)
    elif mode == "weak":
        weak = np.asarray(_need(lab, "weak", where), dtype=np.int8)
        if names is not None and len(names) != weak.shape[0]:
            raise DataFormatError(f"{where}: attributes and weak labels disagree on length")
        labels = SupervisionLabels(mode="weak", weak_labels=weak, foreground_mask=fg, attribute_names=names)
    elif mode == "strong":
        strong = np.asarray(_need(lab, "strong", where), dtype=np.int8)
        if strong.ndim != 2 or strong.shape[0] != bag.n_patches:
            raise DataFormatError(
                f"{where}: field strong must have one row per patch "
                f"({bag.n_patches}), got shape {strong.shape}"
            )
        if names is not None and len(names) != strong.shape[1]:
            raise DataFormatError(f"{where}: attributes and strong labels disagree on length")
        labels = SupervisionLabels(mode="strong", strong_labels=strong, foreground_mask=fg, attribute_names=names)
    else:
        raise DataFormatError(f"{where}: unknown labels.mode {mode!r}")
    return bag, labels


def load_feature_bags(path: str) -> list[tuple[FeatureBag, SupervisionLabels]]:
    """Parse and validate a feature file; every bag must pass validate_bag."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{where}: invalid JSON ({exc.msg})") from None
            bag, labels = record_to_bag(rec, where)
            problems = validate_bag(bag)
            if problems:
                raise DataFormatError(f"{where}: image {bag.image_id}: " + "; ".join(problems))
            out.append((bag, labels))
    if not out:
        raise DataFormatError(f"{path}: no records")
    return out


def save_feature_bags(items, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for bag, labels in items:
            fh.write(json.dumps(bag_to_record(bag, labels)) + "\n")


def _canonical(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def save_model(model: AppearanceModel, path: str) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "factor_names": list(model.factor_names),
        "k_supervised": model.hyperparams.k_supervised,
        "hyperparams": model.hyperparams.to_dict(),
        "mean": [[float(v) for v in row] for row in model.mean],
        "covariance": [[float(v) for v in row] for row in model.covariance],
    }
    payload["checksum"] = hashlib.sha256(_canonical(payload).encode("utf-8")).hexdigest()
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(payload))
    os.replace(tmp, path)


def load_model(path: str) -> AppearanceModel:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError:
        raise DataFormatError(f"{path}: corrupted checkpoint (not valid JSON)") from None
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version!r}")
    stored = payload.pop("checksum", None)
    actual = hashlib.sha256(_canonical(payload).encode("utf-8")).hexdigest()
    if stored != actual:
        raise DataFormatError(f"{path}: checksum mismatch (truncated or corrupted file)")
    hp = Hyperparams.from_dict(payload["hyperparams"])
    return AppearanceModel(
        mean=np.asarray(payload["mean"], dtype=np.float64),
        covariance=np.asarray(payload["covariance"], dtype=np.float64),
        factor_names=list(payload["factor_names"]),
        hyperparams=hp,
    )


def save_heatmaps(stacks: list[HeatMapStack], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for stack in stacks:
            rec = {
                "image_id": stack.image_id,
                "width": stack.width,
                "height": stack.height,
                "maps": {
                    name: [float(v) for v in stack.maps[i].ravel()]
                    for i, name in enumerate(stack.factor_names)
                },
            }
            fh.write(json.dumps(rec) + "\n")


def load_heatmaps(path: str) -> dict[str, HeatMapStack]:
    out: dict[str, HeatMapStack] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{where}: invalid JSON ({exc.msg})") from None
            image_id = str(_need(rec, "image_id", where))
            width = int(_need(rec, "width", where))
            height = int(_need(rec, "height", where))
            maps_obj = _need(rec, "maps", where)
            names = list(maps_obj.keys())
            maps = np.stack(
                [np.asarray(maps_obj[n], dtype=np.float64).reshape(height, width) for n in names]
            ) if names else np.zeros((0, height, width))
            out[image_id] = HeatMapStack(image_id, width, height, names, maps)
    if not out:
        raise DataFormatError(f"{path}: no records")
    return out


def save_states(states, bags, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for state, bag in zip(states, bags):
            rec = {
                "image_id": bag.image_id,
                "k_active": state.k_active,
                "z": [[int(v) for v in row] for row in state.z],
            }
            fh.write(json.dumps(rec) + "\n")


def save_csv(rows, path: str, header: list[str] | None = None) -> None:
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        if header:
            writer.writerow(header)
        for row in rows:
            writer.writerow(row)
