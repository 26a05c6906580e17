"""Text artifacts: run logs, perturbation and explanation dumps, CSV reports.

Every file starts with a ``# {json}`` header line carrying the format
version and the config echo. Floats are written with ``repr`` so dumps
round-trip exactly.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .training import PerturbationRecord

FORMAT_VERSION = 1


def header_line(kind: str, config: Mapping) -> str:
    return "# " + json.dumps({"format": kind, "format_version": FORMAT_VERSION, "config": config}, sort_keys=True) + "\n"


def read_header(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if not first.startswith("# "):
        raise ValueError(f"{path}: missing header line")
    return json.loads(first[2:])


def _data_lines(path):
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            yield line.rstrip("\n").split("\t")


def sparse(vec) -> str:
    vec = np.asarray(vec, dtype=np.float64)
    return ",".join(f"{k}:{float(vec[k])!r}" for k in np.flatnonzero(vec))


def dense(text: str, n: int) -> np.ndarray:
    out = np.zeros(n)
    if text:
        for entry in text.split(","):
            k, v = entry.split(":")
            out[int(k)] = float(v)
    return out


def write_run_log(path, rows: Iterable[Mapping], config: Mapping) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header_line("run_log", config))
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_run_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip() and not line.startswith("#")]


def write_perturbations(path, records: Sequence[PerturbationRecord], users, items, config: Mapping) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header_line("perturbations", config))
        for r in records:
            fh.write(
                f"{users[r.user]}\t{items[r.pos_item]}\t{items[r.neg_item]}\t{r.kind}\t"
                f"{int(r.flipped)}\t{r.l2_norm!r}\t{r.l1_norm!r}\t{sparse(r.delta)}\n"
            )


def read_perturbations(path, user_index: Mapping, item_index: Mapping, n_features: int) -> list[PerturbationRecord]:
    out = []
    for fields in _data_lines(path):
        if len(fields) != 8:
            raise ValueError(f"{path}: expected 8 fields, got {len(fields)}")
        user, pos, neg, kind, flipped, _, _, entries = fields
        out.append(
            PerturbationRecord(
                user_index[user], item_index[pos], item_index[neg], kind, dense(entries, n_features), flipped == "1"
            )
        )
    return out


def write_explanations(path, rows: Iterable[tuple[str, str, np.ndarray]], config: Mapping) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header_line("explanations", config))
        for user, source, vec in rows:
            fh.write(f"{user}\t{source}\t{sparse(vec)}\n")


def read_explanations(path, n_features: int) -> dict[str, dict[str, np.ndarray]]:
    out: dict[str, dict[str, np.ndarray]] = {}
    for user, source, entries in _data_lines(path):
        out.setdefault(source, {})[user] = dense(entries, n_features)
    return out


def write_top_words(path, rows: Iterable[tuple[str, str, Sequence[str]]], config: Mapping) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header_line("top_words", config))
        for user, source, words in rows:
            fh.write(f"{user}\t{source}\t{','.join(words)}\n")


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence], kind: str, config: Mapping) -> None:
    buf = io.StringIO()
    buf.write(header_line(kind, config))
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        return [row for row in csv.reader(line for line in fh if not line.startswith("#"))]


def write_json(path, doc: Mapping) -> None:
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
