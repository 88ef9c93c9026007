"""
报告输出

JSON 报告按键排序、缩进2格，不含时间戳，相同输入得到逐字节相同的文件；
CSV 摘要用 pandas 写出，字段与 JSON 摘要一致。
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence, Union

import pandas as pd
from loguru import logger

from .models import ConfigurationError


def to_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_json(data: Any, path: Union[str, Path]) -> Path:
    """写出JSON报告"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_json(data), encoding="utf-8")
    logger.debug(f"写出JSON报告: {path}")
    return path


def read_json(path: Union[str, Path]) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def summary_frame(rows: Sequence[Mapping[str, Any]]) -> pd.DataFrame:
    """
    摘要表

    Args:
        rows: 每行一个实验摘要，键一致

    Returns:
        pd.DataFrame: 按首行键顺序排列的表
    """
    if not rows:
        raise ConfigurationError("摘要表至少需要一行")
    columns = list(rows[0].keys())
    for index, row in enumerate(rows):
        if set(row.keys()) != set(columns):
            raise ConfigurationError(f"第{index}行的字段与首行不一致")
    return pd.DataFrame([dict(row) for row in rows], columns=columns)


def write_summary_csv(rows: Sequence[Mapping[str, Any]], path: Union[str, Path]) -> Path:
    """写出CSV摘要"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    summary_frame(rows).to_csv(path, index=False, lineterminator="\n")
    logger.debug(f"写出CSV摘要: {path}")
    return path


def read_summary_csv(path: Union[str, Path]) -> List[Dict[str, Any]]:
    frame = pd.read_csv(path, keep_default_na=False, na_values=[""])
    return frame.to_dict(orient="records")
