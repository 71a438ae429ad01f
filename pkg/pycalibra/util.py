"""Helpers for exporting result objects to JSON"""

import math
from typing import Union
from typing import List, Dict, Any

import numpy as np

JsonExportable = Union[int, float, bool, str, None, List["JsonExportable"], Dict[str, "JsonExportable"]]

def to_jsonable(value: Any) -> JsonExportable:
    """Convert numpy scalars/arrays, enums and nested containers to plain JSON values

    Non-finite floats become None so the output stays strict JSON.
    """
    if hasattr(value, 'export_json'):
        return value.export_json()
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if hasattr(value, 'value') and hasattr(value, 'name'):
        return value.value
    return value

def export_attr_to_json(obj: object, attrs: List[str]) -> Dict[str, JsonExportable]:
    """Export the named attributes of an object as json data

    Attributes with an `export_json` method are exported through it.
    """
    json_data: Dict[str, Any] = {}
    for attr in attrs:
        json_data[attr] = to_jsonable(getattr(obj, attr))
    return json_data
