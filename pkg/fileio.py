import json
import os
import tempfile
from pathlib import Path


def atomic_write_bytes(path, data):
    """임시 파일에 쓴 뒤 rename 하여 원자적으로 저장하는 함수"""
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def atomic_write_text(path, text):
    return atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path, payload):
    # sort_keys: 같은 입력이면 같은 바이트
    text = json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False)
    return atomic_write_text(path, text + "\n")


def atomic_write_frame(path, frame):
    """pandas DataFrame 을 CSV 로 원자적으로 저장하는 함수"""
    return atomic_write_text(path, frame.to_csv(index=False, float_format="%.10g"))
