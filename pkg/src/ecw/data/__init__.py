"""Small STO-3G fixtures (FCIDUMP + properties.json) generated by tools/make_fixtures.py."""
from pathlib import Path

DATA_DIR = Path(__file__).resolve().parent


def fixture_path(name, suffix=".fcidump"):
    path = DATA_DIR / f"{name}{suffix}"
    if not path.exists():
        raise FileNotFoundError(path)
    return path
