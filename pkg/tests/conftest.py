import sys
from pathlib import Path

# Allow running the suite from a checkout without an editable install.
_src = Path(__file__).resolve().parent.parent / "src"
if _src.is_dir():
    try:
        import lorot  # noqa: F401
    except ImportError:
        sys.path.insert(0, str(_src))
