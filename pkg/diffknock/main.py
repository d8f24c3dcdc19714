"""
DiffKnock — Punto de entrada
`python -m diffknock.main <subcomando>` equivale a la CLI de `diffknock.tools.cli`.
"""

from __future__ import annotations

import sys
from typing import Optional, Sequence

from diffknock.tools.cli import main as cli_main
from diffknock.utils.logger import get_logger
from diffknock.utils.paths import ensure_runtime_dirs
from diffknock.version import __version__

logger = get_logger("Main")


def main(argv: Optional[Sequence[str]] = None) -> int:
    ensure_runtime_dirs()
    args = list(sys.argv[1:] if argv is None else argv)
    logger.debug("[Main] DiffKnock v%s args=%s", __version__, args)
    return cli_main(args)


if __name__ == "__main__":
    raise SystemExit(main())
