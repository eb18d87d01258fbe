"""``python -m fhs``."""

import sys

from .cli import main

sys.exit(main())
