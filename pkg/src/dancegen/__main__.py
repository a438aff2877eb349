"""Allow ``python -m dancegen``."""

import sys

from .cli import main

sys.exit(main())
