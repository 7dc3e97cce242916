"""Allow ``python -m hybrid_dispatch``."""

import sys

from .cli import main

sys.exit(main())
