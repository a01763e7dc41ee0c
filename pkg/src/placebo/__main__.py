import sys

from placebo.cli import main

sys.exit(main())
