import sys

from stranglerkit.cli import main

sys.exit(main())
