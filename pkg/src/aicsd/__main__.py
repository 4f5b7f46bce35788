import sys

from aicsd.cli import main

sys.exit(main())
