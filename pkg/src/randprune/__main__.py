import sys

from randprune.runner.cli import main

sys.exit(main())
