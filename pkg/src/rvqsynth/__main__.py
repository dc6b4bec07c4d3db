import sys

from rvqsynth.cli import main

sys.exit(main())
