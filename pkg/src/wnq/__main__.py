import sys

from wnq.cli import main

sys.exit(main())
