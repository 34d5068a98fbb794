import sys

from elcrack.cli import main

sys.exit(main())
