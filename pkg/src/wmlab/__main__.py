import sys

from wmlab.cli import main

sys.exit(main())
