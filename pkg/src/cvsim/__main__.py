import sys

from cvsim.cli import main

sys.exit(main())
