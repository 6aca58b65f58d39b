import sys

from derphase.cli import main

sys.exit(main())
