import sys

from coppo.cli import main

sys.exit(main())
