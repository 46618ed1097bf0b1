import sys

from cutcopula.cli import main

sys.exit(main())
