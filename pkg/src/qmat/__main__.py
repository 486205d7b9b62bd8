import sys

from qmat.cli import main

sys.exit(main())
