import sys

from opticnet.cli import main

sys.exit(main())
