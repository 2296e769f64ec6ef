import sys

from cyb.cli import main

sys.exit(main())
