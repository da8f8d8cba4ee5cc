import sys

from uisrnn.cli import main

sys.exit(main())
