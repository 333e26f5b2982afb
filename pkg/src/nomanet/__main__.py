import sys

from nomanet.cli import main

sys.exit(main())
