import sys

from longicause.cli import main

sys.exit(main())
