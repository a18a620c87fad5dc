import sys

from robust_mapf.cli import main

sys.exit(main())
