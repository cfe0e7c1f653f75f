import sys

from marl_reach.cli import main

sys.exit(main())
