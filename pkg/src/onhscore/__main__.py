import sys

from onhscore.cli import main

sys.exit(main())
