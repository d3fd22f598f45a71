import sys

from chartflow.cli import main

sys.exit(main())
