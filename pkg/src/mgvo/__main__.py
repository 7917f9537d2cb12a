import sys

from mgvo.cli import main

sys.exit(main())
