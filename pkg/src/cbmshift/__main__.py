import sys

from cbmshift.cli import main

sys.exit(main())
