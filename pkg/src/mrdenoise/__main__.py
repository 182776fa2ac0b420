import sys

from mrdenoise.cli import main

sys.exit(main())
