import sys

from soil.bench.cli import main

sys.exit(main())
