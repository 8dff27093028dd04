import sys

from flowsdf.cli import main

sys.exit(main())
