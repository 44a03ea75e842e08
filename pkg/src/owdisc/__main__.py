import sys

from owdisc.pipeline.cli import main

sys.exit(main())
