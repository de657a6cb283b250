import sys
from xlinfluence.cli import main


sys.exit(main())
