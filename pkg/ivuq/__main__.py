import sys

from ivuq.main import main

sys.exit(main())
