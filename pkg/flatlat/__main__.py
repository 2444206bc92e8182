import sys

from flatlat.pipeline import main

sys.exit(main())
