from rcqlpack.cli import main
import sys

sys.exit(main())
