from agvrnd.cli import main
import sys
sys.exit(main())
