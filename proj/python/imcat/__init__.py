"""Tag-enhanced recommendation with intent clustering and alignment."""

from ._imcat import *  # noqa: F401,F403
from ._imcat import __doc__  # noqa: F401
