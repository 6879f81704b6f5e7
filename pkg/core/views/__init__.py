from .run_views import *
