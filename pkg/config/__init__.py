# Config module for the early-exit engine
from .settings import *
