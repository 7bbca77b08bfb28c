from .ablate import app as ablate_app
from .evaluate import app as eval_app
from .propose import app as propose_app
from .synth import app as synth_app
from .track import app as track_app
