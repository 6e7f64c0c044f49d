"""Physics-conditioned audio generation math and evaluation toolkit.

Modules:
    trace      file-based trace model (RLE masks, metric point maps)
    velocity   object centroid trajectories and speeds from traces
    adapter    physics conditioning math with hand-written gradients
    toycfm     desk-scale conditional flow-matching trainer/sampler
    apcc       onset detection and audio-physics correlation metrics
    cli        command-line front end
"""

__version__ = "0.1.0"
