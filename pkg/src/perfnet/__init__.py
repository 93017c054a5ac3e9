"""Score-to-audio synthesis: pianorolls in, audio out.

Subpackages: ``tensor`` (autodiff core), ``score`` (MIDI and pianorolls),
``dsp`` (STFT / Griffin-Lim / WAV), ``model`` (the network), ``data``
(dataset construction), ``training`` (loop and checkpoints), ``metrics``
(objective evaluation), ``cli`` (command line).
"""

__version__ = "0.1.0"
