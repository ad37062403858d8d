"""Gesture factorization toolkit.

Decomposes multichannel articulatory kinematics into a gesture dictionary
and sparse gestural scores via a convolutional autoencoder, and evaluates
the scores with CTC phoneme recognition.
"""

__version__ = "0.1.0"
