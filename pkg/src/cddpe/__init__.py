"""CD-DPE: multi-contrast image super-resolution via convolutional-dictionary
feature decoupling and dual-prompt mixture-of-experts fusion."""

__version__ = "0.1.0"
