"""deskocr: a desk-scale OCR toolkit trainable end-to-end on synthetic data.

Text detection (DB-style with FPN / RSE-FPN / LK-PAN necks and CML/DML
distillation), text recognition (SVTR-LCNet-style hybrid with CTC, GTC,
TextConAug, TextRotNet pretraining, U-DML, UIM mining), geometry
post-processing, and a CLI harness — all on a small hand-built float32
autodiff engine.
"""

__version__ = "0.1.0"
