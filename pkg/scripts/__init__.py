# Pipeline stages of FITKit; run them through `python -m scripts.cli <stage>`.
