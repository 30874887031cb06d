# Process settings, logging and artifact storage shared by the library and the pipeline.
