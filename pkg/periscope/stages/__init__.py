# Processing stages of the depth and measurement pipeline
