"""Model artifacts, the train/validate/test pipeline, the HTTP service and the data watcher."""
