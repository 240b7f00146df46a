# Storage, checkpoint, artifact and model-access services
