# Multi-view multi-object scene learning
