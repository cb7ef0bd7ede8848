"""Phase-aware dual-stream dynamic-image micro-expression recognition."""
