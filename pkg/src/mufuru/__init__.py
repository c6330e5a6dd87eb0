"""Multi-Function Recurrent Units."""
