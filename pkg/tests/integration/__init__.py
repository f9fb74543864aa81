# Integration tests - figure reproductions, slow, gated by FLOWDENSE_RUN_SLOW
