# flowdense test suite
