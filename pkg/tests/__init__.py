# Tests package for continual restoration
