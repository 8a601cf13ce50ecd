# Domain objects and numerics for continual image restoration
