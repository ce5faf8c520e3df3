"""PCB adversarial attacks and a frame-stream injector against a micro one-stage detector."""
