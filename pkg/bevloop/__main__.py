from bevloop.cli import entrypoint

entrypoint()
