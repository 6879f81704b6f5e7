"""
Diagnostics Command

Usage:
    python manage.py diagnose --from CHECKPOINT --layer 4 --resolution 64

Renders cosine-similarity maps, PCA colourings and patch-norm maps of one
scene and reports CLS-patch similarity, locality and outlier channels.
"""

from core.management.run_command import RunCommand


class Command(RunCommand):
    help = 'Dense-feature diagnostics of a checkpoint'
    subcommand = 'diagnose'
    flag_keys = {'from_checkpoint': 'from_checkpoint', 'layer': 'diag_layer', 'resolution': 'diag_resolution'}

    def add_phase_arguments(self, parser):
        parser.add_argument('--from', dest='from_checkpoint', help='Checkpoint to inspect')
        parser.add_argument('--layer', type=int, help='1-based block index (-1: last)')
        parser.add_argument('--resolution', type=int, help='Input side in pixels (0: dataset size)')
