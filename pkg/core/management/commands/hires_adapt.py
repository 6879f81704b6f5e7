"""
High-resolution Adaptation Command

Usage:
    python manage.py hires_adapt --from runs/refine-.../checkpoints/step_0000100.dnv3

Mixed-resolution training continuing from a refine (or pretrain)
checkpoint, Gram-anchored against the source checkpoint unless --gram
names another one.
"""

from core.management.run_command import RunCommand


class Command(RunCommand):
    help = 'Mixed-resolution adaptation with Gram anchoring'
    subcommand = 'hires-adapt'
    flag_keys = {'from_checkpoint': 'from_checkpoint', 'gram_checkpoint': 'gram_checkpoint', 'steps': 'steps'}

    def add_phase_arguments(self, parser):
        parser.add_argument('--from', dest='from_checkpoint', help='Parent refine or pretrain checkpoint')
        parser.add_argument('--gram', dest='gram_checkpoint', help='Gram teacher checkpoint')
        parser.add_argument('--steps', type=int, help='Phase length in optimizer steps')
