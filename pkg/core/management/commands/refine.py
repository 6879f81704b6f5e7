"""
Gram Refinement Command

Usage:
    python manage.py refine --from runs/pretrain-.../checkpoints/step_0000200.dnv3 [--gram CHECKPOINT]

Continues training from a pretrain checkpoint with the Gram anchoring term.
Without --gram, the Gram teacher is the parent run's checkpoint nearest to
20% of its steps.
"""

from core.management.run_command import RunCommand


class Command(RunCommand):
    help = 'Gram-anchored refinement continuing from a pretrain checkpoint'
    subcommand = 'refine'
    flag_keys = {'from_checkpoint': 'from_checkpoint', 'gram_checkpoint': 'gram_checkpoint', 'steps': 'steps'}

    def add_phase_arguments(self, parser):
        parser.add_argument('--from', dest='from_checkpoint', help='Parent pretrain checkpoint')
        parser.add_argument('--gram', dest='gram_checkpoint', help='Gram teacher checkpoint')
        parser.add_argument('--steps', type=int, help='Phase length in optimizer steps')
