"""
Umbrella Command

Usage:
    python manage.py dinolab <subcommand> [--from CHECKPOINT] [--gram CHECKPOINT] [--roster FILE] [--set key=value ...]

Runs any subcommand by name (pretrain, refine, hires-adapt, distill,
curate, probe, diagnose, simulate-distill); underscores and hyphens are
interchangeable.
"""

from core.management.run_command import RunCommand
from core.services.run_service import SUBCOMMANDS


class Command(RunCommand):
    help = 'Run any dinolab subcommand by name'
    flag_keys = {
        'from_checkpoint': 'from_checkpoint',
        'gram_checkpoint': 'gram_checkpoint',
        'roster': 'roster',
        'steps': 'steps',
    }

    def add_arguments(self, parser):
        parser.add_argument('subcommand', help=f"One of: {', '.join(SUBCOMMANDS)}")
        super().add_arguments(parser)

    def add_phase_arguments(self, parser):
        parser.add_argument('--from', dest='from_checkpoint', help='Parent checkpoint')
        parser.add_argument('--gram', dest='gram_checkpoint', help='Gram teacher checkpoint')
        parser.add_argument('--roster', help='Student roster file')
        parser.add_argument('--steps', type=int, help='Phase length in optimizer steps')

    def get_subcommand(self, options):
        return options['subcommand']
