"""
Pre-training Command

Usage:
    python manage.py pretrain --steps 200 --set scale=100

Runs DINO + iBOT + Koleo self-supervised training from a fresh
initialization and writes checkpoints, metrics.csv and monitor.csv.
"""

from core.management.run_command import RunCommand


class Command(RunCommand):
    help = 'Self-supervised pre-training from scratch'
    subcommand = 'pretrain'
    flag_keys = {'steps': 'steps'}

    def add_phase_arguments(self, parser):
        parser.add_argument('--steps', type=int, help='Phase length in optimizer steps')
