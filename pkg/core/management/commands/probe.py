"""
Probe Command

Usage:
    python manage.py probe --from CHECKPOINT

Frozen-feature evaluation: kNN and linear probes on the CLS token, and a
linear dense probe on patch features (mIoU against the scene masks).
"""

from core.management.run_command import RunCommand


class Command(RunCommand):
    help = 'kNN, linear and dense linear probes on a frozen checkpoint'
    subcommand = 'probe'
    flag_keys = {'from_checkpoint': 'from_checkpoint'}

    def add_phase_arguments(self, parser):
        parser.add_argument('--from', dest='from_checkpoint', help='Checkpoint to evaluate')
