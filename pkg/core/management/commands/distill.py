"""
Distillation Command

Usage:
    python manage.py distill --from CHECKPOINT --roster roster.csv --steps 100

Trains every student of the roster against one frozen teacher, sharing the
teacher targets of each batch. Roster lines: name, depth, embed_dim, head_count.
"""

from core.management.run_command import RunCommand


class Command(RunCommand):
    help = 'Multi-student distillation from a frozen teacher checkpoint'
    subcommand = 'distill'
    flag_keys = {'from_checkpoint': 'from_checkpoint', 'roster': 'roster', 'steps': 'steps'}

    def add_phase_arguments(self, parser):
        parser.add_argument('--from', dest='from_checkpoint', help='Teacher checkpoint')
        parser.add_argument('--roster', help='Student roster file')
        parser.add_argument('--steps', type=int, help='Distillation steps for every student')
