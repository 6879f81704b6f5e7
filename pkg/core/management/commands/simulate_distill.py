"""
Distillation Plan Command

Usage:
    python manage.py simulate_distill --roster roster.csv --workers 6

Allocates workers to students and prints the simulated step timeline
(plan.csv and timeline.csv are written to the run directory).
"""

from core.management.run_command import RunCommand


class Command(RunCommand):
    help = 'Plan worker allocation for multi-student distillation'
    subcommand = 'simulate-distill'
    flag_keys = {'roster': 'roster', 'workers': 'distill_workers'}

    def add_phase_arguments(self, parser):
        parser.add_argument('--roster', help='Student roster file')
        parser.add_argument('--workers', type=int, help='Total worker count')

    def report(self, result):
        super().report(result)
        plan_text = (result.summary or {}).get('plan_text')
        if plan_text:
            self.stdout.write('')
            self.stdout.write(plan_text)
