"""
Distillation Experiment Command

Usage:
    python manage.py distill_experiment --seeds 0 1 2 --pretrain-steps 2000 --distill-steps 200

For each seed: pre-train the teacher, distill every roster student from it,
pre-train each student architecture from scratch for the same number of
steps, and compare kNN accuracy of the two. Results go to --output as CSV.
"""

import logging
from django.core.management.base import BaseCommand, CommandError

from core.exceptions import DinoLabError
from core.services.experiment_service import ExperimentPlan, distill_experiment
from core.services.run_service import parse_overrides
from core.utils.tensor_io import atomic_write_bytes

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    help = 'Compare distilled students with equal-budget from-scratch pre-training'

    def add_arguments(self, parser):
        parser.add_argument('--seeds', type=int, nargs='+', default=[0, 1, 2], help='Seeds to run')
        parser.add_argument('--pretrain-steps', dest='pretrain_steps', type=int, default=2000)
        parser.add_argument('--distill-steps', dest='distill_steps', type=int, default=200,
                            help='Steps for both the distilled and the from-scratch students')
        parser.add_argument(
            '--set',
            dest='overrides',
            action='append',
            default=[],
            metavar='KEY=VALUE',
            help='Config override applied to every stage; repeatable',
        )
        parser.add_argument('--output', help='CSV file for the per-seed results')

    def handle(self, *args, **options):
        plan = ExperimentPlan(
            seeds=options['seeds'],
            pretrain_steps=options['pretrain_steps'],
            distill_steps=options['distill_steps'],
        )

        self.stdout.write(self.style.NOTICE('=' * 60))
        self.stdout.write(self.style.NOTICE('DISTILLATION EXPERIMENT'))
        self.stdout.write(self.style.NOTICE('=' * 60))
        self.stdout.write(f'Seeds: {plan.seeds}  pretrain steps: {plan.pretrain_steps}  '
                          f'distill steps: {plan.distill_steps}')

        try:
            frame, verdict = distill_experiment(plan, parse_overrides(options['overrides']))
        except DinoLabError as exc:
            logger.exception('distillation experiment failed')
            raise CommandError(str(exc), returncode=exc.exit_code)

        self.stdout.write('')
        self.stdout.write(frame.to_string(index=False))
        if options['output']:
            atomic_write_bytes(options['output'], frame.to_csv(index=False).encode('utf-8'))
            self.stdout.write(f"Results written to {options['output']}")

        self.stdout.write('')
        for name, summary in verdict['students'].items():
            self.stdout.write(f'  {name}: {summary}')
        if verdict['passed']:
            self.stdout.write(self.style.SUCCESS('Distilled students match or beat scratch training'))
        else:
            self.stdout.write(self.style.WARNING('A distilled student trails scratch training on the median seed'))
