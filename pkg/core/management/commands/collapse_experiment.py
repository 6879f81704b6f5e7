"""
Collapse-and-Repair Experiment Command

Usage:
    python manage.py collapse_experiment --seeds 0 1 2 --pretrain-steps 2000 --refine-steps 200

For each seed: pre-train, compare CLS-patch similarity and locality at the
early (20%) and final checkpoints, refine from the final checkpoint with the
early checkpoint as Gram teacher at resolution factors 1 and 2, and compare
locality and kNN accuracy. Results go to --output as CSV.
"""

import logging
from django.core.management.base import BaseCommand, CommandError

from core.exceptions import DinoLabError
from core.services.experiment_service import ExperimentPlan, collapse_experiment
from core.services.run_service import parse_overrides
from core.utils.tensor_io import atomic_write_bytes

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    help = 'Reproduce dense-feature collapse in pre-training and its repair by Gram anchoring'

    def add_arguments(self, parser):
        parser.add_argument('--seeds', type=int, nargs='+', default=[0, 1, 2], help='Seeds to run')
        parser.add_argument('--pretrain-steps', dest='pretrain_steps', type=int, default=2000)
        parser.add_argument('--refine-steps', dest='refine_steps', type=int, default=200)
        parser.add_argument('--factors', type=int, nargs='+', default=[1, 2], help='Gram teacher resolution factors')
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
            refine_steps=options['refine_steps'],
            factors=options['factors'],
        )

        self.stdout.write(self.style.NOTICE('=' * 60))
        self.stdout.write(self.style.NOTICE('COLLAPSE-AND-REPAIR EXPERIMENT'))
        self.stdout.write(self.style.NOTICE('=' * 60))
        self.stdout.write(f'Seeds: {plan.seeds}  pretrain steps: {plan.pretrain_steps}  '
                          f'refine steps: {plan.refine_steps}  factors: {plan.factors}')

        try:
            frame, verdict = collapse_experiment(plan, parse_overrides(options['overrides']))
        except DinoLabError as exc:
            logger.exception('collapse experiment failed')
            raise CommandError(str(exc), returncode=exc.exit_code)

        self.stdout.write('')
        self.stdout.write(frame.to_string(index=False))
        if options['output']:
            atomic_write_bytes(options['output'], frame.to_csv(index=False).encode('utf-8'))
            self.stdout.write(f"Results written to {options['output']}")

        self.stdout.write('')
        for key, value in verdict.items():
            self.stdout.write(f'  {key}: {value}')
        if verdict['passed']:
            self.stdout.write(self.style.SUCCESS('Collapse and repair reproduced'))
        else:
            self.stdout.write(self.style.WARNING('Collapse and repair not reproduced on a majority of seeds'))
